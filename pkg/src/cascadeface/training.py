"""Multi-task objective, online hard sample mining and the SGD training loop."""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .networks import INPUT_SIZES, NetOutput, Network
from .tensor import sgd_step

log = logging.getLogger(__name__)

EPS = 1e-7
TASKS = ("det", "box", "landmark")


class SampleType(enum.IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    PART = 2
    LANDMARK = 3


# (det, box, landmark) indicator per sample type
BETA = np.array([
    [1, 0, 0],
    [1, 1, 0],
    [0, 1, 0],
    [0, 0, 1],
], dtype=np.float64)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainingSample:
    patch: np.ndarray
    sample_type: SampleType
    y_det: int | None = None
    y_box: np.ndarray | None = None
    y_landmark: np.ndarray | None = None

    def __post_init__(self):
        det, box, lm = BETA[self.sample_type]
        for present, value, what in ((det, self.y_det, "y_det"), (box, self.y_box, "y_box"),
                                     (lm, self.y_landmark, "y_landmark")):
            if bool(present) != (value is not None):
                state = "requires" if present else "must not carry"
                raise ValueError(f"{self.sample_type.name} sample {state} {what}")

    @property
    def beta(self) -> np.ndarray:
        return BETA[self.sample_type]


@dataclass
class SampleSet:
    """Column-wise storage of training samples for one network stage.

    Undefined targets are stored as zeros; the ``types`` column decides
    which of them take part in the loss. Harvested sets also keep the
    source-image ``crops`` boxes, for auditing.
    """

    patches: np.ndarray
    types: np.ndarray
    y_det: np.ndarray
    y_box: np.ndarray
    y_landmark: np.ndarray
    crops: np.ndarray | None = None

    @classmethod
    def empty(cls, size: int) -> "SampleSet":
        return cls(np.zeros((0, 3, size, size), np.float32), np.zeros(0, np.int8),
                   np.zeros(0, np.float64), np.zeros((0, 4)), np.zeros((0, 10)), np.zeros((0, 4)))

    @classmethod
    def from_samples(cls, samples: Sequence[TrainingSample], size: int | None = None) -> "SampleSet":
        if not samples:
            return cls.empty(size or 12)
        return cls(
            np.stack([s.patch for s in samples]).astype(np.float32),
            np.array([s.sample_type for s in samples], dtype=np.int8),
            np.array([s.y_det if s.y_det is not None else 0 for s in samples], dtype=np.float64),
            np.array([s.y_box if s.y_box is not None else np.zeros(4) for s in samples]),
            np.array([s.y_landmark if s.y_landmark is not None else np.zeros(10) for s in samples]),
        )

    @classmethod
    def concat(cls, sets: Iterable["SampleSet"]) -> "SampleSet":
        sets = list(sets)
        cols = [np.concatenate([getattr(s, f) for s in sets])
                for f in ("patches", "types", "y_det", "y_box", "y_landmark")]
        crops = None
        if sets and all(s.crops is not None for s in sets):
            crops = np.concatenate([s.crops for s in sets])
        return cls(*cols, crops=crops)

    def __len__(self) -> int:
        return len(self.types)

    def __getitem__(self, idx) -> "SampleSet":
        return SampleSet(self.patches[idx], self.types[idx], self.y_det[idx],
                         self.y_box[idx], self.y_landmark[idx],
                         None if self.crops is None else self.crops[idx])

    def sample(self, i: int) -> TrainingSample:
        t = SampleType(int(self.types[i]))
        det, box, lm = BETA[t]
        return TrainingSample(self.patches[i], t,
                              int(self.y_det[i]) if det else None,
                              self.y_box[i].copy() if box else None,
                              self.y_landmark[i].copy() if lm else None)

    @property
    def beta(self) -> np.ndarray:
        return BETA[self.types.astype(np.int64)]

    def counts(self) -> dict[str, int]:
        return {t.name.lower(): int(np.sum(self.types == t)) for t in SampleType}


@dataclass
class LossWeights:
    alpha_det: float = 1.0
    alpha_box: float = 0.5
    alpha_landmark: float = 0.5
    lr: float = 0.006
    # cap on the global gradient norm per step; None for unclipped SGD
    max_grad_norm: float | None = 20.0
    batch_size: int = 64
    ohem_ratio: float = 0.7
    # negative : positive : part : landmark
    batch_ratios: tuple[float, float, float, float] = (3, 1, 1, 2)

    def __post_init__(self):
        if not 0 < self.ohem_ratio <= 1:
            raise ValueError(f"ohem_ratio must lie in (0, 1], got {self.ohem_ratio}")
        if min(self.alpha_det, self.alpha_box, self.alpha_landmark) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ValueError(f"max_grad_norm must be positive or None, got {self.max_grad_norm}")
        self.batch_ratios = tuple(float(r) for r in self.batch_ratios)

    @classmethod
    def for_stage(cls, kind: str, **overrides) -> "LossWeights":
        base = {"alpha_landmark": 1.0} if kind == "onet" else {}
        base.update(overrides)
        return cls(**base)

    @property
    def alphas(self) -> np.ndarray:
        return np.array([self.alpha_det, self.alpha_box, self.alpha_landmark])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["batch_ratios"] = list(self.batch_ratios)
        return d


def det_loss(p, y):
    """Cross-entropy of face probability ``p`` against label ``y``."""
    p = np.clip(np.asarray(p, dtype=np.float64), EPS, 1 - EPS)
    y = np.asarray(y, dtype=np.float64)
    return -(y * np.log(p) + (1 - y) * np.log(1 - p))


def box_loss(pred, target):
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.sum(d * d, axis=-1)


landmark_loss = box_loss


def ohem_select(losses: Sequence[float], ratio: float = 0.7) -> np.ndarray:
    """Indices of the ``ceil(ratio * N)`` largest losses, ties to the lower index.

    Returned in ascending index order.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        return np.zeros(0, dtype=np.int64)
    keep = math.ceil(ratio * losses.size - 1e-9)
    order = np.argsort(-losses, kind="stable")
    return np.sort(order[:keep])


@dataclass
class LossResult:
    total: float
    per_task: dict[str, float]
    d_logits: np.ndarray
    d_box: np.ndarray
    d_landmark: np.ndarray
    det_selected: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))


def total_loss(batch: SampleSet, out: NetOutput, weights: LossWeights, ohem: bool = True) -> LossResult:
    """Weighted, type-masked sum of the three task losses and its gradients.

    The detection term covers only the hard samples picked by
    :func:`ohem_select` among samples with a detection label; with
    ``ohem=False`` every labelled sample counts.
    """
    beta = batch.beta
    dtype = out.logits.dtype
    n = len(batch)
    a_det, a_box, a_lm = weights.alphas

    prob = out.prob.astype(np.float64)
    y = batch.y_det
    # probability of the true class; clamping it equals clamping p_face
    p_true = np.where(y > 0.5, prob[:, 1], prob[:, 0])
    det_all = -np.log(np.clip(p_true, EPS, 1 - EPS))
    det_idx = np.flatnonzero(beta[:, 0] > 0)
    if ohem and len(det_idx):
        selected = det_idx[ohem_select(det_all[det_idx], weights.ohem_ratio)]
    else:
        selected = det_idx
    det_mask = np.zeros(n)
    det_mask[selected] = 1.0

    box_diff = out.box.astype(np.float64) - batch.y_box
    lm_diff = out.landmark.astype(np.float64) - batch.y_landmark
    per_task = {
        "det": float(np.sum(det_mask * det_all)),
        "box": float(np.sum(beta[:, 1] * np.sum(box_diff ** 2, axis=1))),
        "landmark": float(np.sum(beta[:, 2] * np.sum(lm_diff ** 2, axis=1))),
    }
    total = a_det * per_task["det"] + a_box * per_task["box"] + a_lm * per_task["landmark"]

    onehot = np.stack([1 - y, y], axis=1)
    d_logits = (a_det * det_mask)[:, None] * (prob - onehot)
    d_box = (a_box * beta[:, 1])[:, None] * 2 * box_diff
    d_lm = (a_lm * beta[:, 2])[:, None] * 2 * lm_diff
    return LossResult(total, per_task, d_logits.astype(dtype), d_box.astype(dtype),
                      d_lm.astype(dtype), selected)


def batch_counts(batch_size: int, ratios: Sequence[float]) -> list[int]:
    """Split ``batch_size`` by ``ratios`` with largest-remainder rounding.

    Remainder ties go to the earlier sample type.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.sum() <= 0:
        raise ValueError("batch ratios must not all be zero")
    quotas = batch_size * ratios / ratios.sum()
    counts = np.floor(quotas + 1e-9).astype(int)
    short = batch_size - counts.sum()
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:short]:
        counts[i] += 1
    return [int(c) for c in counts]


def compose_minibatch(pools: dict[SampleType, np.ndarray], batch_size: int,
                      ratios: Sequence[float], rng: np.random.Generator) -> np.ndarray:
    """Draw sample indices per type following ``ratios`` (neg:pos:part:landmark)."""
    picked = []
    for t, k in zip(SampleType, batch_counts(batch_size, ratios)):
        if k == 0:
            continue
        pool = pools.get(t)
        if pool is None or len(pool) == 0:
            raise ValueError(f"sample pool {t.name.lower()} is empty but the batch needs {k}")
        picked.append(rng.choice(pool, size=k, replace=k > len(pool)))
    return np.concatenate(picked)


def pools_by_type(samples: SampleSet) -> dict[SampleType, np.ndarray]:
    return {t: np.flatnonzero(samples.types == t) for t in SampleType}


def evaluate_losses(net: Network, samples: SampleSet, chunk: int = 256) -> dict[str, float]:
    """Mean per-sample loss of each task over samples labelled for it, plus det accuracy."""
    sums = dict.fromkeys(TASKS, 0.0)
    correct = 0
    beta = samples.beta
    for start in range(0, len(samples), chunk):
        part = samples[start:start + chunk]
        out = net.forward(part.patches)
        b = beta[start:start + chunk]
        p = out.face_prob.astype(np.float64)
        sums["det"] += float(np.sum(b[:, 0] * det_loss(p, part.y_det)))
        sums["box"] += float(np.sum(b[:, 1] * box_loss(out.box, part.y_box)))
        sums["landmark"] += float(np.sum(b[:, 2] * landmark_loss(out.landmark, part.y_landmark)))
        correct += int(np.sum(b[:, 0] * ((p > 0.5) == (part.y_det > 0.5))))
    counts = beta.sum(axis=0)
    result = {task: sums[task] / counts[i] if counts[i] else 0.0 for i, task in enumerate(TASKS)}
    result["det_accuracy"] = correct / counts[0] if counts[0] else 0.0
    return result


@dataclass
class TrainResult:
    net: Network
    curves: list[tuple[int, str, str, float]]

    def final(self, split: str, task: str) -> float:
        rows = [r for r in self.curves if r[1] == split and r[2] == task]
        return rows[-1][3]


def init_regression_biases(net: Network, samples: SampleSet) -> None:
    """Start each regression head at the mean target of the samples labelled for it.

    Targets sit far from zero (landmarks near 0.5), and fitting that offset
    through the weights instead of the bias is the stiffest direction early in
    training.
    """
    beta = samples.beta
    for head, col, targets in (("box", 1, samples.y_box), ("landmark", 2, samples.y_landmark)):
        mask = beta[:, col] > 0
        if mask.any():
            net.heads[head].bias.value[...] = targets[mask].mean(axis=0)


def train_stage(net: Network, train: SampleSet, weights: LossWeights, epochs: int,
                seed: int = 0, val: SampleSet | None = None, ohem: bool = True,
                batches_per_epoch: int | None = None) -> TrainResult:
    """Train ``net`` in place with plain SGD on the summed multi-task objective.

    Steps are norm-clipped at ``weights.max_grad_norm``: the summed loss lets
    a few confidently wrong samples produce rare gradient spikes that plain
    SGD at a useful learning rate turns into divergence.

    Each epoch draws ``batches_per_epoch`` mini-batches (default: enough to
    cover the training set once). Curves hold, per epoch and task, the mean
    per-sample training loss accumulated over the epoch's batches and the
    mean validation loss after the epoch.
    """
    if train.patches.shape[2] != INPUT_SIZES[net.kind]:
        raise ValueError(f"{net.kind} needs {INPUT_SIZES[net.kind]}px samples, "
                         f"got {train.patches.shape[2]}px")
    rng = np.random.default_rng(seed)
    pools = pools_by_type(train)
    if batches_per_epoch is None:
        batches_per_epoch = max(1, math.ceil(len(train) / weights.batch_size))
    params = net.parameters()
    curves: list[tuple[int, str, str, float]] = []
    step = 0
    for epoch in range(1, epochs + 1):
        sums = np.zeros(3)
        counts = np.zeros(3)
        correct = 0
        for _ in range(batches_per_epoch):
            idx = compose_minibatch(pools, weights.batch_size, weights.batch_ratios, rng)
            batch = train[idx]
            out = net.forward(batch.patches)
            res = total_loss(batch, out, weights, ohem=ohem)
            if not math.isfinite(res.total):
                raise TrainingDivergedError(f"non-finite loss at batch {step} (epoch {epoch})")
            net.backward(res.d_logits, res.d_box, res.d_landmark, input_grad=False)
            try:
                sgd_step(params, weights.lr, weights.max_grad_norm)
            except FloatingPointError as exc:
                raise TrainingDivergedError(f"batch {step} (epoch {epoch}): {exc}") from None
            step += 1
            # running training losses, before hard mining, per labelled sample
            beta = batch.beta
            p = out.face_prob.astype(np.float64)
            sums += [np.sum(beta[:, 0] * det_loss(p, batch.y_det)),
                     np.sum(beta[:, 1] * box_loss(out.box, batch.y_box)),
                     np.sum(beta[:, 2] * landmark_loss(out.landmark, batch.y_landmark))]
            counts += beta.sum(axis=0)
            correct += int(np.sum(beta[:, 0] * ((p > 0.5) == (batch.y_det > 0.5))))
        for i, task in enumerate(TASKS):
            curves.append((epoch, "train", task, sums[i] / counts[i] if counts[i] else 0.0))
        curves.append((epoch, "train", "det_accuracy", correct / counts[0] if counts[0] else 0.0))
        if val is not None and len(val):
            last = evaluate_losses(net, val)
            curves.extend((epoch, "val", task, value) for task, value in last.items())
            log.info("%s epoch %d: val det %.4f acc %.4f box %.4f landmark %.4f", net.kind, epoch,
                     last["det"], last["det_accuracy"], last["box"], last["landmark"])
    net.trained = True
    return TrainResult(net, curves)


def write_curves_csv(curves: Iterable[tuple[int, str, str, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "split", "task", "value"])
        for epoch, split, task, value in curves:
            writer.writerow([epoch, split, task, repr(float(value))])
