"""Detection PR tables, landmark NME and forward-pass timing."""

from __future__ import annotations

import platform
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .cascade import CascadeConfig, detect
from .geometry import Box, crop_batch, decode_landmarks_batch, iou_matrix
from .networks import Network


@dataclass
class DetectionEval:
    # rows of (score threshold, true positives, false positives, precision, recall)
    table: list[tuple[float, int, int, float, float]]
    average_precision: float
    n_ground_truth: int
    # per image: list of (detection index, ground-truth index) pairs
    matches: list[list[tuple[int, int]]] = field(default_factory=list)

    def best_precision_at_recall(self, recall: float) -> float:
        """Highest precision among operating points reaching ``recall`` (0 if none)."""
        ok = [p for _, _, _, p, r in self.table if r >= recall]
        return max(ok) if ok else 0.0

    def operating_point(self, precision: float, recall: float) -> tuple[float, float, float] | None:
        """First (threshold, precision, recall) row meeting both targets, if any."""
        for thr, _, _, p, r in self.table:
            if p >= precision and r >= recall:
                return thr, p, r
        return None


def match_detections(dets: Sequence[Box], gts: Sequence[Box], iou_match: float = 0.5
                     ) -> list[tuple[int, int]]:
    """Greedy one-to-one matching: by descending score, each detection takes the
    free ground truth it overlaps most, provided the IoU reaches ``iou_match``."""
    if not dets or not gts:
        return []
    order = np.argsort([-d.score for d in dets], kind="stable")
    ov = iou_matrix(np.array([d.coords for d in dets]), np.array([g.coords for g in gts]))
    taken = np.zeros(len(gts), dtype=bool)
    pairs = []
    for i in order:
        cand = np.where(taken, -1.0, ov[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_match:
            taken[j] = True
            pairs.append((int(i), j))
    return pairs


def eval_detection(detections: Sequence[Sequence[Box]], ground_truth: Sequence[Sequence[Box]],
                   iou_match: float = 0.5) -> DetectionEval:
    """Precision/recall over all score thresholds for a set of images."""
    n_gt = sum(len(g) for g in ground_truth)
    scored = []
    all_matches = []
    for img, (dets, gts) in enumerate(zip(detections, ground_truth)):
        pairs = match_detections(dets, gts, iou_match)
        all_matches.append(pairs)
        hit = {i for i, _ in pairs}
        scored.extend((float(d.score), i in hit) for i, d in enumerate(dets))
    scored.sort(key=lambda t: -t[0])
    table = []
    tp = fp = 0
    for k, (score, hit) in enumerate(scored):
        tp += hit
        fp += not hit
        if k + 1 < len(scored) and scored[k + 1][0] == score:
            continue
        table.append((score, tp, fp, tp / (tp + fp), tp / n_gt if n_gt else 0.0))
    return DetectionEval(table, _average_precision(table), n_gt, all_matches)


def _average_precision(table) -> float:
    """All-point interpolated area under the precision-recall curve."""
    if not table:
        return 0.0
    recall = np.array([0.0] + [r for *_, r in table])
    precision = np.array([1.0] + [p for *_, p, _ in table])
    # precision envelope, non-increasing in recall
    env = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum((recall[1:] - recall[:-1]) * env[1:]))


@dataclass
class NMEResult:
    mean: float
    per_landmark: list[float]
    n_faces: int
    failures: int


def eval_nme(predicted: np.ndarray, truth: np.ndarray) -> NMEResult:
    """Mean point error over faces, normalized by the true inter-ocular distance.

    ``predicted`` and ``truth`` are ``(F, 5, 2)`` with the eyes first. Faces
    whose true eyes coincide are excluded and counted as failures.
    """
    pred = np.asarray(predicted, dtype=np.float64).reshape(-1, 5, 2)
    gt = np.asarray(truth, dtype=np.float64).reshape(-1, 5, 2)
    iod = np.linalg.norm(gt[:, 0] - gt[:, 1], axis=1)
    ok = iod > 0
    if not ok.any():
        return NMEResult(float("nan"), [float("nan")] * 5, 0, int((~ok).sum()))
    err = np.linalg.norm(pred[ok] - gt[ok], axis=2) / iod[ok, None]
    return NMEResult(float(err.mean()), [float(v) for v in err.mean(axis=0)],
                     int(ok.sum()), int((~ok).sum()))


def central_crop(image: np.ndarray) -> Box:
    """Largest square centred in the image."""
    h, w = image.shape[:2]
    side = min(h, w)
    x1, y1 = (w - side) / 2, (h - side) / 2
    return Box(x1, y1, x1 + side, y1 + side)


def fallback_landmarks(image: np.ndarray, onet: Network) -> np.ndarray:
    """O-Net landmarks on the central crop, for faces the detector missed."""
    crop = central_crop(image)
    out = onet.forward(crop_batch(image, np.array([crop.coords]), onet.input_size))
    return decode_landmarks_batch(np.array([crop.coords]), out.landmark)[0]


def evaluate_corpus(nets: dict[str, Network], corpus, config: CascadeConfig | None = None,
                    iou_match: float = 0.5, fallback: bool = False) -> dict:
    """Run the cascade over annotated images and summarize detection and landmark quality.

    NME is computed on ground-truth faces matched to a detection; with
    ``fallback`` the faces of images without any match are scored from the
    central-crop O-Net output and reported separately.
    """
    config = config or CascadeConfig()
    dets = [detect(item.image, nets, config) for item in corpus]
    ev = eval_detection(dets, [item.boxes for item in corpus], iou_match)
    pred, truth, fb_pred, fb_truth = [], [], [], []
    for item, d, pairs in zip(corpus, dets, ev.matches):
        for i, j in pairs:
            if item.landmarks[j] is not None:
                pred.append(np.asarray(d[i].landmarks))
                truth.append(np.asarray(item.landmarks[j]))
        if fallback and not pairs and item.boxes:
            guess = fallback_landmarks(item.image, nets["onet"])
            for lm in item.landmarks:
                if lm is not None:
                    fb_pred.append(guess)
                    fb_truth.append(np.asarray(lm))
    nme = eval_nme(np.array(pred).reshape(-1, 5, 2), np.array(truth).reshape(-1, 5, 2))
    report = {
        "n_images": len(corpus),
        "n_ground_truth": ev.n_ground_truth,
        "n_detections": int(sum(len(d) for d in dets)),
        "average_precision": ev.average_precision,
        "precision_at_recall_0.9": ev.best_precision_at_recall(0.9),
        "pr_table": [{"threshold": t, "tp": tp, "fp": fp, "precision": p, "recall": r}
                     for t, tp, fp, p, r in ev.table],
        "nme": {"mean": nme.mean, "per_landmark": nme.per_landmark,
                "n_faces": nme.n_faces, "failures": nme.failures},
    }
    if fallback:
        fb = eval_nme(np.array(fb_pred).reshape(-1, 5, 2), np.array(fb_truth).reshape(-1, 5, 2))
        report["nme_fallback"] = {"mean": fb.mean, "n_faces": fb.n_faces}
    return report


def hardware_descriptor() -> str:
    cpu = platform.processor() or platform.machine()
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    cpu = line.split(":", 1)[1].strip()
                    break
    except OSError:
        pass
    return f"{cpu}; {platform.system()} {platform.release()}; numpy {np.__version__}"


def bench_forward(net: Network, n: int = 300, repeats: int = 5, warmup: int = 10,
                  seed: int = 0) -> float:
    """Median wall time (seconds) of ``n`` single-patch forwards at native size."""
    rng = np.random.default_rng(seed)
    s = net.input_size
    patch = rng.normal(0, 0.5, size=(1, 3, s, s)).astype(np.float32)
    for _ in range(warmup):
        net.forward(patch)
    runs = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(n):
            net.forward(patch)
        runs.append(time.perf_counter() - t0)
    return statistics.median(runs)


def timing_table(nets: dict[str, Network], n: int = 300) -> dict:
    return {"hardware": hardware_descriptor(), "n_forward": n,
            "seconds": {kind: bench_forward(net, n) for kind, net in nets.items()}}
