"""Toy-scale ablations of hard example mining and joint landmark learning.

Both compare two O-Net runs that share seed, data, learning rate and batch
budget, differing only in the switch under study.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .dataset import AnnotatedImage, harvest_corpus
from .networks import build_network
from .training import LossWeights, SampleSet, TrainResult, init_regression_biases, train_stage

OHEM_COUNTS = {"negative": 3, "positive": 1, "part": 0, "landmark": 0}
JOINT_COUNTS = {"negative": 3, "positive": 1, "part": 1, "landmark": 2}


@dataclass
class AblationResult:
    which: str
    metric: str
    # the variant expected to win comes first
    names: tuple[str, str]
    runs: dict[str, TrainResult]
    lower_is_better: bool

    @property
    def values(self) -> dict[str, float]:
        return {name: self.runs[name].final("val", self.metric) for name in self.names}

    def holds(self) -> bool:
        a, b = (self.values[n] for n in self.names)
        return bool(a <= b if self.lower_is_better else a >= b)

    def summary(self) -> dict:
        return {"which": self.which, "metric": self.metric, "values": self.values,
                "lower_is_better": self.lower_is_better, "holds": self.holds(),
                "checksums": {n: r.net.checksum() for n, r in self.runs.items()}}


def onet_samples(corpus: Sequence[AnnotatedImage], counts: dict[str, int], seed: int) -> SampleSet:
    return harvest_corpus(corpus, counts, 48, seed=seed)


def fresh_onet(seed: int, train: SampleSet):
    net = build_network("onet", seed=seed)
    init_regression_biases(net, train)
    return net


def ohem_ablation(train: SampleSet, val: SampleSet, epochs: int = 20, lr: float = LossWeights.lr,
                  seed: int = 0, batches_per_epoch: int | None = None) -> AblationResult:
    """Detection-only O-Net, with and without keeping the hardest 70% per batch."""
    weights = LossWeights.for_stage("onet", lr=lr, alpha_box=0.0, alpha_landmark=0.0,
                                    batch_ratios=(3, 1, 0, 0))
    runs = {}
    for name, ohem in (("ohem", True), ("baseline", False)):
        runs[name] = train_stage(fresh_onet(seed, train), train, weights, epochs, seed=seed,
                                 val=val, ohem=ohem, batches_per_epoch=batches_per_epoch)
    return AblationResult("ohem", "det", ("ohem", "baseline"), runs, lower_is_better=True)


def joint_ablation(train: SampleSet, val: SampleSet, epochs: int = 10, lr: float = LossWeights.lr,
                   seed: int = 0, batches_per_epoch: int | None = None) -> AblationResult:
    """O-Net with the landmark task switched on or off; scored on detection accuracy."""
    runs = {}
    for name, alpha in (("joint", 1.0), ("solo", 0.0)):
        weights = LossWeights.for_stage("onet", lr=lr, alpha_landmark=alpha)
        runs[name] = train_stage(fresh_onet(seed, train), train, weights, epochs, seed=seed,
                                 val=val, batches_per_epoch=batches_per_epoch)
    return AblationResult("joint", "det_accuracy", ("joint", "solo"), runs, lower_is_better=False)


def run_ablation(which: str, train_corpus: Sequence[AnnotatedImage],
                 val_corpus: Sequence[AnnotatedImage], seed: int = 0, **kwargs) -> AblationResult:
    if which == "ohem":
        counts, fn = OHEM_COUNTS, ohem_ablation
    elif which == "joint":
        counts, fn = JOINT_COUNTS, joint_ablation
    else:
        raise ValueError(f"unknown ablation {which!r}; expected 'ohem' or 'joint'")
    train = onet_samples(train_corpus, counts, seed)
    val = onet_samples(val_corpus, counts, seed + 1)
    return fn(train, val, seed=seed, **kwargs)
