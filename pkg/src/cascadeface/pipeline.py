"""Stage-wise training of the whole cascade on a toy corpus."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .cascade import CascadeConfig
from .dataset import AnnotatedImage, harvest_corpus, harvest_hard_examples
from .networks import INPUT_SIZES, Network, build_network
from .training import LossWeights, SampleSet, TrainResult, init_regression_biases, train_stage

log = logging.getLogger(__name__)

STAGE_OF = {"pnet": 1, "rnet": 2, "onet": 3}


@dataclass
class StageSettings:
    epochs: int = 10
    lr: float = 0.006
    # random crops harvested per training image
    counts: dict = field(default_factory=lambda: {"negative": 24, "positive": 8,
                                                  "part": 8, "landmark": 8})
    # cap on hard negatives mined per image from the cascade prefix
    hard_negatives: int | None = 20
    batches_per_epoch: int | None = None


def default_stage_settings() -> dict[str, StageSettings]:
    return {
        "pnet": StageSettings(epochs=8),
        "rnet": StageSettings(epochs=10, counts={"negative": 8, "positive": 6, "part": 6,
                                                 "landmark": 6}),
        "onet": StageSettings(epochs=14, counts={"negative": 4, "positive": 4, "part": 4,
                                                 "landmark": 6}),
    }


def stage_samples(kind: str, corpus: Sequence[AnnotatedImage], settings: StageSettings,
                  prefix: dict[str, Network] | None = None, config: CascadeConfig | None = None,
                  seed: int = 0) -> SampleSet:
    """Training samples for one stage.

    P-Net learns from random crops only. R-Net and O-Net add the candidates
    that the already trained cascade prefix produces on the same images.
    """
    size = INPUT_SIZES[kind]
    crops = harvest_corpus(corpus, settings.counts, size, seed=seed)
    if kind == "pnet":
        return crops
    hard = harvest_hard_examples(STAGE_OF[kind], prefix or {}, corpus, config,
                                 max_negatives_per_image=settings.hard_negatives, seed=seed + 1)
    return SampleSet.concat([crops, hard])


def train_one(kind: str, train: SampleSet, val: SampleSet, settings: StageSettings,
              seed: int = 0, ohem: bool = True, landmark: bool = True, **weight_overrides) -> TrainResult:
    overrides = {"lr": settings.lr}
    if not landmark:
        overrides["alpha_landmark"] = 0.0
    overrides.update(weight_overrides)
    weights = LossWeights.for_stage(kind, **overrides)
    net = build_network(kind, seed=seed)
    init_regression_biases(net, train)
    return train_stage(net, train, weights, settings.epochs, seed=seed, val=val, ohem=ohem,
                       batches_per_epoch=settings.batches_per_epoch)


def train_single(kind: str, train_corpus: Sequence[AnnotatedImage],
                 val_corpus: Sequence[AnnotatedImage], prefix: dict[str, Network],
                 settings: StageSettings, config: CascadeConfig | None = None, seed: int = 0,
                 **train_kwargs) -> TrainResult:
    """Harvest and train one stage; seeds depend only on ``seed`` and the stage."""
    i = STAGE_OF[kind] - 1
    tr = stage_samples(kind, train_corpus, settings, prefix, config, seed=seed + 10 * i)
    va = (stage_samples(kind, val_corpus, settings, prefix, config, seed=seed + 10 * i + 5)
          if len(val_corpus) else None)
    log.info("%s samples: train %s, val %s", kind, tr.counts(), va.counts() if va else {})
    return train_one(kind, tr, va, settings, seed=seed + i, **train_kwargs)


def train_cascade(train_corpus: Sequence[AnnotatedImage], val_corpus: Sequence[AnnotatedImage],
                  seed: int = 0, settings: dict[str, StageSettings] | None = None,
                  config: CascadeConfig | None = None) -> tuple[dict[str, Network], dict[str, TrainResult]]:
    """Train P-Net, then R-Net on P-Net output, then O-Net on P-Net + R-Net output."""
    settings = settings or default_stage_settings()
    config = config or CascadeConfig()
    nets: dict[str, Network] = {}
    results: dict[str, TrainResult] = {}
    for kind in ("pnet", "rnet", "onet"):
        results[kind] = train_single(kind, train_corpus, val_corpus, nets, settings[kind], config, seed)
        nets[kind] = results[kind].net
    return nets, results


def settings_dict(settings: dict[str, StageSettings]) -> dict:
    return {k: asdict(v) for k, v in settings.items()}
