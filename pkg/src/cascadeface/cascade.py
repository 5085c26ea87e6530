"""Three-stage detection: image pyramid, dense P-Net proposals, R-Net and O-Net refinement."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import (Box, apply_box_regressions, crop_batch, decode_landmarks_batch,
                       nms_indices, normalize_pixels, resize_image, to_square_batch, valid_boxes)
from .networks import Network, forward_fcn_pnet

Detection = Box


@dataclass
class CascadeConfig:
    min_face: float = 20.0
    factor: float = 0.709
    t1: float = 0.6
    t2: float = 0.7
    t3: float = 0.7
    n1_intra: float = 0.5
    n1_inter: float = 0.7
    n2: float = 0.7
    n3: float = 0.7

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError(f"pyramid factor must lie in (0, 1), got {self.factor}")
        if self.min_face < 12:
            raise ValueError(f"min_face must be at least 12, got {self.min_face}")
        for name in ("t1", "t2", "t3"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        for name in ("n1_intra", "n1_inter", "n2", "n3"):
            if not 0 < getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CascadeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown cascade config keys: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    @classmethod
    def load(cls, path: str | Path) -> "CascadeConfig":
        """Read a flat JSON config; loss-weight keys are ignored here."""
        d = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        return cls.from_dict({k: v for k, v in d.items() if k in known})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def build_pyramid(height: int, width: int, config: CascadeConfig) -> list[float]:
    """Scales ``12/min_face * factor**k`` while the short side stays >= 12 px."""
    short = min(height, width)
    if short < config.min_face:
        return []
    scales = []
    s = 12.0 / config.min_face
    while short * s >= 12:
        scales.append(s)
        s *= config.factor
    return scales


def _boxes(coords, scores, landmarks=None) -> list[Box]:
    out = []
    for i in range(len(scores)):
        lm = None if landmarks is None else tuple(map(tuple, landmarks[i].tolist()))
        out.append(Box(*map(float, coords[i]), score=float(np.clip(scores[i], 0, 1)), landmarks=lm))
    return out


def _arrays(boxes: Sequence[Box]) -> tuple[np.ndarray, np.ndarray]:
    if not boxes:
        return np.zeros((0, 4)), np.zeros(0)
    return (np.array([b.coords for b in boxes], dtype=np.float64),
            np.array([b.score if b.score is not None else 1.0 for b in boxes]))


def _inside(coords: np.ndarray, shape) -> np.ndarray:
    h, w = shape[:2]
    return (coords[:, 2] > 0) & (coords[:, 3] > 0) & (coords[:, 0] < w) & (coords[:, 1] < h)


def scan_scale(image: np.ndarray, pnet: Network, scale: float, threshold: float):
    """Calibrated candidate windows at one pyramid scale, before any NMS."""
    h, w = image.shape[:2]
    hs, ws = int(math.ceil(h * scale)), int(math.ceil(w * scale))
    scaled = normalize_pixels(resize_image(image, hs, ws)).transpose(2, 0, 1)
    maps = forward_fcn_pnet(pnet, scaled)
    if maps is None:
        return np.zeros((0, 4)), np.zeros(0)
    prob = maps.prob[1]
    rows, cols = np.nonzero(prob >= threshold)
    scores = prob[rows, cols].astype(np.float64)
    cells = np.stack([2 * cols, 2 * rows, 2 * cols + 12, 2 * rows + 12], axis=1) / scale
    reg = maps.box[:, rows, cols].T
    coords = apply_box_regressions(cells, reg)
    ok = valid_boxes(coords)
    return coords[ok], scores[ok]


def stage1_propose(image: np.ndarray, pnet: Network, config: CascadeConfig) -> list[Box]:
    per_scale = []
    for scale in build_pyramid(image.shape[0], image.shape[1], config):
        coords, scores = scan_scale(image, pnet, scale, config.t1)
        keep = nms_indices(coords, scores, config.n1_intra)
        per_scale.append((coords[keep], scores[keep]))
    if not per_scale:
        return []
    coords = np.concatenate([c for c, _ in per_scale])
    scores = np.concatenate([s for _, s in per_scale])
    keep = nms_indices(coords, scores, config.n1_inter)
    coords, scores = to_square_batch(coords[keep]), scores[keep]
    ok = _inside(coords, image.shape)
    return _boxes(coords[ok], scores[ok])


def _refine(image, boxes, net, threshold, nms_threshold):
    coords, _ = _arrays(boxes)
    if len(coords) == 0:
        return None
    out = net.forward(crop_batch(image, coords, net.input_size))
    p = out.face_prob.astype(np.float64)
    keep = p >= threshold
    crops = coords[keep]
    calibrated = apply_box_regressions(crops, out.box[keep])
    ok = valid_boxes(calibrated)
    crops, calibrated, p = crops[ok], calibrated[ok], p[keep][ok]
    lm = out.landmark[keep][ok]
    order = nms_indices(calibrated, p, nms_threshold)
    return crops[order], calibrated[order], p[order], lm[order]


def stage2_refine(image: np.ndarray, proposals: Sequence[Box], rnet: Network,
                  config: CascadeConfig) -> list[Box]:
    res = _refine(image, proposals, rnet, config.t2, config.n2)
    if res is None:
        return []
    _, calibrated, p, _ = res
    squared = to_square_batch(calibrated)
    ok = _inside(squared, image.shape)
    return _boxes(squared[ok], p[ok])


def stage3_output(image: np.ndarray, candidates: Sequence[Box], onet: Network,
                  config: CascadeConfig) -> list[Detection]:
    """Final boxes with five landmarks each.

    Landmarks are decoded against the square crop O-Net actually saw, not
    the regressed box.
    """
    res = _refine(image, candidates, onet, config.t3, config.n3)
    if res is None:
        return []
    crops, calibrated, p, lm = res
    points = decode_landmarks_batch(crops, lm)
    return _boxes(calibrated, p, points)


def detect(image: np.ndarray, nets: dict[str, Network] | Sequence[Network],
           config: CascadeConfig | None = None) -> list[Detection]:
    """Full cascade on one ``H x W x 3`` image, detections by descending score."""
    config = config or CascadeConfig()
    if isinstance(nets, dict):
        pnet, rnet, onet = nets["pnet"], nets["rnet"], nets["onet"]
    else:
        pnet, rnet, onet = nets
    proposals = stage1_propose(image, pnet, config)
    refined = stage2_refine(image, proposals, rnet, config)
    dets = stage3_output(image, refined, onet, config)
    return sorted(dets, key=lambda b: -b.score)


def detections_to_json(detections: Sequence[Detection]) -> list[dict]:
    return [{"box": [float(v) for v in d.coords], "score": float(d.score),
             "landmarks": [[float(x), float(y)] for x, y in d.landmarks]} for d in detections]
