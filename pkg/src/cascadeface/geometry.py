"""Box arithmetic shared by sample harvesting and the detection cascade.

Coordinates are continuous; pixel ``(i, j)`` covers ``[j, j+1) x [i, i+1)``,
so a box's area is simply ``(x2 - x1) * (y2 - y1)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

PIXEL_MEAN = 127.5
PIXEL_SCALE = 128.0


class InvalidBoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    score: float | None = None
    regression: tuple[float, float, float, float] | None = None
    landmarks: tuple[tuple[float, float], ...] | None = None

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise InvalidBoxError(f"degenerate box {self.coords}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise InvalidBoxError(f"score {self.score} outside [0, 1]")
        if self.landmarks is not None and len(self.landmarks) != 5:
            raise InvalidBoxError(f"expected 5 landmarks, got {len(self.landmarks)}")

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` coordinate arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def nms_indices(coords: np.ndarray, scores: np.ndarray, threshold: float) -> np.ndarray:
    """Greedy NMS on arrays; returns kept indices by descending score.

    Equal scores keep input order (stable sort). A box is suppressed when its
    IoU with an already kept box is strictly above ``threshold``.
    """
    scores = np.asarray(scores)
    if scores.size == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    coords = np.asarray(coords, dtype=np.float64)[order]
    overlaps = iou_matrix(coords, coords)
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        alive[i + 1:] &= overlaps[i, i + 1:] <= threshold
    return np.asarray(keep, dtype=np.int64)


def nms(boxes: Sequence[Box], iou_threshold: float) -> list[Box]:
    if not boxes:
        return []
    if any(b.score is None for b in boxes):
        raise ValueError("nms needs scored boxes")
    coords = np.array([b.coords for b in boxes])
    scores = np.array([b.score for b in boxes])
    return [boxes[i] for i in nms_indices(coords, scores, iou_threshold)]


def encode_box_target(candidate: Box, ground_truth: Box) -> np.ndarray:
    """Offsets of the true box relative to the candidate.

    ``(dx1 / w, dy1 / h, log(w_gt / w), log(h_gt / h))`` with ``w, h`` the
    candidate's size: left-top shift in candidate units plus log size ratios.
    """
    return encode_box_targets(np.array([candidate.coords]), np.array([ground_truth.coords]))[0]


def encode_box_targets(candidates: np.ndarray, truths: np.ndarray) -> np.ndarray:
    c = np.asarray(candidates, dtype=np.float64)
    g = np.asarray(truths, dtype=np.float64)
    wc, hc = c[:, 2] - c[:, 0], c[:, 3] - c[:, 1]
    wg, hg = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    return np.stack([(g[:, 0] - c[:, 0]) / wc, (g[:, 1] - c[:, 1]) / hc,
                     np.log(wg / wc), np.log(hg / hc)], axis=1)


def apply_box_regressions(coords: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Vectorized inverse of :func:`encode_box_targets`."""
    c = np.asarray(coords, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    wc, hc = c[:, 2] - c[:, 0], c[:, 3] - c[:, 1]
    x1 = c[:, 0] + t[:, 0] * wc
    y1 = c[:, 1] + t[:, 1] * hc
    with np.errstate(over="ignore"):
        w = wc * np.exp(t[:, 2])
        h = hc * np.exp(t[:, 3])
    return np.stack([x1, y1, x1 + w, y1 + h], axis=1)


def valid_boxes(coords: np.ndarray) -> np.ndarray:
    """Mask of rows with finite coordinates and positive width and height."""
    c = np.asarray(coords)
    ok = np.all(np.isfinite(c), axis=1)
    return ok & (c[:, 2] > c[:, 0]) & (c[:, 3] > c[:, 1])


def apply_box_regression(candidate: Box, t: Sequence[float]) -> Box:
    """Calibrate ``candidate`` by regression offsets ``t``.

    Raises :class:`InvalidBoxError` when the result is not a usable box
    (overflowing size ratios); callers drop such candidates.
    """
    out = apply_box_regressions(np.array([candidate.coords]), np.array([t]))[0]
    if not valid_boxes(out[None])[0]:
        raise InvalidBoxError(f"regression {tuple(t)} produced invalid box {tuple(out)}")
    return replace(candidate, x1=float(out[0]), y1=float(out[1]),
                   x2=float(out[2]), y2=float(out[3]))


def encode_landmark_target(crop: Box, points: Sequence[Sequence[float]]) -> np.ndarray:
    """Landmarks as ``(x0, y0, x1, y1, ...)`` in crop-relative units."""
    p = np.asarray(points, dtype=np.float64).reshape(5, 2)
    out = np.empty((5, 2))
    out[:, 0] = (p[:, 0] - crop.x1) / crop.width
    out[:, 1] = (p[:, 1] - crop.y1) / crop.height
    return out.reshape(10)


def decode_landmarks(crop: Box, target: Sequence[float]) -> np.ndarray:
    return decode_landmarks_batch(np.array([crop.coords]), np.asarray(target)[None])[0]


def decode_landmarks_batch(crops: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """``(n, 4)`` crops and ``(n, 10)`` targets to ``(n, 5, 2)`` image points."""
    c = np.asarray(crops, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 5, 2)
    w = (c[:, 2] - c[:, 0])[:, None]
    h = (c[:, 3] - c[:, 1])[:, None]
    return np.stack([c[:, 0, None] + t[:, :, 0] * w, c[:, 1, None] + t[:, :, 1] * h], axis=2)


def to_square(box: Box) -> Box:
    side = max(box.width, box.height)
    cx, cy = box.center
    return replace(box, x1=cx - side / 2, y1=cy - side / 2, x2=cx + side / 2, y2=cy + side / 2)


def to_square_batch(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.float64)
    side = np.maximum(c[:, 2] - c[:, 0], c[:, 3] - c[:, 1])
    cx = (c[:, 0] + c[:, 2]) / 2
    cy = (c[:, 1] + c[:, 3]) / 2
    return np.stack([cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2], axis=1)


def normalize_pixels(values: np.ndarray) -> np.ndarray:
    return ((np.asarray(values, dtype=np.float32) - PIXEL_MEAN) / PIXEL_SCALE).astype(np.float32)


def _bilinear_taps(lo: np.ndarray, size: np.ndarray, out: int, limit: int):
    # source coordinates of output pixel centers, pixel-center convention
    pos = lo[:, None] + (np.arange(out) + 0.5)[None, :] * (size[:, None] / out) - 0.5
    i0 = np.floor(pos).astype(np.int64)
    frac = pos - i0
    i1 = i0 + 1
    v0 = (i0 >= 0) & (i0 < limit)
    v1 = (i1 >= 0) & (i1 < limit)
    return np.clip(i0, 0, limit - 1), np.clip(i1, 0, limit - 1), frac, v0, v1


def crop_batch(image: np.ndarray, coords: np.ndarray, out_size: int) -> np.ndarray:
    """Sample ``(n, 4)`` boxes from an ``H x W x 3`` image into ``(n, 3, S, S)``.

    Bilinear resampling; pixels outside the image read as 0 before
    normalization, so padded regions equal ``normalize_pixels(0)``.
    """
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[:2]
    c = np.asarray(coords, dtype=np.float64).reshape(-1, 4)
    if len(c) == 0:
        return np.zeros((0, 3, out_size, out_size), np.float32)
    y0, y1, fy, vy0, vy1 = _bilinear_taps(c[:, 1], c[:, 3] - c[:, 1], out_size, h)
    x0, x1, fx, vx0, vx1 = _bilinear_taps(c[:, 0], c[:, 2] - c[:, 0], out_size, w)

    def gather(yi, xi, vy, vx):
        vals = img[yi[:, :, None], xi[:, None, :]]
        mask = (vy[:, :, None] & vx[:, None, :])[..., None]
        return np.where(mask, vals, 0.0)

    fy = fy[:, :, None, None].astype(np.float32)
    fx = fx[:, None, :, None].astype(np.float32)
    top = gather(y0, x0, vy0, vx0) * (1 - fx) + gather(y0, x1, vy0, vx1) * fx
    bot = gather(y1, x0, vy1, vx0) * (1 - fx) + gather(y1, x1, vy1, vx1) * fx
    out = top * (1 - fy) + bot * fy
    return normalize_pixels(out).transpose(0, 3, 1, 2).copy()


def crop_with_padding(image: np.ndarray, box: Box, out_size: int) -> np.ndarray:
    """One normalized ``3 x S x S`` network input cut from ``box``."""
    if out_size not in (12, 24, 48):
        raise ValueError(f"out_size must be 12, 24 or 48, got {out_size}")
    h, w = image.shape[:2]
    if box.x2 <= 0 or box.y2 <= 0 or box.x1 >= w or box.y1 >= h:
        raise InvalidBoxError(f"box {box.coords} lies entirely outside the {w}x{h} image")
    return crop_batch(image, np.array([box.coords]), out_size)[0]


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a whole ``H x W x 3`` image, returned as float32 pixels."""
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[:2]
    y0, y1, fy, _, _ = _bilinear_taps(np.zeros(1), np.array([float(h)]), height, h)
    x0, x1, fx, _, _ = _bilinear_taps(np.zeros(1), np.array([float(w)]), width, w)
    # edge taps clamp to the border instead of reading zeros
    y0, y1, fy = y0[0], y1[0], fy[0].astype(np.float32)[:, None, None]
    x0, x1, fx = x0[0], x1[0], fx[0].astype(np.float32)[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy
