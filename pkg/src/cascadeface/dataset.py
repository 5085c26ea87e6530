"""Toy face corpus, IoU-based sample categories and training-sample harvesting."""

from __future__ import annotations

import enum
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import (Box, crop_batch, encode_box_targets, iou_matrix, resize_image,
                       to_square_batch)
from .imageio import annotation_record, load_annotations, load_image, save_annotations, save_image
from .training import SampleSet, SampleType

log = logging.getLogger(__name__)

NEGATIVE_MAX = 0.3
PART_MIN = 0.4
POSITIVE_MIN = 0.65

# landmark layout in face-box units: left eye, right eye, nose, mouth corners
LANDMARK_LAYOUT = np.array([
    [0.30, 0.38],
    [0.70, 0.38],
    [0.50, 0.58],
    [0.34, 0.76],
    [0.66, 0.76],
])
FACE_ASPECT = 1.2


class SampleCategory(enum.Enum):
    NEGATIVE = "negative"
    POSITIVE = "positive"
    PART = "part"
    LANDMARK = "landmark"
    DISCARD = "discard"


class UntrainedNetworkError(RuntimeError):
    pass


@dataclass
class AnnotatedImage:
    image: np.ndarray
    boxes: list[Box]
    landmarks: list[np.ndarray | None]
    name: str = ""
    # toy generator bookkeeping: the primitives drawn for each face
    faces: list[dict] = field(default_factory=list)

    @property
    def box_array(self) -> np.ndarray:
        if not self.boxes:
            return np.zeros((0, 4))
        return np.array([b.coords for b in self.boxes])


def category_for_iou(m: float) -> SampleCategory:
    if m < NEGATIVE_MAX:
        return SampleCategory.NEGATIVE
    if m < PART_MIN:
        return SampleCategory.DISCARD
    if m <= POSITIVE_MIN:
        return SampleCategory.PART
    return SampleCategory.POSITIVE


def classify_sample(crop: Box, ground_truths: Sequence[Box]) -> SampleCategory:
    if not ground_truths:
        return SampleCategory.NEGATIVE
    gts = np.array([g.coords for g in ground_truths])
    return category_for_iou(float(iou_matrix(np.array([crop.coords]), gts).max()))


def _category_codes(max_iou: np.ndarray) -> np.ndarray:
    """Vectorized categories: 0 negative, 1 positive, 2 part, -1 discard."""
    codes = np.full(max_iou.shape, -1, dtype=np.int64)
    codes[max_iou < NEGATIVE_MAX] = SampleType.NEGATIVE
    codes[(max_iou >= PART_MIN) & (max_iou <= POSITIVE_MIN)] = SampleType.PART
    codes[max_iou > POSITIVE_MIN] = SampleType.POSITIVE
    return codes


# ---------------------------------------------------------------------------
# toy corpus

def _smooth_noise(rng, h, w, cells, amplitude):
    grid = rng.uniform(-amplitude, amplitude, size=(cells, cells, 3)).astype(np.float32)
    return resize_image(grid, h, w)


def _paint(canvas, coverage, color):
    a = coverage[..., None]
    canvas *= 1 - a
    canvas += a * np.asarray(color, dtype=np.float32)


def _disc_coverage(yy, xx, cx, cy, r):
    d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    return np.clip(r + 0.5 - d, 0.0, 1.0).astype(np.float32)


def _ellipse_coverage(yy, xx, cx, cy, a, b):
    rn = np.sqrt(((xx - cx) / a) ** 2 + ((yy - cy) / b) ** 2)
    return np.clip((1 - rn) * min(a, b) + 0.5, 0.0, 1.0).astype(np.float32)


def _draw_distractor(canvas, yy, xx, rng, h, w):
    kind = rng.choice(["rect", "disc", "line", "blob"], p=[0.35, 0.3, 0.2, 0.15])
    color = rng.uniform(0, 255, size=3)
    if kind == "rect":
        x0, y0 = rng.uniform(-10, w), rng.uniform(-10, h)
        rw, rh = rng.uniform(6, 50, size=2)
        cov = ((xx + 0.5 >= x0) & (xx + 0.5 < x0 + rw) & (yy + 0.5 >= y0) & (yy + 0.5 < y0 + rh))
        _paint(canvas, cov.astype(np.float32), color)
    elif kind == "disc":
        _paint(canvas, _disc_coverage(yy, xx, rng.uniform(0, w), rng.uniform(0, h),
                                      rng.uniform(3, 22)), color)
    elif kind == "line":
        x0, y0, x1, y1 = rng.uniform(0, w), rng.uniform(0, h), rng.uniform(0, w), rng.uniform(0, h)
        dx, dy = x1 - x0, y1 - y0
        length = max(np.hypot(dx, dy), 1e-6)
        t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / length ** 2, 0, 1)
        d = np.hypot(xx - (x0 + t * dx), yy - (y0 + t * dy))
        _paint(canvas, np.clip(rng.uniform(1, 3) + 0.5 - d, 0, 1).astype(np.float32), color)
    else:
        # featureless face-coloured ellipse: a hard negative for the later stages
        a = rng.uniform(8, 30)
        skin = rng.uniform([190, 150, 120], [245, 205, 175])
        _paint(canvas, _ellipse_coverage(yy, xx, rng.uniform(0, w), rng.uniform(0, h),
                                         a, a * rng.uniform(0.8, 1.4)), skin)


def _draw_face(canvas, yy, xx, rng, box):
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    skin = rng.uniform([190, 150, 120], [245, 205, 175])
    _paint(canvas, _ellipse_coverage(yy, xx, cx, cy, w / 2, h / 2), skin)
    shift = rng.uniform(-0.04, 0.04, size=2)
    spread = rng.uniform(0.9, 1.1)
    layout = (LANDMARK_LAYOUT - [0.5, 0.5]) * [spread, 1.0] + [0.5, 0.5] + shift
    layout = layout + rng.uniform(-0.025, 0.025, size=(5, 2))
    points = np.stack([x1 + layout[:, 0] * w, y1 + layout[:, 1] * h], axis=1)
    radius = max(1.0, 0.06 * w)
    colors = [rng.uniform(10, 60, size=3)] * 2 + [rng.uniform([110, 60, 40], [160, 100, 70])] \
        + [rng.uniform([120, 20, 20], [170, 50, 50])] * 2
    radii = [radius, radius, 0.8 * radius, 0.8 * radius, 0.8 * radius]
    for (px, py), r, col in zip(points, radii, colors):
        _paint(canvas, _disc_coverage(yy, xx, px, py, r), col)
    return points, {"ellipse": (cx, cy, w / 2, h / 2),
                    "dots": [(float(px), float(py), float(r)) for (px, py), r in zip(points, radii)]}


def _place_faces(rng, h, w, count, min_side, max_side):
    boxes = []
    for _ in range(count * 30):
        if len(boxes) == count:
            break
        side = float(np.exp(rng.uniform(np.log(min_side), np.log(max_side))))
        fh = side * FACE_ASPECT
        if side > w - 2 or fh > h - 2:
            continue
        x1 = rng.uniform(1, w - 1 - side)
        y1 = rng.uniform(1, h - 1 - fh)
        cand = (x1, y1, x1 + side, y1 + fh)
        margin = 2.0
        if all(cand[2] + margin <= b[0] or b[2] + margin <= cand[0] or
               cand[3] + margin <= b[1] or b[3] + margin <= cand[1] for b in boxes):
            boxes.append(cand)
    return boxes


def generate_toy_image(rng: np.random.Generator, height: int = 128, width: int = 128,
                       min_face: float = 20.0, max_face: float = 80.0,
                       max_faces: int = 3, name: str = "") -> AnnotatedImage:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float32)
    yy += 0.5
    xx += 0.5
    base = rng.uniform(50, 190, size=3).astype(np.float32)
    canvas = base + _smooth_noise(rng, height, width, int(rng.integers(3, 9)), 45.0)
    canvas += rng.normal(0, rng.uniform(2, 10), size=canvas.shape).astype(np.float32)
    for _ in range(int(rng.integers(1, 6))):
        _draw_distractor(canvas, yy, xx, rng, height, width)
    placed = _place_faces(rng, height, width, int(rng.integers(0, max_faces + 1)), min_face, max_face)
    boxes, landmarks, faces = [], [], []
    for b in placed:
        points, info = _draw_face(canvas, yy, xx, rng, b)
        boxes.append(Box(*b))
        landmarks.append(points)
        faces.append(info)
    image = np.clip(np.rint(canvas), 0, 255).astype(np.uint8)
    return AnnotatedImage(image, boxes, landmarks, name, faces)


def generate_toy_corpus(n_images: int, size: int | tuple[int, int] = 128, seed: int = 0,
                        min_face: float = 20.0, max_face: float = 80.0,
                        start: int = 0) -> list[AnnotatedImage]:
    """Procedural images with 0-3 faces each; image ``i`` is seeded by ``(seed, i)``.

    Faces are light ellipses with two dark eye dots, a nose dot and two
    mouth-corner dots. Face widths are log-uniform in ``[min_face, max_face]``.
    """
    if n_images < 1:
        raise ValueError("n_images must be at least 1")
    h, w = (size, size) if isinstance(size, int) else size
    return [generate_toy_image(np.random.default_rng((seed, i)), h, w, min_face, max_face,
                               name=f"img{i:05d}.ppm")
            for i in range(start, start + n_images)]


def save_corpus(corpus: Sequence[AnnotatedImage], out_dir: str | Path,
                splits: dict[str, Sequence[int]] | None = None, meta: dict | None = None) -> None:
    """Write PPM images, ``annotations.jsonl`` and a ``manifest.json`` of split membership."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for item in corpus:
        save_image(out / "images" / item.name, item.image)
        records.append(annotation_record(item.name, item.boxes, item.landmarks))
    save_annotations(out / "annotations.jsonl", records)
    if splits is None:
        splits = {"train": range(len(corpus))}
    manifest = {"splits": {k: [corpus[i].name for i in v] for k, v in splits.items()}}
    if meta:
        manifest["meta"] = meta
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_corpus(corpus_dir: str | Path, split: str | None = None) -> list[AnnotatedImage]:
    root = Path(corpus_dir)
    records = load_annotations(root / "annotations.jsonl")
    if split is not None:
        manifest = json.loads((root / "manifest.json").read_text())
        wanted = set(manifest["splits"][split])
        records = [r for r in records if r["image"] in wanted]
    return [AnnotatedImage(load_image(root / "images" / r["image"]), r["boxes"], r["landmarks"],
                           r["image"]) for r in records]


def default_splits(n: int, val: float = 0.1, test: float = 0.1) -> dict[str, list[int]]:
    n_test = int(round(n * test))
    n_val = int(round(n * val))
    n_train = n - n_val - n_test
    return {"train": list(range(n_train)), "val": list(range(n_train, n_train + n_val)),
            "test": list(range(n_train + n_val, n))}


# ---------------------------------------------------------------------------
# harvesting

def _samples_from_crops(image, crops, codes, gts, size, landmark_sets=None, best=None):
    n = len(crops)
    patches = crop_batch(image, crops, size)
    y_det = (codes == SampleType.POSITIVE).astype(np.float64)
    y_box = np.zeros((n, 4))
    y_lm = np.zeros((n, 10))
    boxed = (codes == SampleType.POSITIVE) | (codes == SampleType.PART)
    if boxed.any():
        y_box[boxed] = encode_box_targets(crops[boxed], gts[best[boxed]])
    lm = codes == SampleType.LANDMARK
    if lm.any():
        pts = np.stack([landmark_sets[i] for i in best[lm]])
        c = crops[lm]
        wh = np.stack([c[:, 2] - c[:, 0], c[:, 3] - c[:, 1]], axis=1)[:, None, :]
        y_lm[lm] = ((pts - c[:, None, :2]) / wh).reshape(-1, 10)
    return SampleSet(patches, codes.astype(np.int8), y_det, y_box, y_lm, np.asarray(crops, np.float64))


def _random_crops(rng, n, h, w, min_side=12.0):
    side = np.exp(rng.uniform(np.log(min_side), np.log(max(min_side + 1, min(h, w) / 1.5)), n))
    x1 = rng.uniform(-0.1 * side, w - 0.9 * side)
    y1 = rng.uniform(-0.1 * side, h - 0.9 * side)
    return np.stack([x1, y1, x1 + side, y1 + side], axis=1)


def _jittered_crops(rng, gts, n, shift, scale_lo, scale_hi, squared=False):
    # ``squared`` sizes crops like to_square(gt), the crop the cascade feeds O-Net
    which = rng.integers(0, len(gts), n)
    g = gts[which]
    gw, gh = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    base = np.maximum(gw, gh) if squared else np.sqrt(gw * gh)
    side = base * rng.uniform(scale_lo, scale_hi, n)
    cx = (g[:, 0] + g[:, 2]) / 2 + rng.uniform(-shift, shift, n) * gw
    cy = (g[:, 1] + g[:, 3]) / 2 + rng.uniform(-shift, shift, n) * gh
    return np.stack([cx - side / 2, cy - side / 2, cx + side / 2, cy + side / 2], axis=1), which


def _take(rng, crops, codes, best, code, quota):
    idx = np.flatnonzero(codes == code)
    if len(idx) > quota:
        idx = np.sort(rng.choice(idx, quota, replace=False))
    return crops[idx], np.full(len(idx), code), best[idx]


def harvest_crops(annotated: AnnotatedImage, counts: dict[str, int], size: int,
                  seed: int | Sequence[int] = 0, attempts: int = 40) -> SampleSet:
    """Random square crops of one image, labelled by IoU category.

    ``counts`` maps ``negative``/``positive``/``part``/``landmark`` to the
    number of samples wanted. Negatives come from crops anywhere in the image
    and from crops shifted off the faces; positives and parts from crops
    jittered around a ground-truth face; landmark samples from tight jitter
    around faces with landmarks. Quotas that cannot be met within
    ``attempts`` tries per wanted sample are returned short with a warning.
    """
    rng = np.random.default_rng(seed)
    image = annotated.image
    h, w = image.shape[:2]
    gts = annotated.box_array
    parts = []

    def classify(crops):
        if len(gts) == 0:
            return np.zeros(len(crops), np.int64), np.zeros(len(crops), np.int64)
        m = iou_matrix(crops, gts)
        return _category_codes(m.max(axis=1)), m.argmax(axis=1)

    want_neg = counts.get("negative", 0)
    if want_neg:
        crops = _random_crops(rng, want_neg * attempts, h, w)
        if len(gts):
            near, _ = _jittered_crops(rng, gts, want_neg * attempts // 2, 0.9, 0.6, 1.6)
            crops = np.concatenate([crops, near])
        codes, best = classify(crops)
        parts.append(_take(rng, crops, codes, best, SampleType.NEGATIVE, want_neg))

    want_pos, want_part = counts.get("positive", 0), counts.get("part", 0)
    if (want_pos or want_part) and len(gts):
        crops, _ = _jittered_crops(rng, gts, (want_pos + want_part) * attempts, 0.25, 0.8, 1.25)
        codes, best = classify(crops)
        if want_pos:
            parts.append(_take(rng, crops, codes, best, SampleType.POSITIVE, want_pos))
        if want_part:
            parts.append(_take(rng, crops, codes, best, SampleType.PART, want_part))

    want_lm = counts.get("landmark", 0)
    lm_faces = np.array([i for i, lm in enumerate(annotated.landmarks) if lm is not None], dtype=int)
    if want_lm and len(lm_faces):
        crops, which = _jittered_crops(rng, gts[lm_faces], want_lm * attempts, 0.1, 0.88, 1.12,
                                       squared=True)
        which = lm_faces[which]
        own = iou_matrix(crops, gts)[np.arange(len(crops)), which]
        codes = np.where(own > POSITIVE_MIN, SampleType.LANDMARK, -1)
        parts.append(_take(rng, crops, codes, which, SampleType.LANDMARK, want_lm))

    got = {"negative": 0, "positive": 0, "part": 0, "landmark": 0}
    for _, c, _ in parts:
        if len(c):
            got[SampleType(int(c[0])).name.lower()] += len(c)
    short = {k: (counts.get(k, 0), got[k]) for k in got if got[k] < counts.get(k, 0)}
    if short and len(gts):
        warnings.warn(f"{annotated.name}: quota not reached (wanted, got): {short}", stacklevel=2)

    if not parts:
        return SampleSet.empty(size)
    crops = np.concatenate([p[0] for p in parts])
    codes = np.concatenate([p[1] for p in parts])
    best = np.concatenate([p[2] for p in parts])
    if len(crops) == 0:
        return SampleSet.empty(size)
    return _samples_from_crops(image, crops, codes, gts if len(gts) else np.zeros((1, 4)), size,
                               annotated.landmarks, best)


def harvest_corpus(corpus: Sequence[AnnotatedImage], counts: dict[str, int], size: int,
                   seed: int = 0) -> SampleSet:
    """:func:`harvest_crops` over a corpus; image ``i`` draws from its own ``(seed, i)`` stream."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sets = [harvest_crops(item, counts, size, seed=(seed, i)) for i, item in enumerate(corpus)]
    return SampleSet.concat(sets)


def harvest_hard_examples(stage: int, nets: dict, corpus: Sequence[AnnotatedImage], config=None,
                          max_negatives_per_image: int | None = None, seed: int = 0) -> SampleSet:
    """Candidates from the trained cascade prefix, labelled against ground truth.

    Stage 2 samples (24 px, for R-Net) come from P-Net proposals; stage 3
    samples (48 px, for O-Net) from P-Net followed by R-Net. Candidates in
    the discard band are dropped. ``max_negatives_per_image`` subsamples the
    negatives of each image.
    """
    from .cascade import CascadeConfig, stage1_propose, stage2_refine

    if stage not in (2, 3):
        raise ValueError(f"hard examples are collected for stage 2 or 3, not {stage}")
    prefix = ["pnet"] if stage == 2 else ["pnet", "rnet"]
    for kind in prefix:
        net = nets.get(kind)
        if net is None or not getattr(net, "trained", False):
            raise UntrainedNetworkError(f"stage {stage} hard examples need a trained {kind}")
    config = config or CascadeConfig()
    size = 24 if stage == 2 else 48
    sets = []
    for i, item in enumerate(corpus):
        rng = np.random.default_rng((seed, i))
        cands = stage1_propose(item.image, nets["pnet"], config)
        if stage == 3:
            cands = stage2_refine(item.image, cands, nets["rnet"], config)
        if not cands:
            continue
        crops = to_square_batch(np.array([b.coords for b in cands]))
        gts = item.box_array
        if len(gts):
            m = iou_matrix(crops, gts)
            codes, best = _category_codes(m.max(axis=1)), m.argmax(axis=1)
        else:
            codes, best = np.zeros(len(crops), np.int64), np.zeros(len(crops), np.int64)
        keep = codes >= 0
        if max_negatives_per_image is not None:
            neg = np.flatnonzero(codes == SampleType.NEGATIVE)
            if len(neg) > max_negatives_per_image:
                drop = rng.choice(neg, len(neg) - max_negatives_per_image, replace=False)
                keep[drop] = False
        if not keep.any():
            continue
        sets.append(_samples_from_crops(item.image, crops[keep], codes[keep],
                                        gts if len(gts) else np.zeros((1, 4)), size,
                                        item.landmarks, best[keep]))
    return SampleSet.concat(sets) if sets else SampleSet.empty(size)
