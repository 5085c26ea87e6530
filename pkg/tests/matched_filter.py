"""Brute-force sliding-window matched filter for toy faces (a detector-free oracle)."""

import numpy as np
from scipy.signal import fftconvolve

from cascadeface.dataset import FACE_ASPECT, LANDMARK_LAYOUT
from cascadeface.geometry import iou_matrix, nms_indices


def face_template(width):
    """Grey-level face template of the given width and its support mask.

    Inside the ellipse the skin reads 1 and the five dots 0; the image
    outside the ellipse is ignored.
    """
    w = int(round(width))
    h = int(round(width * FACE_ASPECT))
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    mask = ((xx - w / 2) / (w / 2)) ** 2 + ((yy - h / 2) / (h / 2)) ** 2 <= 1
    t = np.ones((h, w))
    r = max(1.0, 0.06 * w)
    for (px, py), k in zip(LANDMARK_LAYOUT, (1, 1, 0.8, 0.8, 0.8)):
        t[(xx - px * w) ** 2 + (yy - py * h) ** 2 <= (k * r) ** 2] = 0.0
    return t, mask.astype(np.float64)


def ncc_map(gray, template, mask, noise=8.0):
    """Masked normalized cross-correlation of every full window.

    ``noise`` (grey levels) floors the window variance so flat regions
    cannot score high.
    """
    n = mask.sum()
    t = (template - (template * mask).sum() / n) * mask
    t /= np.linalg.norm(t)
    flip = (slice(None, None, -1), slice(None, None, -1))
    num = fftconvolve(gray, t[flip], mode="valid")
    s1 = fftconvolve(gray, mask[flip], mode="valid")
    s2 = fftconvolve(gray * gray, mask[flip], mode="valid")
    var = np.maximum(s2 - s1 * s1 / n, 0.0) + n * noise ** 2
    return num / np.sqrt(var)


def matched_filter_detect(image, widths, threshold=0.5, nms=0.3):
    gray = image.astype(np.float64).mean(axis=2)
    boxes, scores = [], []
    for w in widths:
        tmpl, mask = face_template(w)
        th, tw = tmpl.shape
        if th > gray.shape[0] or tw > gray.shape[1]:
            continue
        m = ncc_map(gray, tmpl, mask)
        ys, xs = np.nonzero(m > threshold)
        boxes.extend([(x, y, x + tw, y + th) for y, x in zip(ys, xs)])
        scores.extend(m[ys, xs])
    if not boxes:
        return np.zeros((0, 4)), np.zeros(0)
    boxes, scores = np.array(boxes, float), np.array(scores)
    keep = nms_indices(boxes, scores, nms)
    return boxes[keep], scores[keep]


def recall_precision(corpus, widths, threshold=0.5, iou_match=0.5):
    hits = n_gt = n_det = 0
    for item in corpus:
        dets, _ = matched_filter_detect(item.image, widths, threshold)
        gts = item.box_array
        n_gt += len(gts)
        n_det += len(dets)
        if len(gts) and len(dets):
            hits += int(np.sum(iou_matrix(gts, dets).max(axis=1) >= iou_match))
    return hits / max(n_gt, 1), hits / max(n_det, 1)
