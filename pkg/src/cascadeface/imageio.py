"""Binary PPM (P6) images and JSON Lines face annotations."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import Box


class ImageFormatError(ValueError):
    pass


class AnnotationFormatError(ValueError):
    pass


def _header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        if pos >= len(data):
            raise ImageFormatError("truncated PPM header")
        ch = data[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
        else:
            start = pos
            while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
                pos += 1
            tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise ImageFormatError("PPM header not terminated by whitespace")
    return tokens, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    tokens, offset = _header_tokens(data, 4)
    if tokens[0] != b"P6":
        raise ImageFormatError(f"unsupported PPM magic {tokens[0]!r}, only P6 is read")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise ImageFormatError(f"bad PPM header field: {exc}") from None
    if width <= 0 or height <= 0:
        raise ImageFormatError(f"bad PPM size {width}x{height}")
    if maxval != 255:
        raise ImageFormatError(f"only maxval 255 is supported, got {maxval}")
    need = width * height * 3
    raster = data[offset:offset + need]
    if len(raster) != need:
        raise ImageFormatError(f"PPM raster truncated: {len(raster)} of {need} bytes")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def encode_ppm(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ImageFormatError(f"expected H x W x 3 uint8 image, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(image).tobytes()


def load_image(path: str | Path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def save_image(path: str | Path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def annotation_record(image_name: str, boxes, landmarks) -> dict:
    return {
        "image": image_name,
        "boxes": [[float(v) for v in b.coords] for b in boxes],
        "landmarks": [None if lm is None else [[float(x), float(y)] for x, y in np.asarray(lm)]
                      for lm in landmarks],
    }


def save_annotations(path: str | Path, records: list[dict]) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_annotations(path: str | Path) -> list[dict]:
    """Parse a JSON Lines file; boxes come back as :class:`Box`, landmarks as ``(5, 2)`` arrays."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                boxes = [Box(*map(float, b)) for b in rec["boxes"]]
                lms = [None if lm is None else np.asarray(lm, dtype=np.float64).reshape(5, 2)
                       for lm in rec.get("landmarks", [None] * len(boxes))]
                if len(lms) != len(boxes):
                    raise ValueError(f"{len(boxes)} boxes but {len(lms)} landmark entries")
                records.append({"image": str(rec["image"]), "boxes": boxes, "landmarks": lms})
            except (ValueError, KeyError, TypeError) as exc:
                raise AnnotationFormatError(f"{path}:{lineno}: {exc}") from None
    return records


def draw_detections(image: np.ndarray, detections, box_color=(0, 255, 0),
                    point_color=(255, 0, 0)) -> np.ndarray:
    """Copy of ``image`` with 1px box outlines and 3x3 landmark dots burned in."""
    out = np.array(image, dtype=np.uint8, copy=True)
    h, w = out.shape[:2]
    for det in detections:
        x1, y1, x2, y2 = (int(round(v)) for v in det.coords)
        xa, xb = max(x1, 0), min(x2, w - 1)
        ya, yb = max(y1, 0), min(y2, h - 1)
        if xa > xb or ya > yb:
            continue
        for y in (y1, y2):
            if 0 <= y < h:
                out[y, xa:xb + 1] = box_color
        for x in (x1, x2):
            if 0 <= x < w:
                out[ya:yb + 1, x] = box_color
        points = getattr(det, "landmarks", None)
        for px, py in (() if points is None else points):
            cx, cy = int(round(px)), int(round(py))
            out[max(cy - 1, 0):max(min(cy + 2, h), 0), max(cx - 1, 0):max(min(cx + 2, w), 0)] = point_color
    return out
