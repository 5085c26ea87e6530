"""P-Net, R-Net and O-Net: construction, forward passes and weight files."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import Box
from .tensor import Conv, FullyConnected, Layer, MaxPool, PReLU, ShapeError, Softmax, Tensor

INPUT_SIZES = {"pnet": 12, "rnet": 24, "onet": 48}
HEAD_SIZES = {"face": 2, "box": 4, "landmark": 10}
HEAD_STD = 0.01
TRUNK_GAIN = 0.5

MAGIC = b"MTCN"
FORMAT_VERSION = 1


class WeightsFormatError(ValueError):
    pass


@dataclass
class NetOutput:
    """Head outputs; patch mode gives ``(N, k)``, dense mode ``(N, k, m, n)``."""

    logits: np.ndarray
    prob: np.ndarray
    box: np.ndarray
    landmark: np.ndarray

    @property
    def face_prob(self) -> np.ndarray:
        return self.prob[:, 1]


class Network:
    def __init__(self, kind: str, trunk: list[Layer], heads: dict[str, Layer]):
        self.kind = kind
        self.input_size = INPUT_SIZES[kind]
        self.trunk = trunk
        self.heads = heads
        self.softmax = Softmax(axis=1)
        self.trained = False
        self._dense = False

    def parameters(self) -> list[Tensor]:
        params = [p for layer in self.trunk for p in layer.parameters()]
        for name in HEAD_SIZES:
            params.extend(self.heads[name].parameters())
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def astype(self, dtype) -> "Network":
        for p in self.parameters():
            p.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.parameters()[0].value.dtype

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x: np.ndarray, dense: bool = False) -> NetOutput:
        """Evaluate a batch of patches, or with ``dense`` a whole image (P-Net only)."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"{self.kind}: expected (N, 3, H, W) input, got {x.shape}")
        s = self.input_size
        if not dense and x.shape[2:] != (s, s):
            raise ShapeError(f"{self.kind}: expected {s}x{s} patches, got {x.shape[2]}x{x.shape[3]}")
        if dense and self.kind != "pnet":
            raise ShapeError("dense evaluation is only defined for the fully convolutional P-Net")
        self._dense = dense
        h = x
        for layer in self.trunk:
            h = layer.forward(h)
        logits = self.heads["face"].forward(h)
        box = self.heads["box"].forward(h)
        lm = self.heads["landmark"].forward(h)
        if not dense and logits.ndim == 4:
            logits, box, lm = (a.reshape(a.shape[0], -1) for a in (logits, box, lm))
        prob = self.softmax.forward(logits)
        return NetOutput(logits, prob, box, lm)

    def backward(self, d_logits: np.ndarray, d_box: np.ndarray, d_landmark: np.ndarray,
                 input_grad: bool = True) -> np.ndarray | None:
        """Backpropagate gradients w.r.t. face logits and both regression heads.

        Returns the gradient w.r.t. the input batch, or ``None`` when
        ``input_grad`` is false (saves the first layer's input pass).
        """
        if self.kind == "pnet" and not self._dense:
            d_logits, d_box, d_landmark = (a.reshape(a.shape[0], -1, 1, 1)
                                           for a in (d_logits, d_box, d_landmark))
        g = self.heads["face"].backward(d_logits)
        g = g + self.heads["box"].backward(d_box)
        g = g + self.heads["landmark"].backward(d_landmark)
        for layer in reversed(self.trunk[1:]):
            g = layer.backward(g)
        return self.trunk[0].backward(g, need_input_grad=input_grad)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
        return h.hexdigest()[:16]


def _conv_block(trunk, rng, cin, cout, k, idx, gain):
    trunk.append(Conv(cin, cout, k, rng=rng, std=gain / np.sqrt(cin * k * k), name=f"conv{idx}"))
    trunk.append(PReLU(cout, name=f"prelu{idx}"))


def build_network(kind: str, seed: int = 0, gain: float = TRUNK_GAIN) -> Network:
    """Fresh network of the given kind (``pnet``, ``rnet`` or ``onet``).

    Trunk weights are zero-mean Gaussians with std ``gain / sqrt(fan_in)``;
    head weights use std 0.01 so a new network outputs p close to 0.5.
    """
    rng = np.random.default_rng(seed)
    trunk: list[Layer] = []
    if kind == "pnet":
        _conv_block(trunk, rng, 3, 10, 3, 1, gain)
        trunk.append(MaxPool(2))
        _conv_block(trunk, rng, 10, 16, 3, 2, gain)
        _conv_block(trunk, rng, 16, 32, 3, 3, gain)
        heads = {name: Conv(32, n, 1, rng=rng, std=HEAD_STD, name=name)
                 for name, n in HEAD_SIZES.items()}
    elif kind == "rnet":
        _conv_block(trunk, rng, 3, 28, 3, 1, gain)
        trunk.append(MaxPool(3))
        _conv_block(trunk, rng, 28, 48, 3, 2, gain)
        trunk.append(MaxPool(3))
        _conv_block(trunk, rng, 48, 64, 2, 3, gain)
        trunk.append(FullyConnected(3 * 3 * 64, 128, rng=rng, std=gain / np.sqrt(576), name="fc4"))
        trunk.append(PReLU(128, name="prelu4"))
        heads = {name: FullyConnected(128, n, rng=rng, std=HEAD_STD, name=name)
                 for name, n in HEAD_SIZES.items()}
    elif kind == "onet":
        _conv_block(trunk, rng, 3, 32, 3, 1, gain)
        trunk.append(MaxPool(3))
        _conv_block(trunk, rng, 32, 64, 3, 2, gain)
        trunk.append(MaxPool(3))
        _conv_block(trunk, rng, 64, 64, 3, 3, gain)
        trunk.append(MaxPool(2))
        _conv_block(trunk, rng, 64, 128, 2, 4, gain)
        trunk.append(FullyConnected(3 * 3 * 128, 256, rng=rng, std=gain / np.sqrt(1152), name="fc5"))
        trunk.append(PReLU(256, name="prelu5"))
        heads = {name: FullyConnected(256, n, rng=rng, std=HEAD_STD, name=name)
                 for name, n in HEAD_SIZES.items()}
    else:
        raise ValueError(f"unknown network kind {kind!r}")
    return Network(kind, trunk, heads)


def shape_trace(net: Network) -> list[tuple[str, tuple[int, int, int]]]:
    """``(layer kind, (C, H, W))`` after each trunk layer for one native-size patch."""
    s = net.input_size
    h = np.zeros((1, 3, s, s), dtype=net.dtype)
    trace = [("Input", (3, s, s))]
    for layer in net.trunk:
        h = layer.forward(h)
        shape = h.shape[1:] if h.ndim == 4 else (h.shape[1], 1, 1)
        trace.append((layer.kind, tuple(int(d) for d in shape)))
    return trace


def forward_patch(net: Network, patch: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Face probability, box regression and landmark vector for one ``3 x S x S`` patch."""
    out = net.forward(np.asarray(patch)[None])
    return float(out.face_prob[0]), out.box[0].copy(), out.landmark[0].copy()


def pnet_map_size(size: int) -> int:
    """Number of whole 12-pixel windows at stride 2 along one image axis."""
    return (size - 12) // 2 + 1 if size >= 12 else 0


def forward_fcn_pnet(net: Network, image: np.ndarray) -> NetOutput | None:
    """Dense P-Net maps over a normalized ``3 x H x W`` image.

    Cell ``(r, c)`` scores the 12x12 window whose top-left corner is
    ``(2c, 2r)``. Only windows lying entirely inside the image are kept, so
    every cell matches the patch-mode evaluation of its window. Returns
    ``None`` for images smaller than 12 pixels on either side.
    """
    if net.kind != "pnet":
        raise ValueError("forward_fcn_pnet needs a P-Net")
    image = np.asarray(image)
    h, w = image.shape[1:]
    if h < 12 or w < 12:
        return None
    out = net.forward(image[None], dense=True)
    m, n = pnet_map_size(h), pnet_map_size(w)
    return NetOutput(*(a[0, :, :m, :n] for a in (out.logits, out.prob, out.box, out.landmark)))


def map_cell_to_box(r: int, c: int, scale: float) -> Box:
    return Box(2 * c / scale, 2 * r / scale, (2 * c + 12) / scale, (2 * r + 12) / scale)


def save_weights(net: Network, path: str | Path) -> None:
    params = net.parameters()
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(params))]
    for p in params:
        name = f"{net.kind}/{p.name}".encode("utf-8")
        chunks.append(struct.pack("<I", len(name)))
        chunks.append(name)
        chunks.append(struct.pack("<I", p.value.ndim))
        chunks.append(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        chunks.append(np.ascontiguousarray(p.value, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_weights(path: str | Path) -> Network:
    """Read a weights file; the network kind comes from the record names."""
    data = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise WeightsFormatError(f"{path}: truncated at byte {pos} (wanted {n} more)")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise WeightsFormatError(f"{path}: bad magic, not a weights file")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise WeightsFormatError(f"{path}: unsupported format version {version}")
    records = {}
    kind = None
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims)) if ndim else 1
        values = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims)
        net_kind, _, pname = name.partition("/")
        if kind is None:
            kind = net_kind
        elif net_kind != kind:
            raise WeightsFormatError(f"{path}: mixed network kinds {kind} and {net_kind}")
        if pname in records:
            raise WeightsFormatError(f"{path}: duplicate record {name}")
        records[pname] = values
    if pos != len(data):
        raise WeightsFormatError(f"{path}: {len(data) - pos} trailing bytes")
    if kind not in INPUT_SIZES:
        raise WeightsFormatError(f"{path}: unknown network kind {kind!r}")
    net = build_network(kind)
    params = net.named_parameters()
    if set(params) != set(records):
        missing = sorted(set(params) - set(records))
        extra = sorted(set(records) - set(params))
        raise WeightsFormatError(f"{path}: parameter mismatch, missing {missing}, unexpected {extra}")
    for name, p in params.items():
        if records[name].shape != p.value.shape:
            raise WeightsFormatError(
                f"{path}: {name} has dims {records[name].shape}, expected {p.value.shape}")
        p.value = records[name].astype(np.float32)
        p.grad = np.zeros_like(p.value)
    net.trained = True
    return net
