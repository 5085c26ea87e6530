import numpy as np
import pytest

from cascadeface.networks import (WeightsFormatError, build_network, forward_fcn_pnet, forward_patch,
                                  load_weights, map_cell_to_box, pnet_map_size, save_weights,
                                  shape_trace)
from cascadeface.tensor import ShapeError, finite_diff_check

# regression constants: sums over the layer traces below
PARAM_COUNTS = {"pnet": 6962, "rnet": 101468, "onet": 389040}

TRACES = {
    "pnet": [("Input", (3, 12, 12)), ("Conv", (10, 10, 10)), ("PReLU", (10, 10, 10)),
             ("MaxPool", (10, 5, 5)), ("Conv", (16, 3, 3)), ("PReLU", (16, 3, 3)),
             ("Conv", (32, 1, 1)), ("PReLU", (32, 1, 1))],
    "rnet": [("Input", (3, 24, 24)), ("Conv", (28, 22, 22)), ("PReLU", (28, 22, 22)),
             ("MaxPool", (28, 11, 11)), ("Conv", (48, 9, 9)), ("PReLU", (48, 9, 9)),
             ("MaxPool", (48, 4, 4)), ("Conv", (64, 3, 3)), ("PReLU", (64, 3, 3)),
             ("FullyConnected", (128, 1, 1)), ("PReLU", (128, 1, 1))],
    "onet": [("Input", (3, 48, 48)), ("Conv", (32, 46, 46)), ("PReLU", (32, 46, 46)),
             ("MaxPool", (32, 23, 23)), ("Conv", (64, 21, 21)), ("PReLU", (64, 21, 21)),
             ("MaxPool", (64, 10, 10)), ("Conv", (64, 8, 8)), ("PReLU", (64, 8, 8)),
             ("MaxPool", (64, 4, 4)), ("Conv", (128, 3, 3)), ("PReLU", (128, 3, 3)),
             ("FullyConnected", (256, 1, 1)), ("PReLU", (256, 1, 1))],
}

KERNELS = {"pnet": [3, 3, 3], "rnet": [3, 3, 2], "onet": [3, 3, 3, 2]}


@pytest.mark.parametrize("kind", ["pnet", "rnet", "onet"])
def test_shape_trace(kind):
    assert shape_trace(build_network(kind)) == TRACES[kind]


@pytest.mark.parametrize("kind", ["pnet", "rnet", "onet"])
def test_kernel_sizes_and_heads(kind):
    net = build_network(kind)
    convs = [layer for layer in net.trunk if layer.kind == "Conv"]
    assert [c.weight.value.shape[2] for c in convs] == KERNELS[kind]
    assert all(c.weight.value.shape[2] == c.weight.value.shape[3] for c in convs)
    out = net.forward(np.zeros((2, 3, net.input_size, net.input_size), np.float32))
    assert out.logits.shape == (2, 2) and out.box.shape == (2, 4) and out.landmark.shape == (2, 10)


@pytest.mark.parametrize("kind", ["pnet", "rnet", "onet"])
def test_parameter_count_is_pinned(kind):
    assert build_network(kind, seed=0).num_parameters() == PARAM_COUNTS[kind]
    assert build_network(kind, seed=9).num_parameters() == PARAM_COUNTS[kind]


def test_parameter_count_by_hand():
    # P-Net: three conv+PReLU blocks plus three 1x1 heads
    conv = lambda cin, cout, k: cin * cout * k * k + cout  # noqa: E731
    pnet = conv(3, 10, 3) + 10 + conv(10, 16, 3) + 16 + conv(16, 32, 3) + 32 + conv(32, 16, 1)
    assert pnet == PARAM_COUNTS["pnet"]


@pytest.mark.parametrize("kind", ["pnet", "rnet", "onet"])
def test_fresh_network_is_undecided(kind):
    net = build_network(kind)
    rng = np.random.default_rng(0)
    s = net.input_size
    patch = rng.uniform(-1, 1, size=(3, s, s)).astype(np.float32)
    p, box, lm = forward_patch(net, patch)
    assert abs(p - 0.5) < 0.05
    p2, box2, lm2 = forward_patch(net, patch.copy())
    assert p == p2 and box.tobytes() == box2.tobytes() and lm.tobytes() == lm2.tobytes()


def test_wrong_patch_size_is_rejected():
    net = build_network("rnet")
    with pytest.raises(ShapeError, match="24x24"):
        forward_patch(net, np.zeros((3, 12, 12), np.float32))
    with pytest.raises(ShapeError):
        build_network("onet").forward(np.zeros((1, 3, 48, 48)), dense=True)


def test_full_pnet_gradient_check():
    net = build_network("pnet", seed=3).astype(np.float64)
    rng = np.random.default_rng(11)
    x = rng.normal(0, 0.5, size=(1, 3, 12, 12))
    y = 1

    def loss():
        return -np.log(net.forward(x).prob[0, y])

    out = net.forward(x)
    net.zero_grad()
    d_logits = out.prob.copy()
    d_logits[0, y] -= 1
    dx = net.backward(d_logits, np.zeros_like(out.box), np.zeros_like(out.landmark))
    params = net.parameters()
    err = finite_diff_check(loss, [x] + [p.value for p in params], [dx] + [p.grad for p in params])
    assert err < 1e-5


def test_all_heads_backpropagate():
    net = build_network("rnet", seed=1).astype(np.float64)
    rng = np.random.default_rng(2)
    x = rng.normal(0, 0.5, size=(2, 3, 24, 24))
    gb, gl = rng.normal(size=(2, 4)), rng.normal(size=(2, 10))
    gf = rng.normal(size=(2, 2))

    def loss():
        out = net.forward(x)
        return float(np.sum(gf * out.logits) + np.sum(gb * out.box) + np.sum(gl * out.landmark))

    net.forward(x)
    net.zero_grad()
    net.backward(gf, gb, gl, input_grad=False)
    params = net.parameters()
    err = finite_diff_check(loss, [p.value for p in params], [p.grad for p in params],
                            max_entries=25, rng=np.random.default_rng(0))
    assert err < 1e-5


@pytest.mark.parametrize("size,expected", [(12, 1), (24, 7), (40, 15), (60, 25), (13, 1), (11, 0)])
def test_pnet_map_size(size, expected):
    assert pnet_map_size(size) == expected


def test_fcn_degenerate_and_small():
    net = build_network("pnet", seed=4)
    rng = np.random.default_rng(4)
    img = rng.normal(0, 0.5, size=(3, 12, 12)).astype(np.float32)
    dense = forward_fcn_pnet(net, img)
    p, box, lm = forward_patch(net, img)
    assert dense.prob.shape == (2, 1, 1)
    assert abs(dense.prob[1, 0, 0] - p) < 1e-6
    assert forward_fcn_pnet(net, np.zeros((3, 11, 30), np.float32)) is None
    assert forward_fcn_pnet(net, np.zeros((3, 24, 24), np.float32)).prob.shape == (2, 7, 7)


@pytest.mark.parametrize("shape", [(40, 60), (41, 57), (12, 31)])
def test_fcn_matches_patch_evaluation(shape):
    net = build_network("pnet", seed=5)
    rng = np.random.default_rng(sum(shape))
    h, w = shape
    img = rng.normal(0, 0.5, size=(3, h, w)).astype(np.float32)
    dense = forward_fcn_pnet(net, img)
    m, n = pnet_map_size(h), pnet_map_size(w)
    assert dense.prob.shape[1:] == (m, n)
    rows, cols = np.mgrid[0:m, 0:n]
    patches = np.stack([img[:, 2 * r:2 * r + 12, 2 * c:2 * c + 12]
                        for r, c in zip(rows.ravel(), cols.ravel())])
    out = net.forward(patches)
    np.testing.assert_allclose(dense.prob[1].ravel(), out.face_prob, atol=1e-5)
    np.testing.assert_allclose(dense.box.reshape(4, -1).T, out.box, atol=1e-5)
    np.testing.assert_allclose(dense.landmark.reshape(10, -1).T, out.landmark, atol=1e-5)


def test_map_cell_to_box():
    assert map_cell_to_box(0, 0, 1.0).coords == (0, 0, 12, 12)
    assert map_cell_to_box(3, 4, 0.5).coords == (16, 12, 40, 36)


def test_weights_roundtrip(tmp_path):
    net = build_network("onet", seed=7)
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    save_weights(net, a)
    loaded = load_weights(a)
    save_weights(loaded, b)
    assert a.read_bytes() == b.read_bytes()
    assert loaded.kind == "onet" and loaded.trained
    x = np.random.default_rng(0).normal(size=(3, 3, 48, 48)).astype(np.float32)
    o1, o2 = net.forward(x), loaded.forward(x)
    for f in ("prob", "box", "landmark"):
        assert getattr(o1, f).tobytes() == getattr(o2, f).tobytes()
    assert net.checksum() == loaded.checksum()


def test_weights_header_layout(tmp_path):
    path = tmp_path / "p.bin"
    save_weights(build_network("pnet"), path)
    data = path.read_bytes()
    assert data[:4] == b"MTCN"
    assert int.from_bytes(data[4:8], "little") == 1
    assert int.from_bytes(data[8:12], "little") == len(build_network("pnet").parameters())
    nlen = int.from_bytes(data[12:16], "little")
    assert data[16:16 + nlen] == b"pnet/conv1.weight"


def test_weights_errors(tmp_path):
    path = tmp_path / "p.bin"
    save_weights(build_network("pnet"), path)
    data = path.read_bytes()
    cases = {
        "magic": b"XXXX" + data[4:],
        "version": data[:4] + (2).to_bytes(4, "little") + data[8:],
        "truncated": data[:-7],
        "trailing": data + b"\0",
        "count": data[:8] + (3).to_bytes(4, "little") + data[12:],
    }
    for label, blob in cases.items():
        bad = tmp_path / f"{label}.bin"
        bad.write_bytes(blob)
        with pytest.raises(WeightsFormatError):
            load_weights(bad)
