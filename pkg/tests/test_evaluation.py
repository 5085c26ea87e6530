import itertools
import math

import numpy as np
import pytest

from cascadeface.evaluation import (bench_forward, central_crop, eval_detection, eval_nme,
                                    hardware_descriptor, match_detections, timing_table)
from cascadeface.geometry import Box, iou
from cascadeface.networks import build_network


def greedy_oracle(dets, gts, thr):
    """Greedy matching written as plain loops over score order."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    free = set(range(len(gts)))
    pairs = []
    for i in order:
        best, best_j = -1.0, None
        for j in sorted(free):
            v = iou(dets[i], gts[j])
            if v > best:
                best, best_j = v, j
        if best_j is not None and best >= thr:
            free.discard(best_j)
            pairs.append((i, best_j))
    return pairs


def optimal_count(dets, gts, thr):
    """Largest one-to-one matching by exhaustive search."""
    n, m = len(dets), len(gts)
    ok = [[iou(d, g) >= thr for g in gts] for d in dets]
    best = 0
    for k in range(min(n, m), 0, -1):
        for ds in itertools.combinations(range(n), k):
            for gs in itertools.permutations(range(m), k):
                if all(ok[d][g] for d, g in zip(ds, gs)):
                    return k
    return best


def random_case(rng):
    gts = []
    for _ in range(int(rng.integers(0, 4))):
        x, y = rng.uniform(0, 40, 2)
        s = rng.uniform(8, 20)
        gts.append(Box(x, y, x + s, y + s))
    dets = []
    for _ in range(int(rng.integers(0, 5))):
        if gts and rng.random() < 0.7:
            g = gts[int(rng.integers(len(gts)))]
            dx, dy = rng.normal(0, 3, 2)
            dets.append(Box(g.x1 + dx, g.y1 + dy, g.x2 + dx, g.y2 + dy, score=float(rng.uniform())))
        else:
            x, y = rng.uniform(0, 40, 2)
            dets.append(Box(x, y, x + 10, y + 10, score=float(rng.uniform())))
    return dets, gts


def test_matching_agrees_with_oracles():
    rng = np.random.default_rng(0)
    for _ in range(300):
        dets, gts = random_case(rng)
        got = match_detections(dets, gts, 0.5)
        assert sorted(got) == sorted(greedy_oracle(dets, gts, 0.5))
        assert len(got) <= optimal_count(dets, gts, 0.5)
        assert len({j for _, j in got}) == len(got)


def test_perfect_and_empty_detections():
    gts = [[Box(0, 0, 10, 10), Box(20, 20, 30, 30)], [Box(5, 5, 25, 25)]]
    dets = [[Box(*g.coords, score=0.9 - 0.1 * i) for i, g in enumerate(gs)] for gs in gts]
    ev = eval_detection(dets, gts)
    assert all(p == 1.0 for _, _, _, p, _ in ev.table)
    assert ev.table[-1][4] == 1.0
    assert ev.average_precision == pytest.approx(1.0)
    none = eval_detection([[], []], gts)
    assert none.table == [] and none.best_precision_at_recall(0.0) == 0.0
    assert none.n_ground_truth == 3


def test_pr_table_is_monotone():
    rng = np.random.default_rng(1)
    cases = [random_case(rng) for _ in range(50)]
    ev = eval_detection([d for d, _ in cases], [g for _, g in cases])
    recalls = [r for *_, r in ev.table]
    thresholds = [t for t, *_ in ev.table]
    assert recalls == sorted(recalls)
    assert thresholds == sorted(thresholds, reverse=True)
    assert all(0 <= p <= 1 and 0 <= r <= 1 for *_, p, r in ev.table)
    assert 0 <= ev.average_precision <= 1


def test_operating_point_lookup():
    gts = [[Box(0, 0, 10, 10)], [Box(0, 0, 10, 10)]]
    dets = [[Box(0, 0, 10, 10, score=0.9)], [Box(50, 50, 60, 60, score=0.8), Box(0, 0, 10, 10, score=0.7)]]
    ev = eval_detection(dets, gts)
    assert [(tp, fp) for _, tp, fp, _, _ in ev.table] == [(1, 0), (1, 1), (2, 1)]
    assert ev.best_precision_at_recall(1.0) == pytest.approx(2 / 3)
    assert ev.operating_point(0.9, 0.5) == (0.9, 1.0, 0.5)
    assert ev.operating_point(0.9, 1.0) is None


def test_nme_identities():
    rng = np.random.default_rng(2)
    truth = rng.uniform(0, 100, size=(20, 5, 2))
    assert eval_nme(truth, truth).mean == 0.0
    iod = np.linalg.norm(truth[:, 0] - truth[:, 1], axis=1)
    angle = rng.uniform(0, 2 * np.pi, size=(20, 5))
    off = np.stack([np.cos(angle), np.sin(angle)], axis=2) * iod[:, None, None]
    assert eval_nme(truth + off, truth).mean == pytest.approx(1.0)


def test_nme_monte_carlo():
    # isotropic Gaussian jitter of std sigma: the point error is Rayleigh, mean sigma*sqrt(pi/2)
    rng = np.random.default_rng(3)
    truth = np.tile(np.array([[30, 40], [70, 40], [50, 60], [34, 76], [66, 76]], float), (1000, 1, 1))
    sigma = 2.0
    res = eval_nme(truth + rng.normal(0, sigma, truth.shape), truth)
    expected = sigma * math.sqrt(math.pi / 2) / 40.0
    assert res.n_faces == 1000
    assert abs(res.mean - expected) <= 0.05 * expected


def test_nme_excludes_coincident_eyes():
    truth = np.zeros((2, 5, 2))
    truth[1, 1] = [10, 0]
    res = eval_nme(truth + 1, truth)
    assert res.n_faces == 1 and res.failures == 1
    assert res.mean == pytest.approx(math.sqrt(2) / 10)


def test_central_crop():
    assert central_crop(np.zeros((40, 100, 3))).coords == (30, 0, 70, 40)
    assert central_crop(np.zeros((50, 50, 3))).coords == (0, 0, 50, 50)


def test_bench_linearity_and_metadata():
    net = build_network("pnet")
    t1 = bench_forward(net, n=100, repeats=5)
    t2 = bench_forward(net, n=200, repeats=5)
    assert 0.75 * 2 <= t2 / t1 <= 1.25 * 2
    table = timing_table({"pnet": net}, n=20)
    assert "numpy" in table["hardware"] and table["n_forward"] == 20
    assert set(table["seconds"]) == {"pnet"}
    assert hardware_descriptor()
