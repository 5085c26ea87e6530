import json

import numpy as np
import pytest

from cascadeface.cascade import (CascadeConfig, build_pyramid, detect, detections_to_json,
                                 stage1_propose, stage2_refine, stage3_output)
from cascadeface.dataset import generate_toy_corpus
from cascadeface.geometry import Box, iou_matrix
from cascadeface.networks import build_network, pnet_map_size

from test_dataset import accept_all


def test_pyramid_example():
    scales = build_pyramid(100, 100, CascadeConfig())
    np.testing.assert_allclose(scales, [0.6, 0.4254, 0.30161, 0.21384, 0.15161], atol=5e-6)
    assert 100 * scales[-1] >= 12 and 100 * scales[-1] * 0.709 < 12


@pytest.mark.parametrize("h,w,min_face", [(128, 128, 20), (60, 200, 20), (37, 90, 37), (300, 301, 48)])
def test_pyramid_properties(h, w, min_face):
    scales = build_pyramid(h, w, CascadeConfig(min_face=min_face))
    assert scales
    assert all(a > b for a, b in zip(scales, scales[1:]))
    assert all(min(h, w) * s >= 12 for s in scales)
    assert scales[0] == pytest.approx(12 / min_face)


def test_pyramid_small_image():
    assert build_pyramid(19, 100, CascadeConfig()) == []
    assert detect(np.zeros((19, 100, 3), np.uint8), [build_network(k) for k in ("pnet", "rnet", "onet")]) == []


def test_config_validation_and_json(tmp_path):
    for bad in ({"factor": 1.0}, {"min_face": 10}, {"t2": 1.0}, {"n3": 0.0}):
        with pytest.raises(ValueError):
            CascadeConfig(**bad)
    c = CascadeConfig(t1=0.5, n2=0.6)
    c.save(tmp_path / "c.json")
    assert CascadeConfig.load(tmp_path / "c.json") == c
    (tmp_path / "mixed.json").write_text(json.dumps({"t3": 0.8, "alpha_box": 0.5, "lr": 0.01}))
    assert CascadeConfig.load(tmp_path / "mixed.json").t3 == 0.8
    with pytest.raises(ValueError, match="unknown"):
        CascadeConfig.from_dict({"t9": 0.1})


def test_stage1_accounting_identity():
    img = generate_toy_corpus(1, seed=0)[0].image
    cfg = CascadeConfig(t1=0.0, n1_intra=1.0, n1_inter=1.0)
    props = stage1_propose(img, accept_all("pnet"), cfg)
    expected = 0
    for s in build_pyramid(128, 128, cfg):
        side = int(np.ceil(128 * s))
        expected += pnet_map_size(side) ** 2
    assert len(props) == expected
    assert all(b.area > 0 and b.score >= 0 for b in props)


def test_stage1_respects_threshold_and_nms():
    img = generate_toy_corpus(1, seed=0)[0].image
    cfg = CascadeConfig()
    props = stage1_propose(img, accept_all("pnet"), cfg)
    assert props and all(b.score >= cfg.t1 for b in props)
    ov = iou_matrix(np.array([b.coords for b in props]), np.array([b.coords for b in props]))
    np.fill_diagonal(ov, 0)
    # accept-all windows are already square, so squaring keeps the suppression bound
    assert ov.max() <= cfg.n1_inter
    for b in props:
        assert b.width == pytest.approx(b.height)


def test_later_stages_only_filter():
    img = generate_toy_corpus(2, seed=1)[1].image
    cfg = CascadeConfig()
    nets = {"pnet": accept_all("pnet"), "rnet": accept_all("rnet"), "onet": accept_all("onet")}
    s1 = stage1_propose(img, nets["pnet"], cfg)
    s2 = stage2_refine(img, s1, nets["rnet"], cfg)
    s3 = stage3_output(img, s2, nets["onet"], cfg)
    assert len(s1) >= len(s2) >= len(s3) > 0
    assert stage2_refine(img, [], nets["rnet"], cfg) == []
    assert stage3_output(img, [], nets["onet"], cfg) == []
    ov = iou_matrix(np.array([b.coords for b in s3]), np.array([b.coords for b in s3]))
    np.fill_diagonal(ov, 0)
    assert ov.max() <= cfg.n3


def test_stage3_landmarks_use_the_crop_before_regression():
    img = np.full((100, 100, 3), 128, np.uint8)
    onet = accept_all("onet")
    onet.heads["box"].bias.value[...] = [0.1, 0.1, 0.0, 0.0]
    onet.heads["landmark"].bias.value[...] = np.tile([0.25, 0.5], 5)
    cand = [Box(20, 30, 60, 70, score=0.9)]
    (det,) = stage3_output(img, cand, onet, CascadeConfig())
    assert det.coords == pytest.approx((24, 34, 64, 74), abs=1e-5)
    assert len(det.landmarks) == 5
    for x, y in det.landmarks:
        assert (x, y) == pytest.approx((30, 50), abs=1e-5)


def test_stage2_thresholds_filter_everything():
    img = np.full((64, 64, 3), 90, np.uint8)
    rnet = accept_all("rnet")
    rnet.heads["face"].bias.value[...] = [20.0, -20.0]
    assert stage2_refine(img, [Box(0, 0, 30, 30, score=0.9)], rnet, CascadeConfig()) == []


def test_detect_is_deterministic_and_sorted():
    img = generate_toy_corpus(1, seed=4)[0].image
    nets = [build_network(k, seed=1) for k in ("pnet", "rnet", "onet")]
    cfg = CascadeConfig(t1=0.45, t2=0.45, t3=0.45)
    a, b = detect(img, nets, cfg), detect(img, nets, cfg)
    assert a == b
    assert [d.score for d in a] == sorted((d.score for d in a), reverse=True)
    js = detections_to_json(a)
    assert json.dumps(js) == json.dumps(detections_to_json(b))
    for d in js:
        assert len(d["box"]) == 4 and len(d["landmarks"]) == 5
