"""Behaviour of the trained toy cascade on held-out images.

Uses the cascade cached by the acceptance suite (trained on first use).
"""

import numpy as np
import pytest

from cascadeface.cascade import CascadeConfig, stage1_propose, stage2_refine, stage3_output
from cascadeface.dataset import default_splits, generate_toy_corpus, harvest_corpus
from cascadeface.geometry import iou_matrix

from test_acceptance import CORPUS_SEED, CORPUS_SIZE, trained_cascade

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def trained():
    items = generate_toy_corpus(CORPUS_SIZE, seed=CORPUS_SEED)
    corpus = {k: [items[i] for i in v] for k, v in default_splits(CORPUS_SIZE).items()}
    nets, _ = trained_cascade(corpus)
    return nets, corpus["test"]


def false_positives(boxes, truths) -> int:
    if not boxes:
        return 0
    if not truths:
        return len(boxes)
    m = iou_matrix(np.array([b.coords for b in boxes]), np.array([b.coords for b in truths]))
    return int(np.sum(m.max(axis=1) < 0.5))


def test_pnet_separates_faces_from_background(trained):
    nets, test = trained
    samples = harvest_corpus(test, {"negative": 6, "positive": 2, "part": 0, "landmark": 0}, 12, seed=3)
    p = nets["pnet"].forward(samples.patches).prob[:, 1]
    faces, background = p[samples.types == 1], p[samples.types == 0]
    # a handful of crops sit at the IoU boundary, so the bound is on the bulk
    assert np.mean(faces > 0.9) >= 0.95
    assert np.mean(background < 0.1) >= 0.95
    assert np.median(faces) > 0.99 and np.median(background) < 0.01


@pytest.mark.parametrize("level", [0, 127, 255])
def test_blank_image_gives_no_proposals(trained, level):
    nets, _ = trained
    blank = np.full((128, 128, 3), level, np.uint8)
    assert len(stage1_propose(blank, nets["pnet"], CascadeConfig())) <= 1


def test_refinement_removes_false_positives(trained):
    nets, test = trained
    config = CascadeConfig()
    fp = np.zeros(3, int)
    for item in test:
        s1 = stage1_propose(item.image, nets["pnet"], config)
        s2 = stage2_refine(item.image, s1, nets["rnet"], config)
        s3 = stage3_output(item.image, s2, nets["onet"], config)
        assert len(s1) >= len(s2) >= len(s3)
        fp += [false_positives(s, item.boxes) for s in (s1, s2, s3)]
    assert fp[1] < fp[0]
    assert fp[2] <= fp[1]
