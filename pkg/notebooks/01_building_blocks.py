"""Building blocks: autograd layers, box geometry, NMS and the masked multi-task loss.

Run with ``python3 notebooks/01_building_blocks.py``. Every section prints
what it checks, so the output reads top to bottom as a short tour.
"""

import numpy as np

from cascadeface import Box, build_network, iou, nms
from cascadeface.geometry import apply_box_regression, encode_box_target
from cascadeface.tensor import finite_diff_check
from cascadeface.training import LossWeights, SampleSet, batch_counts, ohem_select, total_loss

rng = np.random.default_rng(0)

# %% The three networks
# P-Net is fully convolutional, so a 12x12 patch gives a 1x1 map and a larger
# image gives a dense map with one cell per 12x12 window at stride 2.
for kind in ("pnet", "rnet", "onet"):
    net = build_network(kind, seed=0)
    print(f"{kind}: input {net.input_size}px, {net.num_parameters()} parameters")

pnet = build_network("pnet", seed=0)
dense = pnet.forward(rng.normal(size=(1, 3, 40, 40)), dense=True)
print("dense P-Net face map on a 40x40 image:", dense.prob.shape[2:])

# %% Backprop against central differences
# The checker perturbs a random subset of weights and compares the analytic
# gradient with a numerical one. float64 keeps roundoff out of the way.
net = build_network("rnet", seed=1).astype(np.float64)
x = rng.normal(size=(4, 3, 24, 24))
labels = np.array([1.0, 0.0, 1.0, 0.0])


def loss():
    out = net.forward(x)
    p = np.clip(out.prob[:, 1], 1e-12, 1 - 1e-12)
    return float(-(labels * np.log(p) + (1 - labels) * np.log(1 - p)).sum())


out = net.forward(x)
d_logits = out.prob.copy()
d_logits[:, 1] -= labels
d_logits[:, 0] -= 1 - labels
net.zero_grad()
net.backward(d_logits, np.zeros_like(out.box), np.zeros_like(out.landmark))
params = net.parameters()
err = finite_diff_check(loss, [p.value for p in params], [p.grad for p in params],
                        max_entries=10, rng=rng)
print(f"R-Net worst relative gradient error: {err:.2e}")

# %% Boxes, regression targets and NMS
gt = Box(30, 30, 70, 78)
crop = Box(26, 35, 72, 80)
t = encode_box_target(crop, gt)
print("IoU(crop, gt) =", round(iou(crop, gt), 3), " regression target =", np.round(t, 3))
print("decoding the target restores the ground truth:", apply_box_regression(crop, t).coords)

boxes = [Box(10, 10, 50, 50, score=0.9), Box(12, 12, 52, 52, score=0.8),
         Box(60, 60, 90, 90, score=0.7)]
print("NMS at 0.5 keeps scores:", [b.score for b in nms(boxes, 0.5)])

# %% Loss masking and online hard example mining
# Negatives carry only a face label, part faces only a box target, landmark
# crops only points. A task's loss ignores samples without its label.
print("64-sample batch split by 3:1:1:2 ->", batch_counts(64, (3, 1, 1, 2)))
print("OHEM keeps the 70% hardest of ten losses:", ohem_select(np.arange(10.0)))

samples = SampleSet(
    patches=rng.normal(size=(4, 3, 12, 12)).astype(np.float32),
    types=np.array([0, 1, 2, 3], np.int8),
    y_det=np.array([0.0, 1.0, 0.0, 0.0]),
    y_box=np.array([[0, 0, 0, 0], [0.1, 0, 0, 0], [0.2, 0.1, 0, 0], [0, 0, 0, 0]], float),
    y_landmark=np.zeros((4, 10)),
    crops=np.tile([0.0, 0.0, 12.0, 12.0], (4, 1)),
)
res = total_loss(samples, pnet.forward(samples.patches), LossWeights.for_stage("pnet"), ohem=False)
print("per-task loss:", {k: round(v, 4) for k, v in res.per_task.items()})
print("box gradient rows with a label:", np.flatnonzero(np.abs(res.d_box).sum(axis=1) > 0))
