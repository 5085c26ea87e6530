"""The synthetic corpus and how training crops are harvested from it.

Run with ``python3 notebooks/02_toy_corpus.py [out_dir]``. It writes a few
annotated images as PPM files so they can be opened in any viewer.
"""

import sys
from pathlib import Path

import numpy as np

from cascadeface import Box, generate_toy_corpus, save_corpus
from cascadeface.dataset import harvest_corpus
from cascadeface.imageio import draw_detections, save_image

out = Path(sys.argv[1] if len(sys.argv) > 1 else "notebook_output")
out.mkdir(parents=True, exist_ok=True)

# %% Images
# Each 128x128 image holds zero to a few oval "faces" with two eyes, a nose
# and two mouth corners, on textured backgrounds with face-like distractors.
corpus = generate_toy_corpus(50, seed=7)
faces = [len(item.boxes) for item in corpus]
print(f"{len(corpus)} images, {sum(faces)} faces, {faces.count(0)} images without a face")
sides = [b.width for item in corpus for b in item.boxes]
print(f"face side: {min(sides):.0f} to {max(sides):.0f} px")

# The ground truth draws like a detection, so the same helper shows both.
for k, item in enumerate(corpus[:4]):
    gts = [Box(*b.coords, score=1.0, landmarks=lm) for b, lm in zip(item.boxes, item.landmarks)]
    save_image(out / f"ground_truth_{k}.ppm", draw_detections(item.image, gts))
save_corpus(corpus, out / "corpus")
print("wrote ground-truth overlays and the corpus to", out)

# %% Harvesting
# Crops are labelled by their best IoU with any face: below 0.3 negative,
# above 0.65 positive, 0.4 to 0.65 part face. Landmark crops are square boxes
# jittered around a face. The 0.3 to 0.4 band is never used.
counts = {"negative": 6, "positive": 2, "part": 2, "landmark": 2}
for size in (12, 24, 48):
    samples = harvest_corpus(corpus, counts, size, seed=0)
    print(f"{size}px samples:", samples.counts())

samples = harvest_corpus(corpus, counts, 48, seed=0)
pos = samples.types == 1
print("mean |box target| of positives:", np.round(np.abs(samples.y_box[pos]).mean(axis=0), 3))
pts = samples.y_landmark[samples.types == 3].reshape(-1, 5, 2)
print("mean landmark layout in crop coordinates:")
for name, p in zip(("left eye", "right eye", "nose", "mouth left", "mouth right"), pts.mean(axis=0)):
    print(f"  {name:12s} ({p[0]:.2f}, {p[1]:.2f})")
