"""Train a small cascade end to end, then detect and score on held-out images.

Run with ``python3 notebooks/03_train_and_detect.py [out_dir]``. It uses the
default per-stage epochs on only 200 training images, a few minutes on one
core. The acceptance suite trains the same way on 1600 images and gets much
tighter landmarks.
"""

import sys
from pathlib import Path

from cascadeface import (default_stage_settings, detect, evaluate_corpus, generate_toy_corpus,
                         save_weights, train_cascade)
from cascadeface.imageio import draw_detections, save_image

out = Path(sys.argv[1] if len(sys.argv) > 1 else "notebook_output")
out.mkdir(parents=True, exist_ok=True)

corpus = generate_toy_corpus(260, seed=11)
train, val, test = corpus[:200], corpus[200:230], corpus[230:]

# %% Training
# Stages train in order. R-Net learns from P-Net's mistakes and O-Net from
# the first two stages together, so each later stage sees harder negatives.
nets, results = train_cascade(train, val, seed=0, settings=default_stage_settings())
for kind, res in results.items():
    print(f"{kind}: val det loss {res.final('val', 'det'):.3f}, "
          f"face/non-face accuracy {res.final('val', 'det_accuracy'):.3f}")
    save_weights(res.net, out / f"{kind}.bin")

# %% Detection
# One image through all three stages. Boxes are green, landmarks red.
image = test[0]
dets = detect(image.image, nets)
print(f"test image 0: {len(image.boxes)} faces, {len(dets)} detections")
for d in dets:
    print(f"  score {d.score:.2f} box {[round(v) for v in d.coords]}")
save_image(out / "detections.ppm", draw_detections(image.image, dets))

# %% Scores
report = evaluate_corpus(nets, test)
print(f"average precision {report['average_precision']:.3f}")
print(f"precision at 90% recall {report['precision_at_recall_0.9']:.3f}")
print(f"landmark NME {report['nme']['mean']:.4f} over {report['nme']['n_faces']} matched faces")
