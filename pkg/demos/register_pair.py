"""Register a synthetic pair and print every registration metric.

Run: python demos/register_pair.py
"""
import numpy as np

from kpreward import training as tr
from kpreward.detector import Detector
from kpreward.evaluation import evaluate_pair
from kpreward.imaging import textured_image
from kpreward.net import Unet

rng = np.random.default_rng(0)
base = textured_image(96, 96, rng)  # blobs and ridges, a stand-in for a retina image

# two views of the base under random homographies, plus noise, gamma and blur
cfg = tr.desk_config()
pair = tr.generate_pair(base, cfg.ranges, cfg.augmentation, rng, crop=96)
print("ground truth a -> b:\n", np.round(pair.h.m, 4))

# an untrained network already gives usable keypoints on clean texture; a
# checkpoint from `kpreward train` can be dropped in with net.load_checkpoint
det = Detector(Unet(rng=np.random.default_rng(1)), nms_window=4)
rec = evaluate_pair(det, pair.a, pair.b, pair.h, np.random.default_rng(2))

for key in ("class", "mee", "mae", "repeatability", "m_score", "coverage", "auc", "n_kp", "n_matches", "n_tp"):
    print(f"{key:>14}: {rec[key]}")
if rec["h_est"] is not None:
    print("estimate:\n", np.round(np.reshape(rec["h_est"], (3, 3)), 4))
