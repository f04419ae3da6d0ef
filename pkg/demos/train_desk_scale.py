"""Train a small detector on textured images and compare it with its untrained self.

The loop logs the true-positive count of every step; the reward only ever
asks the network to score matchable pixels higher, so that count is the
thing to watch. About two minutes on one core with the defaults below.

Run: python demos/train_desk_scale.py [steps]
"""
import sys

import numpy as np

from kpreward import training as tr
from kpreward.detector import Detector
from kpreward.evaluation import evaluate_pair, summarize
from kpreward.imaging import textured_image

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 100
cfg = tr.desk_config(seed=0, max_steps=steps)

bases = [textured_image(64, 64, np.random.default_rng(i)) for i in range(20)]
held = [textured_image(64, 64, np.random.default_rng(1000 + i)) for i in range(20)]
pairs = [tr.generate_pair(b, cfg.ranges, cfg.augmentation, np.random.default_rng(2000 + i), 64)
         for i, b in enumerate(held)]


def show(rec):
    if rec["step"] % 10 == 0:
        print(f"step {rec['step']:4d}  loss {rec['loss'] if rec['loss'] is None else round(rec['loss'], 4)}"
              f"  tp/pair {rec['n_tp'] / rec['pairs']:.2f}")


untrained = tr.init_model(cfg)
model, _, records = tr.train(bases, cfg, callback=show)

tp = np.array([r["n_tp"] / r["pairs"] for r in records])
k = max(1, len(tp) // 6)
print(f"\ntrue positives per pair: first {k} steps {tp[:k].mean():.2f}, last {k} steps {tp[-k:].mean():.2f}")

for name, net in (("untrained", untrained), ("trained", model)):
    recs = [evaluate_pair(Detector(net), p.a, p.b, p.h, np.random.default_rng(i)) for i, p in enumerate(pairs)]
    s = summarize(recs)
    print(f"{name:>9}: acceptable {s['acceptable_pct']:.0f}%  inaccurate {s['inaccurate_pct']:.0f}%  "
          f"failed {s['failed_pct']:.0f}%")
