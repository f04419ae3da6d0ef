"""Chain ten overlapping frames into one canvas and measure the drift.

Writes mosaic_demo.pgm to the working directory.

Run: python demos/mosaic_sequence.py
"""
import numpy as np

from kpreward import training as tr
from kpreward.detector import Detector
from kpreward.geometry import corner_error
from kpreward.imaging import save_image, textured_image
from kpreward.mosaic import register_sequence, render, synthetic_sequence
from kpreward.net import Unet

size = 96
base = textured_image(size + 104, size + 104, np.random.default_rng(0))
frames, truth = synthetic_sequence(base, 10, size, np.random.default_rng(1))

# a small suppression window keeps many keypoints, which matters more for
# chained registration than for a single pair: errors add up frame by frame
det = Detector(Unet((8, 16, 32, 64), tr.stream(0, tr.STREAM_INIT)), nms_window=2)
state = register_sequence(frames, det, rng=np.random.default_rng(0))

print("frames registered:", state.frames_registered, " failure index:", state.failure_index)
for k, (h, g) in enumerate(zip(state.transforms, truth)):
    print(f"frame {k}: corner error vs ground truth {corner_error(h, g, size, size):.2f} px")

canvas = render(state, frames)
save_image(canvas, "mosaic_demo.pgm")
print("canvas", canvas.shape, "-> mosaic_demo.pgm")

# a blank frame has no keypoints, so the chain stops right there
frames[4] = np.zeros_like(frames[4])
print("with frame 4 blanked, failure index:", register_sequence(frames, det).failure_index)
