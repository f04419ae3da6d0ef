"""Chain frame-to-frame homographies into one canvas and feather-blend the frames."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detector import Detector
from .evaluation import EvalConfig, register_pair
from .geometry import Homography, apply_points, warp_image
from .imaging import atomic_write_bytes, check_gray, load_image
from .registration import is_failed_transform

IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm")


@dataclass
class MosaicState:
    shapes: list  # (height, width) of every registered frame
    transforms: list  # H_0k: frame k -> frame 0 coordinates
    failure_index: int | None = None
    origin: tuple[float, float] = (0.0, 0.0)  # canvas pixel (0, 0) in frame-0 coordinates
    canvas_w: int = 0
    canvas_h: int = 0
    increments: list = field(default_factory=list)  # H_(k-1)k

    @property
    def frames_registered(self) -> int:
        return len(self.transforms)

    def to_canvas(self) -> Homography:
        return Homography.translation(-self.origin[0], -self.origin[1])

    def summary(self) -> dict:
        return {"frames_registered": self.frames_registered, "failure_index": self.failure_index,
                "canvas_w": self.canvas_w, "canvas_h": self.canvas_h}


def frame_corners(shape) -> np.ndarray:
    h, w = shape
    return np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])


def fit_canvas(state: MosaicState) -> None:
    """Set origin and canvas size to the union of the warped frame corners."""
    pts = np.concatenate([apply_points(t, frame_corners(s)) for t, s in zip(state.transforms, state.shapes)])
    lo = np.floor(pts.min(axis=0))
    hi = np.ceil(pts.max(axis=0))
    state.origin = (float(lo[0]), float(lo[1]))
    state.canvas_w = int(hi[0] - lo[0]) + 1
    state.canvas_h = int(hi[1] - lo[1]) + 1


def register_sequence(frames, detector: Detector, cfg: EvalConfig | None = None,
                      rng: np.random.Generator | None = None) -> MosaicState:
    """Register each frame onto its predecessor and accumulate into frame 0.

    Stops at the first frame whose increment cannot be estimated or is a
    failed transform (flip or out-of-range scale); that frame's index is
    recorded as ``failure_index``.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")
    cfg = cfg or EvalConfig()
    rng = np.random.default_rng(0) if rng is None else rng
    first = check_gray(frames[0])
    state = MosaicState(shapes=[first.shape], transforms=[Homography.identity()])
    for k in range(1, len(frames)):
        cur = check_gray(frames[k])
        # increment maps frame k onto frame k-1
        h_inc, _ = register_pair(detector, cur, check_gray(frames[k - 1]), rng, cfg)
        if h_inc is None or is_failed_transform(h_inc):
            state.failure_index = k
            break
        state.increments.append(h_inc)
        state.transforms.append(state.transforms[-1] @ h_inc)
        state.shapes.append(cur.shape)
    fit_canvas(state)
    return state


def feather_weights(shape) -> np.ndarray:
    """Distance-to-border weights min(x+1, y+1, w-x, h-y)."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    return np.minimum.reduce([xs + 1, ys + 1, w - xs, h - ys]).astype(np.float64)


def render(state: MosaicState, frames) -> np.ndarray:
    """Feather-blend the registered frames on the canvas; uncovered pixels are 0."""
    shift = state.to_canvas()
    size = (state.canvas_w, state.canvas_h)
    maps = [shift @ t for t in state.transforms]
    weights = [warp_image(feather_weights(shape), m, *size) for m, shape in zip(maps, state.shapes)]
    wsum = np.sum(weights, axis=0)
    covered = wsum > 0
    out = np.zeros((state.canvas_h, state.canvas_w))
    for m, wt, frame in zip(maps, weights, frames):
        # normalizing the weights first keeps a lone frame bit-exact
        share = np.zeros_like(wt)
        np.divide(wt, wsum, out=share, where=covered)
        out += share * warp_image(check_gray(frame), m, *size)
    return out


def list_frames(source) -> list[Path]:
    """Frames of a directory (lexicographic order) or of a manifest file."""
    source = Path(source)
    if source.is_dir():
        return sorted(p for p in source.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    paths = []
    for line in source.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            p = Path(line)
            paths.append(p if p.is_absolute() else source.parent / p)
    return paths


def load_frames(paths) -> list[np.ndarray]:
    frames = []
    for i, p in enumerate(paths):
        try:
            img = load_image(p)
        except (OSError, ValueError) as exc:
            raise OSError(f"frame {i} ({p}) unreadable: {exc}") from exc
        frames.append(img[..., 1] if img.ndim == 3 else img)
    return frames


def write_summary(path, state: MosaicState) -> None:
    atomic_write_bytes(path, (json.dumps(state.summary(), indent=2) + "\n").encode("utf-8"))


def synthetic_sequence(base, n_frames: int, size: int, rng: np.random.Generator, start=(16.0, 16.0),
                       max_shift: float = 4.0, max_rot_deg: float = 1.0, max_scale: float = 0.01):
    """Frames cut from ``base`` by a chain of small similarity increments.

    Returns (frames, true H_0k list). Frame k shows base point C_k q at pixel q
    with C_k = C_(k-1) D_k, so H_0k = C_0^-1 C_k.
    """
    base = check_gray(base)
    c = size / 2.0
    cams = [Homography.translation(*start)]
    for _ in range(1, n_frames):
        t = np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg))
        s = 1.0 + rng.uniform(-max_scale, max_scale)
        dx, dy = rng.uniform(0.5, 1.0, size=2) * max_shift
        rot = Homography([[s * np.cos(t), -s * np.sin(t), 0], [s * np.sin(t), s * np.cos(t), 0], [0, 0, 1]])
        about = Homography.translation(c, c) @ rot @ Homography.translation(-c, -c)
        cams.append(cams[-1] @ Homography.translation(dx, dy) @ about)
    hb, wb = base.shape
    for cam in cams:
        corners = apply_points(cam, frame_corners((size, size)))
        if corners.min() < 0 or corners[:, 0].max() > wb - 1 or corners[:, 1].max() > hb - 1:
            raise ValueError("sequence leaves the base image; use a larger base or smaller steps")
    frames = [warp_image(base, cam.inverse(), size, size) for cam in cams]
    truth = [cams[0].inverse() @ cam for cam in cams]
    return frames, truth
