"""Self-supervised detector training from a matching reward.

Each step warps base images into synthetic pairs with known homographies,
detects and describes keypoints on both images, matches them, labels the
matches against the ground truth and regresses the score maps towards 1 at
correct keypoints and 0 at a balanced sample of wrong ones.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import describe, nms
from .geometry import Homography, HomographySampleRanges, compose_pair, sample_homography, warp_image
from .imaging import AugmentationConfig, augment, check_gray, load_image
from .matching import cross_check_match, verify
from .net import Adam, Unet, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

# labels of the independent random streams derived from the root seed
STREAM_INIT = 0
STREAM_PAIRS = 1
STREAM_MINING = 2
STREAM_RANSAC = 3
STREAM_SHUFFLE = 4
STREAM_EVAL = 5


def stream(seed: int, label: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), label, *(int(k) for k in keys)])


@dataclass
class PairSample:
    a: np.ndarray
    b: np.ndarray
    h: Homography  # maps pixel coordinates of ``a`` onto ``b``
    offset: tuple[int, int] = (0, 0)
    base_id: int | None = None


@dataclass
class TrainConfig:
    batch_size: int = 5
    crop: int = 256
    epochs: int = 35
    max_steps: int | None = None
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    nms_window: int = 10
    nms_threshold: float = 0.0
    max_kp: int = 1000
    eps: float = 3.0
    seed: int = 0
    checkpoint_every: int = 0
    channels: tuple[int, ...] = (8, 16, 32, 64)
    ranges: HomographySampleRanges = field(default_factory=HomographySampleRanges)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.crop < 16 or self.crop % 16:
            raise ValueError("crop must be a positive multiple of 16")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    def to_json(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_json(cls, d: dict) -> TrainConfig:
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["ranges"] = HomographySampleRanges(**d["ranges"])
        aug = dict(d["augmentation"])
        for k, v in aug.items():
            if isinstance(v, list):
                aug[k] = tuple(v)
        d["augmentation"] = AugmentationConfig(**aug)
        return cls(**d)


# Desk scale: 64 px crops leave too little room for the full-size ranges
# (a 100 px translation would empty the crop), so geometry and appearance
# changes are scaled down with the image.
DESK_RANGES = HomographySampleRanges(scale_min=0.9, scale_max=1.1, persp_min=1e-6, persp_max=1e-4,
                                     trans_max_x=6.0, trans_max_y=6.0, shear_min=-0.1, shear_max=0.1,
                                     rot_max_deg=10.0)
DESK_AUGMENTATION = AugmentationConfig(noise_sigma=(0.0, 0.05), contrast_gain=(0.8, 1.2),
                                       illumination_offset=(-0.1, 0.1), gamma_range=(0.8, 1.25),
                                       blur_lengths=(3,), invert=False)


def desk_config(seed: int = 0, **overrides) -> TrainConfig:
    """64 px setup: 20 bases at batch 5 for 75 epochs gives 300 steps."""
    base = dict(batch_size=5, crop=64, epochs=75, seed=seed, ranges=DESK_RANGES,
                augmentation=DESK_AUGMENTATION)
    base.update(overrides)
    return TrainConfig(**base)


# ---------------------------------------------------------------------------
# pair synthesis

def generate_pair(base, ranges: HomographySampleRanges, aug_cfg: AugmentationConfig,
                  rng: np.random.Generator, crop: int | None = None, base_id=None) -> PairSample:
    """Warp ``base`` by two random homographies, crop the same window, augment.

    The returned homography relates the two crops (a -> b).
    """
    base = check_gray(base)
    h, w = base.shape
    crop = min(h, w) if crop is None else crop
    if crop > min(h, w):
        raise ValueError(f"crop {crop} does not fit base image of size {w}x{h}")
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    g = sample_homography(ranges, center, rng)
    g_prime = sample_homography(ranges, center, rng)
    wa = warp_image(base, g, w, h)
    wb = warp_image(base, g_prime, w, h)
    x0 = int(rng.integers(0, w - crop + 1))
    y0 = int(rng.integers(0, h - crop + 1))
    shift = Homography.translation(x0, y0)
    h_pair = shift.inverse() @ compose_pair(g_prime, g) @ shift
    a = augment(wa[y0:y0 + crop, x0:x0 + crop], aug_cfg, rng)
    b = augment(wb[y0:y0 + crop, x0:x0 + crop], aug_cfg, rng)
    return PairSample(a, b, h_pair, (x0, y0), base_id)


# ---------------------------------------------------------------------------
# reward, mining and loss

def _xy(points) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    return pts.reshape(0, 2) if pts.size == 0 else pts.reshape(len(pts), -1)[:, :2]


def build_reward(tp_points, width: int, height: int) -> np.ndarray:
    """Indicator map: 1 at the pixels of true-positive keypoints, 0 elsewhere."""
    r = np.zeros((height, width))
    pts = _xy(tp_points)
    if len(pts):
        xs, ys = pts[:, 0].astype(np.intp), pts[:, 1].astype(np.intp)
        if np.any((xs < 0) | (xs >= width) | (ys < 0) | (ys >= height)):
            raise ValueError("keypoint outside the reward map")
        r[ys, xs] = 1.0
    return r


def mine_indices(is_tp, rng: np.random.Generator) -> np.ndarray:
    """Indices of matches that enter the loss: all true positives plus as many
    randomly drawn false positives (all of them when they are not more numerous).
    """
    is_tp = np.asarray(is_tp, dtype=bool)
    tp = np.flatnonzero(is_tp)
    fp = np.flatnonzero(~is_tp)
    n = len(tp)
    if len(fp) > n:
        fp = np.sort(rng.choice(fp, size=n, replace=False)) if n else fp[:0]
    return np.concatenate([tp, fp])


def build_mask(points, is_tp, width: int, height: int, rng: np.random.Generator) -> np.ndarray:
    """Binary back-propagation mask over the mined keypoint pixels.

    ``points`` holds the keypoint (x, y) of every match in this image.
    """
    sel = mine_indices(is_tp, rng)
    return build_reward(_xy(points)[sel], width, height)


def masked_loss(s, r, m):
    """Mean squared error over the masked pixels and its gradient wrt ``s``.

    Returns (None, None) when the mask is empty.
    """
    s = np.asarray(s, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if s.shape != r.shape or s.shape != m.shape:
        raise ValueError("score, reward and mask shapes differ")
    total = m.sum()
    if total <= 0:
        return None, None
    diff = s - r
    return float((diff * diff * m).sum() / total), 2.0 * diff * m / total


def simple_loss(s, r) -> float:
    diff = np.asarray(s) - np.asarray(r)
    return float((diff * diff).sum())


def batch_loss(s, r, m):
    """Average of the per-image masked losses over images with a non-empty mask.

    ``s``, ``r``, ``m`` are (N, 1, H, W). Returns (loss or None, dL/dS).
    """
    ds = np.zeros_like(s)
    losses = []
    for j in range(len(s)):
        lj, gj = masked_loss(s[j, 0], r[j, 0], m[j, 0])
        if lj is None:
            continue
        losses.append(lj)
        ds[j, 0] = gj
    if not losses:
        return None, ds
    return float(np.mean(losses)), ds / len(losses)


def collect_targets(s, pairs, cfg: TrainConfig, rng: np.random.Generator):
    """Non-differentiable part of a step: NMS, description, matching, labelling.

    ``s`` holds the score maps of the batch laid out [a0, b0, a1, b1, ...].
    Returns reward maps, masks (same layout) and per-step diagnostics.
    """
    n, _, h, w = s.shape
    r = np.zeros_like(s)
    m = np.zeros_like(s)
    diag = dict(n_kp_a=0, n_kp_b=0, n_matches=0, n_tp=0, n_fp=0)
    for i, pair in enumerate(pairs):
        kps_a = nms(s[2 * i, 0], cfg.nms_window, cfg.nms_threshold, cfg.max_kp)
        kps_b = nms(s[2 * i + 1, 0], cfg.nms_window, cfg.nms_threshold, cfg.max_kp)
        matches = cross_check_match(describe(pair.a, kps_a), describe(pair.b, kps_b))
        is_tp = verify(matches, kps_a, kps_b, pair.h, cfg.eps)
        sel = mine_indices(is_tp, rng)
        pa = kps_a[matches.idx_a, :2]
        pb = kps_b[matches.idx_b, :2]
        r[2 * i, 0] = build_reward(pa[is_tp], w, h)
        r[2 * i + 1, 0] = build_reward(pb[is_tp], w, h)
        m[2 * i, 0] = build_reward(pa[sel], w, h)
        m[2 * i + 1, 0] = build_reward(pb[sel], w, h)
        diag["n_kp_a"] += len(kps_a)
        diag["n_kp_b"] += len(kps_b)
        diag["n_matches"] += len(matches)
        diag["n_tp"] += int(is_tp.sum())
        diag["n_fp"] += int(len(matches) - is_tp.sum())
    return r, m, diag


def stack_pairs(pairs) -> np.ndarray:
    return np.stack([img for p in pairs for img in (p.a, p.b)])[:, None]


def train_step(model: Unet, adam: Adam, pairs, cfg: TrainConfig, rng: np.random.Generator) -> dict:
    """One optimizer step on a batch of pairs. Only the network forward is differentiated."""
    if isinstance(pairs, PairSample):
        pairs = [pairs]
    x = stack_pairs(pairs)
    s, cache = model.forward(x, train=True)
    r, m, diag = collect_targets(s, pairs, cfg, rng)
    loss, ds = batch_loss(s, r, m)
    diag["loss"] = loss
    diag["pairs"] = len(pairs)
    if loss is not None:
        adam.step(model.params, model.backward(cache, ds))
    diag["targets"] = (x, r, m)
    return diag


# ---------------------------------------------------------------------------
# training loop

def read_manifest(path) -> list[Path]:
    path = Path(path)
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            p = Path(line)
            out.append(p if p.is_absolute() else path.parent / p)
    return out


def load_bases(paths) -> list[np.ndarray]:
    bases = []
    for p in paths:
        try:
            img = load_image(p)
        except OSError as exc:
            raise OSError(f"cannot read base image {p}: {exc}") from exc
        if img.ndim == 3:
            img = img[..., 1]
        bases.append(img)
    return bases


def steps_per_epoch(n_bases: int, batch_size: int) -> int:
    return math.ceil(n_bases / batch_size)


def total_steps(n_bases: int, cfg: TrainConfig) -> int:
    n = cfg.epochs * steps_per_epoch(n_bases, cfg.batch_size)
    return n if cfg.max_steps is None else min(n, cfg.max_steps)


def batch_for_step(step: int, n_bases: int, cfg: TrainConfig):
    spe = steps_per_epoch(n_bases, cfg.batch_size)
    epoch, k = divmod(step, spe)
    order = stream(cfg.seed, STREAM_SHUFFLE, epoch).permutation(n_bases)
    return epoch, order[k * cfg.batch_size:(k + 1) * cfg.batch_size]


def make_batch(bases, idx, step: int, cfg: TrainConfig):
    return [generate_pair(bases[j], cfg.ranges, cfg.augmentation, stream(cfg.seed, STREAM_PAIRS, step, i),
                          cfg.crop, base_id=int(j))
            for i, j in enumerate(idx)]


def init_model(cfg: TrainConfig) -> Unet:
    return Unet(cfg.channels, stream(cfg.seed, STREAM_INIT))


def train(bases, cfg: TrainConfig, out_dir=None, model: Unet | None = None, adam: Adam | None = None,
          start_step: int = 0, callback=None):
    """Run the training loop; returns (model, adam, list of per-step records).

    With ``out_dir`` the loop writes ``log.jsonl`` (appending) and checkpoints
    ``ckpt_{step:06d}.glam`` at step 0 (fresh runs), every ``checkpoint_every``
    steps and at the end. Passing a model/adam/start_step resumes a run.
    """
    if not bases:
        raise ValueError("training needs at least one base image")
    model = init_model(cfg) if model is None else model
    adam = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps) if adam is None else adam
    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "log.jsonl", "a" if start_step else "w", encoding="utf-8")
        if start_step == 0:
            save_checkpoint(out / "ckpt_000000.glam", model, adam, {"step": 0})
    records = []
    n_steps = total_steps(len(bases), cfg)
    try:
        for step in range(start_step, n_steps):
            epoch, idx = batch_for_step(step, len(bases), cfg)
            pairs = make_batch(bases, idx, step, cfg)
            diag = train_step(model, adam, pairs, cfg, stream(cfg.seed, STREAM_MINING, step))
            diag.pop("targets")
            rec = dict(step=step, epoch=epoch, seed=cfg.seed, **diag)
            records.append(rec)
            if log_fh is not None:
                log_fh.write(json.dumps(rec) + "\n")
            if callback is not None:
                callback(rec)
            done = step + 1
            if out is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"ckpt_{done:06d}.glam", model, adam, {"step": done})
            log.debug("step %d loss %s tp %d", step, rec["loss"], rec["n_tp"])
        if out is not None and n_steps > start_step:
            save_checkpoint(out / f"ckpt_{n_steps:06d}.glam", model, adam, {"step": n_steps})
            save_checkpoint(out / "final.glam", model, adam, {"step": n_steps})
        elif out is not None and n_steps == 0:
            save_checkpoint(out / "final.glam", model, adam, {"step": 0})
    finally:
        if log_fh is not None:
            log_fh.close()
    return model, adam, records


def resume(bases, cfg: TrainConfig, checkpoint, out_dir=None, callback=None):
    model, adam, extra = load_checkpoint(checkpoint)
    step = int(extra.get("step", np.zeros(1))[0])
    if adam is None:
        adam = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return train(bases, cfg, out_dir, model, adam, start_step=step, callback=callback)
