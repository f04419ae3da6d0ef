"""Projective transforms: sampling, composition, point mapping and warping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_TINY = 1e-12


class Homography:
    """Invertible 3x3 projective transform, normalized so that m[2, 2] == 1."""

    __slots__ = ("m",)

    def __init__(self, m):
        m = np.array(m, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise ValueError("homography entries must be finite")
        if abs(m[2, 2]) > _TINY:
            m = m / m[2, 2]
        det = np.linalg.det(m)
        scale = np.abs(m).max()
        if scale == 0.0 or abs(det) <= _TINY * scale**3:
            raise ValueError("non-invertible transform")
        m.setflags(write=False)
        self.m = m

    @classmethod
    def identity(cls) -> Homography:
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> Homography:
        return cls([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])

    @classmethod
    def scaling(cls, sx: float, sy: float | None = None) -> Homography:
        sy = sx if sy is None else sy
        return cls([[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, 1.0]])

    def inverse(self) -> Homography:
        return Homography(np.linalg.inv(self.m))

    def __matmul__(self, other: Homography) -> Homography:
        return Homography(self.m @ other.m)

    def __call__(self, pts):
        return apply_points(self, pts)

    def __repr__(self):
        rows = "; ".join(" ".join(f"{v:.6g}" for v in row) for row in self.m)
        return f"Homography([{rows}])"


@dataclass(frozen=True)
class HomographySampleRanges:
    """Uniform sampling ranges for each elementary factor of a random homography.

    Defaults are the ranges used to synthesize training pairs from fundus images.
    """

    scale_min: float = 0.7
    scale_max: float = 1.3
    persp_min: float = 1e-6
    persp_max: float = 8e-4
    trans_max_x: float = 100.0
    trans_max_y: float = 100.0
    shear_min: float = -0.2
    shear_max: float = 0.2
    rot_max_deg: float = 25.0

    def __post_init__(self):
        for lo, hi in [
            (self.scale_min, self.scale_max),
            (self.persp_min, self.persp_max),
            (self.shear_min, self.shear_max),
        ]:
            if lo > hi:
                raise ValueError(f"range min {lo} exceeds max {hi}")
        if self.scale_min <= 0:
            raise ValueError("scale_min must be positive")
        if self.persp_min < 0:
            raise ValueError("perspective magnitudes must be non-negative")
        if self.trans_max_x < 0 or self.trans_max_y < 0:
            raise ValueError("translation bounds must be non-negative")
        if not 0 <= self.rot_max_deg < 90:
            raise ValueError("rot_max_deg must lie in [0, 90)")

    @classmethod
    def identity(cls) -> HomographySampleRanges:
        return cls(1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


def _as_h(h) -> Homography:
    return h if isinstance(h, Homography) else Homography(h)


def compose_pair(g_prime, g) -> Homography:
    """Transform mapping image warped by ``g`` onto the one warped by ``g_prime``."""
    g_prime, g = _as_h(g_prime), _as_h(g)
    return Homography(g_prime.m @ np.linalg.inv(g.m))


def sample_factors(ranges: HomographySampleRanges, rng: np.random.Generator) -> dict:
    """Draw the elementary parameters of one random homography.

    The draw order is fixed (rotation, scale, shear x/y, perspective x/y with
    signs, translation x/y) so that a seeded generator is reproducible.
    """
    r = ranges
    theta = rng.uniform(-r.rot_max_deg, r.rot_max_deg)
    scale = rng.uniform(r.scale_min, r.scale_max)
    shear_x = rng.uniform(r.shear_min, r.shear_max)
    shear_y = rng.uniform(r.shear_min, r.shear_max)
    px = rng.uniform(r.persp_min, r.persp_max) * rng.choice((-1.0, 1.0))
    py = rng.uniform(r.persp_min, r.persp_max) * rng.choice((-1.0, 1.0))
    tx = rng.uniform(-r.trans_max_x, r.trans_max_x)
    ty = rng.uniform(-r.trans_max_y, r.trans_max_y)
    return dict(rot_deg=theta, scale=scale, shear_x=shear_x, shear_y=shear_y,
                persp_x=px, persp_y=py, tx=tx, ty=ty)


def homography_from_factors(f: dict, center) -> Homography:
    """Build T . P . Sh . Sc . Rot, with everything but T pivoting on ``center``."""
    cx, cy = center
    t = math.radians(f["rot_deg"])
    c, s = math.cos(t), math.sin(t)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    sc = np.diag([f["scale"], f["scale"], 1.0])
    sh = np.array([[1.0, f["shear_x"], 0.0], [f["shear_y"], 1.0, 0.0], [0.0, 0.0, 1.0]])
    persp = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [f["persp_x"], f["persp_y"], 1.0]])
    to_c = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    from_c = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    trans = np.array([[1.0, 0.0, f["tx"]], [0.0, 1.0, f["ty"]], [0.0, 0.0, 1.0]])
    return Homography(trans @ to_c @ persp @ sh @ sc @ rot @ from_c)


def sample_homography(ranges: HomographySampleRanges, center, rng: np.random.Generator) -> Homography:
    return homography_from_factors(sample_factors(ranges, rng), center)


def apply(h, p) -> tuple[float, float]:
    """Map a single point; raises if it lands on the line at infinity."""
    m = _as_h(h).m
    x, y = float(p[0]), float(p[1])
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if abs(w) <= _TINY:
        raise ValueError("point at infinity")
    return ((m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w,
            (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w)


def apply_points(h, pts) -> np.ndarray:
    """Vectorized ``apply`` for an (N, 2) array of points."""
    m = _as_h(h).m
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    w = pts @ m[2, :2] + m[2, 2]
    if np.any(np.abs(w) <= _TINY):
        raise ValueError("point at infinity")
    xy = pts @ m[:2, :2].T + m[:2, 2]
    return xy / w[:, None]


def warp_image(src: np.ndarray, h, out_w: int, out_h: int, fill: float = 0.0) -> np.ndarray:
    """Warp ``src`` by ``h`` (source -> output coordinates) with bilinear sampling.

    Every output pixel q reads ``src`` at h^-1 q. Samples that fall outside the
    source pixel lattice get ``fill``.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError("output dimensions must be >= 1")
    src = np.asarray(src, dtype=np.float64)
    sh, sw = src.shape
    inv = np.linalg.inv(_as_h(h).m)
    ys, xs = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    den = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / den
        sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / den
    # tolerance absorbs round-off for points exactly on the last row/column
    tol = 1e-9
    valid = (np.abs(den) > _TINY) & (sx >= -tol) & (sx <= sw - 1 + tol) & (sy >= -tol) & (sy <= sh - 1 + tol)
    sx = np.where(valid, np.clip(sx, 0, sw - 1), 0.0)
    sy = np.where(valid, np.clip(sy, 0, sh - 1), 0.0)
    x0 = np.minimum(np.floor(sx).astype(np.intp), max(sw - 2, 0))
    y0 = np.minimum(np.floor(sy).astype(np.intp), max(sh - 2, 0))
    x1 = np.minimum(x0 + 1, sw - 1)
    y1 = np.minimum(y0 + 1, sh - 1)
    fx = sx - x0
    fy = sy - y0
    out = ((1 - fy) * ((1 - fx) * src[y0, x0] + fx * src[y0, x1])
           + fy * ((1 - fx) * src[y1, x0] + fx * src[y1, x1]))
    return np.where(valid, out, fill)


def failure_decompose(h) -> dict:
    """Flip flag and isotropic scale of the affine block of ``h``."""
    a = _as_h(h).m[:2, :2]
    det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    return {"flip": bool(det < 0), "scale": math.sqrt(abs(det))}


def corner_error(h_est, h_gt, w: int, h: int) -> float:
    """Max displacement between the two transforms over the image corners."""
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    return float(np.max(np.linalg.norm(apply_points(h_est, corners) - apply_points(h_gt, corners), axis=1)))


def write_homography(h, path) -> None:
    from .imaging import atomic_write_bytes

    m = _as_h(h).m
    atomic_write_bytes(path, (" ".join(f"{v:.17g}" for v in m.ravel()) + "\n").encode("ascii"))


def read_homography(path) -> Homography:
    tokens = Path(path).read_text(encoding="ascii").split()
    if len(tokens) != 9:
        raise ValueError(f"{path}: expected 9 numbers, found {len(tokens)}")
    return Homography([float(t) for t in tokens])
