"""Homography estimation (normalized DLT + RANSAC) and registration metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Homography, apply_points, failure_decompose
from .matching import Matches, nndr_match, verify

FAILED, INACCURATE, ACCEPTABLE = "failed", "inaccurate", "acceptable"
CLASSES = (FAILED, INACCURATE, ACCEPTABLE)
MEE_MAX = 10.0
MAE_MAX = 30.0
SCALE_MIN = 0.1
SCALE_MAX = 4.0
REFERENCE_POINTS = np.array([(0.25, 0.25), (0.5, 0.25), (0.75, 0.25),
                             (0.25, 0.75), (0.5, 0.75), (0.75, 0.75)])


class DegenerateSample(ValueError):
    pass


def _normalizer(pts):
    """Similarity taking points to zero centroid and RMS distance sqrt(2)."""
    c = pts.mean(axis=0)
    rms = np.sqrt(((pts - c) ** 2).sum(axis=1).mean())
    if rms < 1e-12:
        raise DegenerateSample("degenerate sample")
    s = np.sqrt(2.0) / rms
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def _has_collinear_triple(pts, tol=1e-6):
    n = len(pts)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                a, b, c = pts[i], pts[j], pts[k]
                area = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
                if abs(area) < tol:
                    return True
    return False


def dlt_homography(src, dst) -> Homography:
    """Hartley-normalized direct linear transform from >= 4 correspondences."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4 or len(dst) != n:
        raise ValueError(f"need >= 4 matched point pairs, got {n}/{len(dst)}")
    ts, td = _normalizer(src), _normalizer(dst)
    ps = src @ ts[:2, :2].T + ts[:2, 2]
    pd = dst @ td[:2, :2].T + td[:2, 2]
    if n == 4 and (_has_collinear_triple(ps) or _has_collinear_triple(pd)):
        raise DegenerateSample("degenerate sample")
    a = np.zeros((2 * n, 9))
    x, y = ps[:, 0], ps[:, 1]
    u, v = pd[:, 0], pd[:, 1]
    a[0::2, 0], a[0::2, 1], a[0::2, 2] = x, y, 1.0
    a[0::2, 6], a[0::2, 7], a[0::2, 8] = -u * x, -u * y, -u
    a[1::2, 3], a[1::2, 4], a[1::2, 5] = x, y, 1.0
    a[1::2, 6], a[1::2, 7], a[1::2, 8] = -v * x, -v * y, -v
    _, sv, vt = np.linalg.svd(a)
    if sv[7] < 1e-10 * sv[0]:
        raise DegenerateSample("degenerate sample")
    hn = vt[-1].reshape(3, 3)
    m = np.linalg.inv(td) @ hn @ ts
    try:
        return Homography(m)
    except ValueError:
        raise DegenerateSample("degenerate sample") from None


def reprojection_errors(h, src, dst) -> np.ndarray:
    try:
        return np.linalg.norm(apply_points(h, src) - dst, axis=1)
    except ValueError:
        return np.full(len(src), np.inf)


def _normalizers_batch(pts):
    """Per-sample version of ``_normalizer`` for (K, n, 2) stacks; scale 0 marks degeneracy."""
    c = pts.mean(axis=1)
    rms = np.sqrt(((pts - c[:, None]) ** 2).sum(axis=2).mean(axis=1))
    ok = rms >= 1e-12
    s = np.where(ok, np.sqrt(2.0) / np.where(ok, rms, 1.0), 0.0)
    t = np.zeros((len(pts), 3, 3))
    t[:, 0, 0] = t[:, 1, 1] = s
    t[:, 0, 2] = -s * c[:, 0]
    t[:, 1, 2] = -s * c[:, 1]
    t[:, 2, 2] = 1.0
    return t, ok


def _collinear_batch(pts, tol=1e-6):
    bad = np.zeros(len(pts), dtype=bool)
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b, c = pts[:, i], pts[:, j], pts[:, k]
        area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        bad |= np.abs(area) < tol
    return bad


def dlt_minimal_batch(src, dst):
    """``dlt_homography`` on K four-point samples at once.

    ``src`` and ``dst`` are (K, 4, 2). Returns (K, 3, 3) matrices scaled so
    that m[2, 2] = 1 and a boolean mask of the samples that are not degenerate.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    k = len(src)
    ts, ok_s = _normalizers_batch(src)
    td, ok_d = _normalizers_batch(dst)
    ps = np.einsum("kij,knj->kni", ts[:, :2, :2], src) + ts[:, None, :2, 2]
    pd = np.einsum("kij,knj->kni", td[:, :2, :2], dst) + td[:, None, :2, 2]
    ok = ok_s & ok_d & ~_collinear_batch(ps) & ~_collinear_batch(pd)
    a = np.zeros((k, 8, 9))
    x, y = ps[..., 0], ps[..., 1]
    u, v = pd[..., 0], pd[..., 1]
    a[:, 0::2, 0], a[:, 0::2, 1], a[:, 0::2, 2] = x, y, 1.0
    a[:, 0::2, 6], a[:, 0::2, 7], a[:, 0::2, 8] = -u * x, -u * y, -u
    a[:, 1::2, 3], a[:, 1::2, 4], a[:, 1::2, 5] = x, y, 1.0
    a[:, 1::2, 6], a[:, 1::2, 7], a[:, 1::2, 8] = -v * x, -v * y, -v
    # full_matrices keeps the null vector as the last row of vt
    _, sv, vt = np.linalg.svd(a)
    ok &= sv[:, 7] >= 1e-10 * sv[:, 0]
    hn = vt[:, -1].reshape(k, 3, 3)
    td_inv = np.zeros_like(td)
    with np.errstate(divide="ignore", invalid="ignore"):
        sd = 1.0 / td[:, 0, 0]
        td_inv[:, 0, 0] = td_inv[:, 1, 1] = sd
        td_inv[:, 0, 2] = -td[:, 0, 2] * sd
        td_inv[:, 1, 2] = -td[:, 1, 2] * sd
        td_inv[:, 2, 2] = 1.0
        m = td_inv @ hn @ ts
        # same normalization and invertibility rule as Homography
        m22 = m[:, 2, 2]
        m = np.where((np.abs(m22) > 1e-12)[:, None, None], m / np.where(m22 == 0, 1.0, m22)[:, None, None], m)
    ok &= np.isfinite(m).all(axis=(1, 2))
    m[~ok] = np.eye(3)
    scale = np.abs(m).max(axis=(1, 2))
    ok &= np.abs(np.linalg.det(m)) > 1e-12 * scale**3
    m[~ok] = np.eye(3)
    return m, ok


def ransac_homography(matches: Matches, kps_a, kps_b, rng: np.random.Generator,
                      iters: int = 1000, inlier_thresh: float = 3.0):
    """Robust homography from matched keypoints (a -> b).

    Draws ``iters`` random 4-subsets, fits each by normalized DLT, keeps the
    first model with the most inliers (reprojection error <= ``inlier_thresh``)
    and refits on its inlier set. Returns (homography, inlier indices into
    ``matches``) or None when fewer than 4 matches exist or no model reaches 4
    inliers.
    """
    n = len(matches)
    if n < 4:
        return None
    src = np.asarray(kps_a, dtype=np.float64)[matches.idx_a, :2]
    dst = np.asarray(kps_b, dtype=np.float64)[matches.idx_b, :2]
    samples = np.stack([rng.choice(n, size=4, replace=False) for _ in range(iters)])
    hs, ok = dlt_minimal_batch(src[samples], dst[samples])
    best, best_count = None, 0
    src_h = np.column_stack([src, np.ones(n)])
    # score hypotheses in chunks to bound memory on large match sets
    chunk = max(1, 2_000_000 // (3 * n))
    for c0 in range(0, iters, chunk):
        proj = hs[c0:c0 + chunk] @ src_h.T  # (k, 3, n)
        w = proj[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            err = np.hypot(proj[:, 0] / w - dst[:, 0], proj[:, 1] / w - dst[:, 1])
        err[~np.isfinite(err) | (np.abs(w) < 1e-12)] = np.inf
        inl = err <= inlier_thresh
        counts = np.where(ok[c0:c0 + chunk], inl.sum(axis=1), 0)
        j = int(np.argmax(counts))
        if counts[j] > best_count:
            best, best_count = inl[j], int(counts[j])
    if best is None or best_count < 4:
        return None
    idx = np.flatnonzero(best)
    try:
        h = dlt_homography(src[idx], dst[idx])
    except DegenerateSample:
        return None
    return h, idx


@dataclass
class RegistrationResult:
    h_est: Homography | None
    klass: str
    mee: float | None = None
    mae: float | None = None
    inliers: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))


def is_failed_transform(h) -> bool:
    if h is None:
        return True
    dec = failure_decompose(h)
    return dec["flip"] or not SCALE_MIN <= dec["scale"] <= SCALE_MAX


def reference_points(width, height) -> np.ndarray:
    return REFERENCE_POINTS * np.array([width, height], dtype=np.float64)


def classify_registration(h_est, h_gt, width: int, height: int) -> RegistrationResult:
    if is_failed_transform(h_est):
        return RegistrationResult(h_est, FAILED)
    pts = reference_points(width, height)
    try:
        d = np.linalg.norm(apply_points(h_est, pts) - apply_points(h_gt, pts), axis=1)
    except ValueError:
        d = np.full(len(pts), np.inf)
    mee = float(np.median(d))
    mae = float(d.max())
    klass = ACCEPTABLE if (mee < MEE_MAX and mae < MAE_MAX) else INACCURATE
    return RegistrationResult(h_est, klass, mee, mae)


# ---------------------------------------------------------------------------
# detector metrics

def _inside(pts, width, height):
    return (pts[:, 0] >= 0) & (pts[:, 0] <= width - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= height - 1)


def shared_region(kps_a, kps_b, h_gt, shape_a, shape_b):
    """Boolean masks of keypoints whose projection lands inside the other image.

    ``shape_*`` are (height, width).
    """
    xa = np.asarray(kps_a, dtype=np.float64).reshape(-1, 3)[:, :2]
    xb = np.asarray(kps_b, dtype=np.float64).reshape(-1, 3)[:, :2]
    ha, wa = shape_a
    hb, wb = shape_b
    in_a = _inside(apply_points(h_gt, xa), wb, hb) if len(xa) else np.zeros(0, bool)
    in_b = _inside(apply_points(h_gt.inverse(), xb), wa, ha) if len(xb) else np.zeros(0, bool)
    return in_a, in_b


def repeatability(kps_a, kps_b, h_gt, shape_a, shape_b, eps: float = 3.0) -> float:
    """Bidirectional repeatability over the shared region.

    A point of I counts when some shared point of I' lies within ``eps`` of its
    projection (measured in I'); a point of I' counts when some shared point of
    I lies within ``eps`` of its back-projection (measured in I).
    """
    in_a, in_b = shared_region(kps_a, kps_b, h_gt, shape_a, shape_b)
    pa = np.asarray(kps_a, dtype=np.float64).reshape(-1, 3)[in_a, :2]
    pb = np.asarray(kps_b, dtype=np.float64).reshape(-1, 3)[in_b, :2]
    denom = len(pa) + len(pb)
    if denom == 0:
        return 0.0
    if len(pa) == 0 or len(pb) == 0:
        return 0.0
    fwd = np.linalg.norm(apply_points(h_gt, pa)[:, None, :] - pb[None, :, :], axis=2)
    bwd = np.linalg.norm(pa[:, None, :] - apply_points(h_gt.inverse(), pb)[None, :, :], axis=2)
    count = int((fwd < eps).any(axis=1).sum()) + int((bwd < eps).any(axis=0).sum())
    return count / denom


def m_score(n_tp: int, kps_a, kps_b, h_gt, shape_a, shape_b) -> float:
    in_a, in_b = shared_region(kps_a, kps_b, h_gt, shape_a, shape_b)
    denom = int(in_a.sum() + in_b.sum())
    return 0.0 if denom == 0 else min(1.0, n_tp / denom)


def coverage_fraction(tp_points, width: int, height: int, radius: float = 25.0) -> float:
    """Fraction of pixels within ``radius`` of at least one true-positive keypoint."""
    pts = np.asarray(tp_points, dtype=np.float64)
    if pts.size == 0:
        return 0.0
    pts = pts.reshape(len(pts), -1)
    covered = np.zeros((height, width), dtype=bool)
    r = int(np.ceil(radius))
    for x, y in pts[:, :2]:
        x0, x1 = max(0, int(np.floor(x)) - r), min(width, int(np.ceil(x)) + r + 1)
        y0, y1 = max(0, int(np.floor(y)) - r), min(height, int(np.ceil(y)) + r + 1)
        if x0 >= x1 or y0 >= y1:
            continue
        yy, xx = np.mgrid[y0:y1, x0:x1]
        covered[y0:y1, x0:x1] |= (xx - x) ** 2 + (yy - y) ** 2 <= radius * radius
    return float(covered.mean())


DEFAULT_T_GRID = tuple(np.round(np.arange(1, 21) * 0.05, 2))


def nndr_curve(desc_a, desc_b, kps_a, kps_b, h_gt, eps: float = 3.0, t_grid=DEFAULT_T_GRID):
    """(t, n_tp, n_fp) for every ratio threshold of the grid."""
    rows = []
    for t in t_grid:
        m = nndr_match(desc_a, desc_b, t)
        tp = verify(m, kps_a, kps_b, h_gt, eps)
        rows.append((t, int(tp.sum()), int(len(m) - tp.sum())))
    return rows


def auc_nndr(desc_a, desc_b, kps_a, kps_b, h_gt, eps: float = 3.0, t_grid=DEFAULT_T_GRID) -> float:
    """Area under the (false-match fraction, normalized true-match count) curve.

    For each ratio t: x = FP / (TP + FP) (0 without matches) and y = TP / C,
    C being the largest match count over the grid. Points are sorted by x,
    closed with (0, 0) and (1, y_max), and integrated with the trapezoid rule.
    """
    grid = np.asarray(t_grid, dtype=np.float64)
    if np.any(np.diff(grid) <= 0) or grid[0] <= 0 or grid[-1] > 1:
        raise ValueError("t grid must be strictly increasing within (0, 1]")
    rows = nndr_curve(desc_a, desc_b, kps_a, kps_b, h_gt, eps, grid)
    c = max(tp + fp for _, tp, fp in rows)
    if c == 0:
        return 0.0
    pts = sorted(((fp / (tp + fp) if tp + fp else 0.0), tp / c) for _, tp, fp in rows)
    y_max = max(y for _, y in pts)
    curve = [(0.0, 0.0)] + pts + [(1.0, y_max)]
    xs = np.array([p[0] for p in curve])
    ys = np.array([p[1] for p in curve])
    return float(np.clip(np.sum(np.diff(xs) * (ys[1:] + ys[:-1]) / 2.0), 0.0, 1.0))
