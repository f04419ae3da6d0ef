"""Keypoint extraction from score maps and upright root-SIFT description.

Keypoints are (K, 3) float arrays with columns x, y, score; x and y are integer
pixel centers. Descriptors are (K, 128) float arrays.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

PATCH = 16
GRID = 4
BINS = 8
SIGMA = 8.0
CLAMP = 0.2


def nms(score_map, window: int = 10, threshold: float = 0.0, max_kp: int = 1000) -> np.ndarray:
    """Greedy non-maximum suppression with a square (Chebyshev) radius ``window``.

    Candidates at or above ``threshold`` are visited by decreasing score (ties:
    lower row-major index first); an accepted point suppresses every candidate
    within Chebyshev distance ``window``.
    """
    if window < 1:
        raise ValueError("NMS window must be >= 1")
    s = np.asarray(score_map, dtype=np.float64)
    h, w = s.shape
    flat = s.ravel()
    cand = np.flatnonzero(flat >= threshold)
    # stable sort on -score keeps ascending index among ties
    order = cand[np.argsort(-flat[cand], kind="stable")]
    free = np.ones((h, w), dtype=bool)
    kept = []
    for idx in order:
        y, x = divmod(int(idx), w)
        if not free[y, x]:
            continue
        kept.append((x, y, flat[idx]))
        if len(kept) >= max_kp:
            break
        free[max(0, y - window):y + window + 1, max(0, x - window):x + window + 1] = False
    return np.array(kept, dtype=np.float64).reshape(-1, 3)


def image_gradients(img):
    """Central differences with replicated borders; returns (gx, gy)."""
    p = np.pad(np.asarray(img, dtype=np.float64), 1, mode="edge")
    gx = (p[1:-1, 2:] - p[1:-1, :-2]) / 2.0
    gy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2.0
    return gx, gy


def _patch_weights():
    """Bilinear spatial-cell weights and Gaussian weight for the 16x16 support.

    Pixel offsets run -8..7 around the keypoint; each pixel center sits at
    offset + 0.5 relative to the patch center, so the layout is symmetric.
    """
    u = np.arange(PATCH) - PATCH // 2 + 0.5
    cell = (u + PATCH / 2) / (PATCH / GRID) - 0.5  # continuous cell coordinate
    c0 = np.floor(cell).astype(np.intp)
    f = cell - c0
    gauss = np.exp(-(u[:, None] ** 2 + u[None, :] ** 2) / (2 * SIGMA**2))
    return c0, f, gauss


_C0, _CF, _GAUSS = _patch_weights()


def raw_histograms(gx, gy, kps) -> np.ndarray:
    """Unnormalized (K, 4, 4, 8) orientation histograms around each keypoint."""
    kps = np.asarray(kps, dtype=np.float64).reshape(-1, 3)
    k = len(kps)
    h, w = gx.shape
    r = PATCH // 2
    off = np.arange(PATCH) - r
    xs = np.clip(kps[:, 0].astype(np.intp)[:, None] + off, 0, w - 1)
    ys = np.clip(kps[:, 1].astype(np.intp)[:, None] + off, 0, h - 1)
    # gradients of replicated-border pixels: clamping the sample location
    pgx = gx[ys[:, :, None], xs[:, None, :]]
    pgy = gy[ys[:, :, None], xs[:, None, :]]
    mag = np.hypot(pgx, pgy) * _GAUSS
    ang = np.mod(np.arctan2(pgy, pgx), 2 * np.pi) * (BINS / (2 * np.pi))
    b0 = np.floor(ang).astype(np.intp) % BINS
    bf = ang - np.floor(ang)

    hist = np.zeros((k, GRID + 2, GRID + 2, BINS))
    kk = np.broadcast_to(np.arange(k)[:, None, None], mag.shape)
    for dy in (0, 1):
        wy = (_CF if dy else 1 - _CF)[None, :, None]
        cy = (_C0 + dy + 1)[None, :, None]
        for dx in (0, 1):
            wx = (_CF if dx else 1 - _CF)[None, None, :]
            cx = (_C0 + dx + 1)[None, None, :]
            for db in (0, 1):
                wb = bf if db else 1 - bf
                np.add.at(hist, (kk, np.broadcast_to(cy, mag.shape), np.broadcast_to(cx, mag.shape),
                                 (b0 + db) % BINS), mag * wy * wx * wb)
    return hist[:, 1:-1, 1:-1, :]


def root_sift(hist) -> np.ndarray:
    """SIFT normalization (L2, clamp, L2) followed by L1 normalization and sqrt."""
    d = np.asarray(hist, dtype=np.float64).reshape(len(hist), -1)
    out = np.zeros_like(d)
    norm = np.linalg.norm(d, axis=1)
    ok = norm > 1e-12
    v = d[ok] / norm[ok, None]
    v = np.minimum(v, CLAMP)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    v /= v.sum(axis=1, keepdims=True)
    out[ok] = np.sqrt(v)
    return out


def describe(img, kps) -> np.ndarray:
    """Upright 128-d root-SIFT descriptors for keypoints on a gray image."""
    kps = np.asarray(kps, dtype=np.float64).reshape(-1, 3)
    if len(kps) == 0:
        return np.zeros((0, GRID * GRID * BINS))
    gx, gy = image_gradients(img)
    return root_sift(raw_histograms(gx, gy, kps))


def write_keypoints(path, kps, desc) -> None:
    kps = np.asarray(kps).reshape(-1, 3)
    lines = []
    for (x, y, s), d in zip(kps, desc):
        lines.append(" ".join([f"{int(x)}", f"{int(y)}", f"{s:.17g}"] + [f"{v:.17g}" for v in d]))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="ascii")


def read_keypoints(path):
    rows = [line.split() for line in Path(path).read_text(encoding="ascii").splitlines() if line.strip()]
    if any(len(r) != 3 + GRID * GRID * BINS for r in rows):
        raise ValueError(f"{path}: every line needs x y score and 128 descriptor values")
    arr = np.array(rows, dtype=np.float64).reshape(-1, 3 + GRID * GRID * BINS)
    return arr[:, :3].copy(), arr[:, 3:].copy()
