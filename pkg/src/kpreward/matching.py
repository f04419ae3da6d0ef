"""Brute-force descriptor matching and ground-truth verification."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .geometry import apply_points


@dataclass
class Matches:
    idx_a: np.ndarray
    idx_b: np.ndarray
    dist: np.ndarray

    def __len__(self):
        return len(self.idx_a)

    @classmethod
    def empty(cls) -> Matches:
        return cls(np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp), np.zeros(0))

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.idx_a.tolist(), self.idx_b.tolist()))

    def subset(self, sel) -> Matches:
        return Matches(self.idx_a[sel], self.idx_b[sel], self.dist[sel])


def _usable(desc) -> np.ndarray:
    # zero descriptors come from flat patches and never match
    return np.flatnonzero(np.any(desc != 0, axis=1))


def pairwise_distances(a, b) -> np.ndarray:
    # direct differences: exact zeros for duplicates, unlike the dot-product expansion
    return cdist(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64))


def cross_check_match(desc_a, desc_b) -> Matches:
    """Mutual nearest neighbors under L2 distance (ties go to the lower index)."""
    desc_a = np.asarray(desc_a, dtype=np.float64).reshape(-1, 128)
    desc_b = np.asarray(desc_b, dtype=np.float64).reshape(-1, 128)
    ia, ib = _usable(desc_a), _usable(desc_b)
    if len(ia) == 0 or len(ib) == 0:
        return Matches.empty()
    d = pairwise_distances(desc_a[ia], desc_b[ib])
    nn_ab = d.argmin(axis=1)  # argmin returns the first minimum
    nn_ba = d.argmin(axis=0)
    keep = nn_ba[nn_ab] == np.arange(len(ia))
    rows = np.flatnonzero(keep)
    return Matches(ia[rows], ib[nn_ab[rows]], d[rows, nn_ab[rows]])


def nndr_match(desc_a, desc_b, ratio: float) -> Matches:
    """Nearest-neighbor distance-ratio matching: keep i -> nn(i) when d1/d2 < ratio.

    With a single usable candidate, d2 is taken as +inf (ratio 0, accepted).
    """
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")
    desc_a = np.asarray(desc_a, dtype=np.float64).reshape(-1, 128)
    desc_b = np.asarray(desc_b, dtype=np.float64).reshape(-1, 128)
    ia, ib = _usable(desc_a), _usable(desc_b)
    if len(ia) == 0 or len(ib) == 0:
        return Matches.empty()
    d = pairwise_distances(desc_a[ia], desc_b[ib])
    nn = d.argmin(axis=1)
    d1 = d[np.arange(len(ia)), nn]
    if len(ib) < 2:
        keep = np.ones(len(ia), dtype=bool)
    else:
        d2 = np.partition(d, 1, axis=1)[:, 1]
        # d1 < ratio * d2 avoids 0/0 for duplicated vectors
        keep = d1 < ratio * d2
    rows = np.flatnonzero(keep)
    return Matches(ia[rows], ib[nn[rows]], d1[rows])


def verify(matches: Matches, kps_a, kps_b, h_gt, eps: float = 3.0) -> np.ndarray:
    """Boolean true-positive flag per match: ||H x_a - x_b|| <= eps."""
    if len(matches) == 0:
        return np.zeros(0, dtype=bool)
    xa = np.asarray(kps_a)[matches.idx_a, :2]
    xb = np.asarray(kps_b)[matches.idx_b, :2]
    return np.linalg.norm(apply_points(h_gt, xa) - xb, axis=1) <= eps


def write_match_dump(path, matches: Matches, is_tp) -> None:
    lines = [f"{a} {b} {d:.17g} {'true_positive' if t else 'false_positive'}"
             for a, b, d, t in zip(matches.idx_a, matches.idx_b, matches.dist, is_tp)]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="ascii")
