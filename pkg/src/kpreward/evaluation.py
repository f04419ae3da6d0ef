"""Pairwise registration and dataset-level evaluation reports."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .detector import Detector, match_descriptors
from .geometry import read_homography
from .imaging import atomic_write_bytes, load_image
from .matching import verify
from .registration import (ACCEPTABLE, CLASSES, FAILED, INACCURATE, DEFAULT_T_GRID, RegistrationResult,
                           auc_nndr, classify_registration, coverage_fraction, m_score,
                           ransac_homography, repeatability)


@dataclass
class EvalConfig:
    ratio: float = 0.8
    matcher: str = "nndr"
    eps: float = 3.0
    coverage_radius: float = 25.0
    ransac_iters: int = 1000
    ransac_thresh: float = 3.0


def register_pair(detector: Detector, img_a, img_b, rng: np.random.Generator, cfg: EvalConfig | None = None):
    """Estimate the homography a -> b. Returns (h_est or None, details dict)."""
    cfg = cfg or EvalConfig()
    kps_a, desc_a = detector.detect(img_a)
    kps_b, desc_b = detector.detect(img_b)
    matches = match_descriptors(desc_a, desc_b, cfg.matcher, cfg.ratio)
    found = ransac_homography(matches, kps_a, kps_b, rng, cfg.ransac_iters, cfg.ransac_thresh)
    h_est, inliers = (None, np.zeros(0, dtype=np.intp)) if found is None else found
    return h_est, dict(kps_a=kps_a, kps_b=kps_b, desc_a=desc_a, desc_b=desc_b, matches=matches, inliers=inliers)


def evaluate_pair(detector: Detector, img_a, img_b, h_gt, rng: np.random.Generator,
                  cfg: EvalConfig | None = None, pair_id=None) -> dict:
    cfg = cfg or EvalConfig()
    h_est, d = register_pair(detector, img_a, img_b, rng, cfg)
    ha, wa = np.shape(img_a)
    res: RegistrationResult = classify_registration(h_est, h_gt, wa, ha)
    is_tp = verify(d["matches"], d["kps_a"], d["kps_b"], h_gt, cfg.eps)
    n_tp = int(is_tp.sum())
    tp_pts = d["kps_a"][d["matches"].idx_a[is_tp], :2]
    shape_b = np.shape(img_b)
    return {
        "pair_id": pair_id,
        "class": res.klass,
        "mee": res.mee,
        "mae": res.mae,
        "repeatability": repeatability(d["kps_a"], d["kps_b"], h_gt, (ha, wa), shape_b, cfg.eps),
        "m_score": m_score(n_tp, d["kps_a"], d["kps_b"], h_gt, (ha, wa), shape_b),
        "coverage": coverage_fraction(tp_pts, wa, ha, cfg.coverage_radius),
        "auc": auc_nndr(d["desc_a"], d["desc_b"], d["kps_a"], d["kps_b"], h_gt, cfg.eps, DEFAULT_T_GRID),
        "n_kp": int(len(d["kps_a"]) + len(d["kps_b"])),
        "n_matches": int(len(d["matches"])),
        "n_tp": n_tp,
        "h_est": None if h_est is None else h_est.m.ravel().tolist(),
    }


def summarize(records) -> dict:
    n = len(records)
    out = {"n_pairs": n}
    for klass, key in ((FAILED, "failed_pct"), (INACCURATE, "inaccurate_pct"), (ACCEPTABLE, "acceptable_pct")):
        out[key] = 100.0 * sum(r["class"] == klass for r in records) / n if n else 0.0
    means = {}
    for key in ("repeatability", "m_score", "coverage", "auc", "n_kp", "n_matches", "n_tp"):
        means[key] = float(np.mean([r[key] for r in records])) if n else 0.0
    for key in ("mee", "mae"):
        vals = [r[key] for r in records if r[key] is not None and np.isfinite(r[key])]
        means[key] = float(np.mean(vals)) if vals else None
    out["means"] = means
    return out


_PAIR_RE = re.compile(r"^pair_(\d+)_a\.(pgm|ppm)$")


def find_pairs(directory) -> list[tuple[str, Path, Path, Path]]:
    """(pair_id, image a, image b, homography file) for every complete triplet."""
    directory = Path(directory)
    found = []
    for p in sorted(directory.iterdir()):
        m = _PAIR_RE.match(p.name)
        if not m:
            continue
        pid = m.group(1)
        b = directory / f"pair_{pid}_b.{m.group(2)}"
        h = directory / f"pair_{pid}_h.txt"
        if b.exists() and h.exists():
            found.append((pid, p, b, h))
    return found


def _gray(img):
    return img[..., 1] if np.ndim(img) == 3 else img


def evaluate_directory(detector: Detector, directory, rng_for_pair, cfg: EvalConfig | None = None) -> dict:
    records = []
    for pid, pa, pb, ph in find_pairs(directory):
        rec = evaluate_pair(detector, _gray(load_image(pa)), _gray(load_image(pb)), read_homography(ph),
                            rng_for_pair(int(pid)), cfg, pair_id=pid)
        records.append(rec)
    return {"pairs": records, "summary": summarize(records)}


def write_report(path, report: dict) -> None:
    atomic_write_bytes(path, (json.dumps(report, indent=2) + "\n").encode("utf-8"))


__all__ = ["EvalConfig", "register_pair", "evaluate_pair", "summarize", "find_pairs",
           "evaluate_directory", "write_report", "CLASSES"]
