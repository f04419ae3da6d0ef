"""Score-map detector + root-SIFT front end shared by evaluation and mosaicking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import describe, nms
from .matching import Matches, cross_check_match, nndr_match
from .net import Unet


@dataclass
class Detector:
    model: Unet
    nms_window: int = 10
    threshold: float = 0.0
    max_kp: int = 1000

    def detect(self, img):
        """Keypoints (K, 3) and descriptors (K, 128) for one gray image."""
        scores = self.model.score_map(img)
        kps = nms(scores, self.nms_window, self.threshold, self.max_kp)
        return kps, describe(img, kps)


def match_descriptors(desc_a, desc_b, method: str = "nndr", ratio: float = 0.8) -> Matches:
    if method == "nndr":
        return nndr_match(desc_a, desc_b, ratio)
    if method == "cross_check":
        return cross_check_match(desc_a, desc_b)
    raise ValueError(f"unknown matching method {method!r}")
