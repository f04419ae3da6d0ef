"""Learned keypoint detection from a matching reward.

Library layout: ``geometry`` (homographies), ``imaging`` (I/O, augmentation,
preprocessing), ``net`` (numpy Unet + Adam), ``features`` (NMS, root-SIFT),
``matching``, ``training``, ``registration`` (RANSAC + metrics),
``evaluation``, ``mosaic`` and ``cli``.
"""

from .detector import Detector, match_descriptors
from .geometry import Homography, HomographySampleRanges, compose_pair, sample_homography, warp_image
from .net import Adam, Unet, load_checkpoint, save_checkpoint
from .training import TrainConfig, desk_config, generate_pair, train

__version__ = "0.1.0"

__all__ = ["Detector", "match_descriptors", "Homography", "HomographySampleRanges", "compose_pair",
           "sample_homography", "warp_image", "Adam", "Unet", "load_checkpoint", "save_checkpoint",
           "TrainConfig", "desk_config", "generate_pair", "train"]
