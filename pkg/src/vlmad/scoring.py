"""Score-map container and the scoring helpers shared by both pipelines."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor
import torch.nn.functional as F

from .errors import InputError

DEFAULT_TEMPERATURE = 100.0


@dataclass
class ScoreMap:
    """Per-pixel anomaly scores at image resolution plus an image-level scalar."""

    pixel_scores: np.ndarray  # (H, W) float64 in [0, 1]
    image_score: float

    def __post_init__(self) -> None:
        arr = np.asarray(self.pixel_scores, dtype=np.float64)
        if arr.ndim != 2:
            raise InputError(f"pixel_scores must be 2-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise InputError("pixel_scores contain non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise InputError("pixel_scores must lie in [0, 1]")
        if not (0.0 <= self.image_score <= 1.0) or not np.isfinite(self.image_score):
            raise InputError(f"image_score must lie in [0, 1], got {self.image_score}")
        self.pixel_scores = arr
        self.image_score = float(self.image_score)


def anomaly_probability(sim_normal: Tensor, sim_anomaly: Tensor, temperature: float) -> Tensor:
    """Two-way softmax at the anomaly coordinate: sigmoid(tau * (s_a - s_n))."""
    return torch.sigmoid(temperature * (sim_anomaly - sim_normal))


def upsample_bilinear_tensor(patch_scores: Tensor, size: tuple[int, int]) -> Tensor:
    """Bilinearly upsample an (R, C) patch score grid to (H, W); differentiable."""
    if patch_scores.ndim != 2:
        raise InputError(f"patch scores must be 2-D, got shape {tuple(patch_scores.shape)}")
    out = F.interpolate(
        patch_scores[None, None], size=size, mode="bilinear", align_corners=False
    )
    return out[0, 0]


def upsample_bilinear(patch_scores: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    t = torch.as_tensor(np.asarray(patch_scores, dtype=np.float64))
    return upsample_bilinear_tensor(t, size).numpy()
