"""Evaluation-robustness perturbations: additive Gaussian noise, square
occlusion patches, and biased test-set composition.

All three are pure functions of (input, parameters, generator); the bias
transform touches only the test list of a split manifest.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .data import SplitManifest

KINDS = ("none", "noise", "occlusion", "bias")


@dataclass
class PerturbSpec:
    kind: str = "none"
    noise_std: float = 0.1
    occlusion_fraction: float = 0.10
    bias_positive_fraction: float = 0.60
    seed: int = 7
    apply_in_training: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown perturbation kind '{self.kind}' (expected one of {KINDS})")
        for name in ("occlusion_fraction", "bias_positive_fraction"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie strictly inside (0, 1), got {v}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be non-negative, got {self.noise_std}")


def add_gaussian_noise(image: np.ndarray, std: float, rng: np.random.Generator) -> np.ndarray:
    """Per-pixel N(0, std) perturbation, clamped back into [0, 1]."""
    noise = rng.normal(0.0, std, size=image.shape)
    return np.clip(image + noise.astype(image.dtype), 0.0, 1.0)


def occlude(image: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Zero one square patch whose area is the rounded fraction of the image.

    The patch side is round(sqrt(fraction*H*W)); its position is uniform
    over fully in-bounds placements. Pixels outside the patch are untouched.
    """
    _, h, w = image.shape
    side = int(round(np.sqrt(fraction * h * w)))
    if side < 1:
        raise ValueError(f"occlusion fraction {fraction} selects no pixels on a {h}x{w} image")
    if side > h or side > w:
        raise ValueError(f"occlusion patch side {side} exceeds the {h}x{w} image")
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    out = image.copy()
    out[:, top: top + side, left: left + side] = 0.0
    return out


def occlusion_pixel_count(fraction: float, h: int, w: int) -> int:
    side = int(round(np.sqrt(fraction * h * w)))
    return side * side


def biased_test_composition(manifest: SplitManifest, labels: Mapping[str, int],
                            positive_fraction: float, rng: np.random.Generator,
                            size: int | None = None) -> SplitManifest:
    """Resample the test list to the requested positive/negative mix.

    Only ids already in the test pool are drawn from; train and validation
    lists pass through unchanged. When ``size`` is omitted, the largest test
    set achievable at the requested mix is used (a balanced pool recomposed
    to 60/40 keeps every positive and drops the surplus negatives).
    """
    pos_pool = [i for i in manifest.test if labels[i] == 1]
    neg_pool = [i for i in manifest.test if labels[i] == 0]

    def counts_for(s: int) -> tuple[int, int]:
        n_pos = int(round(positive_fraction * s))
        return n_pos, s - n_pos

    if size is None:
        size = min(int(len(pos_pool) / positive_fraction),
                   int(len(neg_pool) / (1.0 - positive_fraction)))
        while size > 0:
            n_pos, n_neg = counts_for(size)
            if n_pos <= len(pos_pool) and n_neg <= len(neg_pool):
                break
            size -= 1
    n_pos, n_neg = counts_for(size)
    if size < 1 or n_pos > len(pos_pool) or n_neg > len(neg_pool):
        raise ValueError(
            f"test pool holds {len(pos_pool)} positive / {len(neg_pool)} negative ids; "
            f"cannot compose {n_pos}/{n_neg}")
    picked_pos = [pos_pool[i] for i in rng.permutation(len(pos_pool))[:n_pos]]
    picked_neg = [neg_pool[i] for i in rng.permutation(len(neg_pool))[:n_neg]]
    test = picked_pos + picked_neg
    test = [test[i] for i in rng.permutation(len(test))]
    return SplitManifest(train=list(manifest.train), val=list(manifest.val), test=test,
                         seed=manifest.seed, ratios=manifest.ratios,
                         per_source_counts=manifest.per_source_counts)
