"""Two-view patch augmentation: 90-degree rotations, flips, color jitter, blur."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..exceptions import ConfigurationError


@dataclass(frozen=True)
class AugmentationConfig:
    rotations: tuple[int, ...] = (0, 90, 180, 270)
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    blur_sigma: tuple[float, float] = (0.1, 2.0)
    blur_p: float = 0.5
    # blur sigmas are given for patches of this side; smaller inputs scale them down
    blur_reference_px: int = 224

    def __post_init__(self):
        for name in ("hflip_p", "vflip_p", "blur_p"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} must be a probability")
        if not self.rotations or any(r % 90 for r in self.rotations):
            raise ConfigurationError("rotations must be a nonempty set of multiples of 90")
        for name in ("brightness", "contrast", "saturation"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigurationError(f"{name} jitter strength must lie in [0, 1]")
        lo, hi = self.blur_sigma
        if not 0.0 < lo <= hi:
            raise ConfigurationError("blur_sigma must be an increasing positive pair")

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(rotations=(0,), hflip_p=0.0, vflip_p=0.0, brightness=0.0, contrast=0.0,
                   saturation=0.0, blur_p=0.0)


def _gray(x: np.ndarray) -> np.ndarray:
    return 0.299 * x[..., 0] + 0.587 * x[..., 1] + 0.114 * x[..., 2]


def augment(patch: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """One random view of an (H, W, 3) patch, float64 clamped to [0, 255].

    Random draws happen in a fixed order regardless of which operations are
    enabled, so a given rng state always yields the same view.
    """
    x = np.asarray(patch, dtype=np.float64)
    k = int(cfg.rotations[rng.integers(len(cfg.rotations))]) // 90 % 4
    hflip = rng.random() < cfg.hflip_p
    vflip = rng.random() < cfg.vflip_p
    b, c, s = rng.uniform(-1.0, 1.0, size=3)
    blur = rng.random() < cfg.blur_p
    sigma = rng.uniform(*cfg.blur_sigma)

    if k:
        x = np.rot90(x, k, axes=(0, 1))
    if hflip:
        x = x[:, ::-1]
    if vflip:
        x = x[::-1]
    if cfg.brightness:
        x = x * (1.0 + cfg.brightness * b)
    if cfg.contrast:
        m = _gray(x).mean()
        x = (x - m) * (1.0 + cfg.contrast * c) + m
    if cfg.saturation:
        g = _gray(x)[..., None]
        x = g + (x - g) * (1.0 + cfg.saturation * s)
    if blur:
        scaled = sigma * x.shape[0] / cfg.blur_reference_px
        x = ndimage.gaussian_filter(x, sigma=(scaled, scaled, 0.0), mode="reflect")
    return np.clip(np.ascontiguousarray(x), 0.0, 255.0)


def augment_pair(patch: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator):
    """Two independently sampled views of the same patch (query, key)."""
    return augment(patch, cfg, rng), augment(patch, cfg, rng)
