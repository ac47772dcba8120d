"""Pseudo-low-light corruption: gamma darkening, contrast reduction, sensor noise.

Images are float arrays in ``[0, 1]`` with the channel axis last (``H x W x C``)
or no channel axis at all.  Noise magnitudes ``gauss_sigma`` and
``poisson_lambda`` are given on the 0-255 intensity scale.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

NOISE_MODES = ("gauss_poisson", "impulse", "none")
MAX_IMPULSE_DENSITY = 0.2


class ParameterError(ValueError):
    """An augmentation parameter is outside its admissible range."""


@dataclass(frozen=True)
class AugmentParams:
    gamma: float = 1.0
    contrast: float = 1.0
    gauss_sigma: float = 0.0
    poisson_lambda: float = 0.0
    noise_mode: str = "gauss_poisson"
    impulse_density: float = 0.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ParameterError(f"gamma must be > 0, got {self.gamma}")
        if not 0.0 <= self.contrast <= 1.0:
            raise ParameterError(f"contrast must lie in [0, 1], got {self.contrast}")
        if not self.gauss_sigma >= 0:
            raise ParameterError(f"gauss_sigma must be >= 0, got {self.gauss_sigma}")
        if not self.poisson_lambda >= 0:
            raise ParameterError(f"poisson_lambda must be >= 0, got {self.poisson_lambda}")
        if self.noise_mode not in NOISE_MODES:
            raise ParameterError(f"noise_mode must be one of {NOISE_MODES}, got {self.noise_mode!r}")
        if not 0.0 <= self.impulse_density <= MAX_IMPULSE_DENSITY:
            raise ParameterError(f"impulse_density must lie in [0, {MAX_IMPULSE_DENSITY}], "
                                 f"got {self.impulse_density}")


# Fixed degradation used for held-out fidelity evaluation.
FIDELITY_PARAMS = AugmentParams(gamma=6.0, contrast=0.5, gauss_sigma=5.0, poisson_lambda=10.0)


def _check_range(name, lo, hi):
    if lo > hi:
        raise ParameterError(f"{name} range is empty: [{lo}, {hi}]")


@dataclass(frozen=True)
class ParamRanges:
    """Closed intervals from which :func:`sample_params` draws uniformly."""

    gamma: tuple[float, float] = (3.0, 10.0)
    contrast: tuple[float, float] = (0.1, 1.0)
    gauss_sigma: tuple[float, float] = (0.0, 10.0)
    poisson_lambda: tuple[float, float] = (0.0, 20.0)
    noise_mode: str = "gauss_poisson"
    impulse_density: tuple[float, float] = (0.0, MAX_IMPULSE_DENSITY)

    def __post_init__(self):
        for name in ("gamma", "contrast", "gauss_sigma", "poisson_lambda", "impulse_density"):
            lo, hi = getattr(self, name)
            _check_range(name, lo, hi)
        # validate the extreme corners once up front
        AugmentParams(self.gamma[0], self.contrast[0], self.gauss_sigma[0], self.poisson_lambda[0],
                      self.noise_mode, self.impulse_density[0])
        AugmentParams(self.gamma[1], self.contrast[1], self.gauss_sigma[1], self.poisson_lambda[1],
                      self.noise_mode, self.impulse_density[1])

    @classmethod
    def preset(cls, name: str) -> "ParamRanges":
        """Named range configurations, including the ablation variants."""
        base = cls()
        presets = {
            "default": base,
            "reduced_gamma": replace(base, gamma=(1.0, 5.0)),
            "reduced_contrast": replace(base, contrast=(0.55, 1.0)),
            "no_gamma": replace(base, gamma=(1.0, 1.0)),
            "no_contrast": replace(base, contrast=(1.0, 1.0)),
            "impulse": replace(base, noise_mode="impulse"),
            "no_noise": replace(base, noise_mode="none"),
            "identity": cls(gamma=(1.0, 1.0), contrast=(1.0, 1.0), gauss_sigma=(0.0, 0.0),
                            poisson_lambda=(0.0, 0.0), noise_mode="none",
                            impulse_density=(0.0, 0.0)),
        }
        if name not in presets:
            raise ParameterError(f"unknown ISPT preset {name!r}; choose from {sorted(presets)}")
        return presets[name]


PRESETS = ("default", "reduced_gamma", "reduced_contrast", "no_gamma", "no_contrast",
           "impulse", "no_noise", "identity")


def gamma_transform(img: np.ndarray, gamma: float) -> np.ndarray:
    if not gamma > 0:
        raise ParameterError(f"gamma must be > 0, got {gamma}")
    return np.power(img, gamma)


def contrast_adjust(img: np.ndarray, alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise ParameterError(f"contrast factor must lie in [0, 1], got {alpha}")
    return img * np.asarray(alpha, dtype=img.dtype)


def add_noise(img: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Add sensor noise and clamp to ``[0, 1]``.

    Gaussian noise is independent per channel.  Poisson shot noise and
    impulse defects are drawn once per pixel and shared by its channels.
    The Poisson term is centred (``p - lambda``) so it adds variance but no
    brightness.
    """
    if params.noise_mode == "none":
        return np.clip(img, 0.0, 1.0)
    pixel_shape = img.shape[:2] + (1,) * (img.ndim - 2)
    if params.noise_mode == "impulse":
        u = rng.random(pixel_shape)
        d = params.impulse_density
        out = np.where(u < d / 2, 0.0, np.where(u < d, 1.0, img))
        return np.clip(out, 0.0, 1.0).astype(img.dtype)
    if params.gauss_sigma == 0 and params.poisson_lambda == 0:
        return np.clip(img, 0.0, 1.0)
    g = rng.standard_normal(img.shape) * params.gauss_sigma
    p = rng.poisson(params.poisson_lambda, size=pixel_shape) - params.poisson_lambda
    out = img + (g + p) / 255.0
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def augment(img: np.ndarray, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    """Gamma -> contrast -> noise, in that order."""
    img = np.asarray(img)
    if img.dtype.kind != "f":
        raise ParameterError("augment expects a floating-point image in [0, 1]")
    darkened = contrast_adjust(gamma_transform(img, params.gamma), params.contrast)
    return add_noise(darkened, params, rng)


def sample_params(ranges: ParamRanges, rng: np.random.Generator) -> AugmentParams:
    """Draw every parameter independently and uniformly from its range."""
    draws = {name: float(rng.uniform(*getattr(ranges, name)))
             for name in ("gamma", "contrast", "gauss_sigma", "poisson_lambda", "impulse_density")}
    return AugmentParams(noise_mode=ranges.noise_mode, **draws)
