"""Synthetic single-scene benchmark with known ground truth.

Covariates are smooth Matern-5/2 random fields. The target combines a
feature-driven part (sigmoid of a random two-layer map of the covariates),
a spatial GP residual that no covariate explains, and iid noise. Clouds are
a thresholded smooth field.
"""
from __future__ import annotations

import numpy as np

from .kernels import KernelSpec, gram
from .numeric import cholesky_jittered, make_rng
from .raster_io import MISSING, OBSERVED, Mask, RasterStack


def gp_fields(shape: tuple[int, int], lengthscale: float, count: int, rng: np.random.Generator,
              family: str = "Matern52") -> np.ndarray:
    """``count`` independent unit-variance GP draws on a pixel grid, (H, W, count)."""
    h, w = shape
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    xy = np.column_stack([rows.ravel(), cols.ravel()]).astype(np.float64)
    l, _ = cholesky_jittered(gram(KernelSpec(family, [lengthscale], 1.0), xy))
    return (l @ rng.standard_normal((h * w, count))).reshape(h, w, count)


def make_scene(seed: int = 0, size: int = 64, n_features: int = 8, resolution_km: float = 1.0,
               cloud_fraction: float = 0.3, feature_lengthscale: float = 5.0,
               spatial_lengthscale: float = 8.0, cloud_lengthscale: float = 3.0,
               spatial_weight: float = 0.1, noise_sd: float = 0.01,
               hidden: int = 16) -> tuple[RasterStack, RasterStack, Mask]:
    """Returns ``(covariates, target, mask)``; every pixel is valid."""
    rng = make_rng(seed)
    shape = (size, size)
    feats = gp_fields(shape, feature_lengthscale, n_features, rng)

    w1 = rng.normal(0.0, 1.5 / np.sqrt(n_features), size=(n_features, hidden))
    b1 = rng.normal(0.0, 0.5, size=hidden)
    w2 = rng.normal(0.0, 1.0, size=hidden)
    h = np.tanh(feats @ w1 + b1) @ w2
    h = (h - h.mean()) / h.std()
    feature_part = 1.0 / (1.0 + np.exp(-2.0 * h))

    spatial = gp_fields(shape, spatial_lengthscale, 1, rng)[:, :, 0]
    noise = rng.standard_normal(shape)
    target = 0.1 + 0.4 * feature_part + spatial_weight * spatial + noise_sd * noise

    cloud = gp_fields(shape, cloud_lengthscale, 1, rng)[:, :, 0]
    labels = np.where(cloud > np.quantile(cloud, 1.0 - cloud_fraction), MISSING, OBSERVED)

    names = [f"band{i + 1}" for i in range(n_features)]
    return (RasterStack(feats.astype(np.float32), resolution_km, names),
            RasterStack(target.astype(np.float32)[:, :, None], resolution_km, ["target"]),
            Mask(labels.astype(np.uint8)))
