"""Stationary covariance functions: Matern (nu = 1/2, 3/2, 5/2) and RBF.

A kernel is ``outputscale * g(r)`` with ``r`` the Euclidean distance after
dividing each input dimension by its length scale. Hyperparameter
gradients are taken with respect to ``log(lengthscale)`` and
``log(outputscale)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ShapeError

FAMILIES = ("Matern12", "Matern32", "Matern52", "RBF")

SQRT3 = np.sqrt(3.0)
SQRT5 = np.sqrt(5.0)

# Spatial length-scale bounds (km) keyed by pixel size (km).
SPATIAL_BOUNDS_KM = {1.0: (3.0, 84.0), 0.06: (0.25, 13.0)}


@dataclass
class KernelSpec:
    family: str = "Matern52"
    lengthscale: np.ndarray = field(default_factory=lambda: np.ones(1))
    outputscale: float = 1.0
    bounds: tuple[float, float] = (1e-3, 1e3)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}; expected one of {FAMILIES}")
        self.lengthscale = np.atleast_1d(np.asarray(self.lengthscale, dtype=np.float64)).copy()
        lo, hi = float(self.bounds[0]), float(self.bounds[1])
        if not (0.0 < lo <= hi and np.isfinite(hi)):
            raise ValueError(f"invalid length-scale bounds {self.bounds}")
        self.bounds = (lo, hi)
        if np.any(self.lengthscale <= 0) or self.outputscale <= 0:
            raise ValueError("length scale and outputscale must be positive")

    @property
    def ard(self) -> bool:
        return self.lengthscale.size > 1

    def clamp(self) -> None:
        """Project the length scale(s) back into the bounds."""
        np.clip(self.lengthscale, self.bounds[0], self.bounds[1], out=self.lengthscale)

    def to_dict(self) -> dict:
        return {"family": self.family, "lengthscale": self.lengthscale.tolist(),
                "outputscale": float(self.outputscale), "bounds": list(self.bounds)}

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        return cls(family=d["family"], lengthscale=np.asarray(d["lengthscale"]),
                   outputscale=float(d["outputscale"]), bounds=tuple(d["bounds"]))


def spatial_bounds(resolution_km: float) -> tuple[float, float]:
    """Length-scale bounds (km) for a purely spatial kernel.

    Known sensors use their tabulated bounds; other pixel sizes reuse the
    1 km rule expressed in pixels (3 to 84 pixels).
    """
    for res, bounds in SPATIAL_BOUNDS_KM.items():
        if np.isclose(resolution_km, res):
            return bounds
    return (3.0 * resolution_km, 84.0 * resolution_km)


def relax_bounds(bounds: tuple[float, float], rule: str = "half_lower") -> tuple[float, float]:
    """Widen spatial bounds for a kernel that also sees deep features.

    ``half_lower`` halves the lower bound and keeps the upper one;
    ``half_width`` extends both ends by half the interval width (lower end
    floored at half its value); ``none`` leaves the bounds as they are.
    """
    lo, hi = bounds
    if rule == "half_lower":
        return (lo / 2.0, hi)
    if rule == "half_width":
        w = 0.5 * (hi - lo)
        return (max(lo - w, lo / 2.0), hi + w)
    if rule == "none":
        return (lo, hi)
    raise ValueError(f"unknown bound rule {rule!r}")


def _profile(family: str, r: np.ndarray) -> np.ndarray:
    if family == "Matern12":
        return np.exp(-r)
    if family == "Matern32":
        return (1.0 + SQRT3 * r) * np.exp(-SQRT3 * r)
    if family == "Matern52":
        return (1.0 + SQRT5 * r + (5.0 / 3.0) * r * r) * np.exp(-SQRT5 * r)
    return np.exp(-0.5 * r * r)


def _profile_slope_over_r(family: str, r: np.ndarray) -> np.ndarray:
    """``g'(r) / r``; finite at ``r = 0`` except for Matern12, set to 0 there."""
    if family == "Matern12":
        with np.errstate(divide="ignore", invalid="ignore"):
            q = -np.exp(-r) / r
        return np.where(r > 0, q, 0.0)
    if family == "Matern32":
        return -3.0 * np.exp(-SQRT3 * r)
    if family == "Matern52":
        return -(5.0 / 3.0) * (1.0 + SQRT5 * r) * np.exp(-SQRT5 * r)
    return -np.exp(-0.5 * r * r)


def _check_pair(spec: KernelSpec, xs: np.ndarray, xs2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    xs2 = np.atleast_2d(np.asarray(xs2, dtype=np.float64))
    if xs.shape[1] != xs2.shape[1]:
        raise ShapeError(f"input dimensions differ: {xs.shape[1]} vs {xs2.shape[1]}")
    if spec.ard and spec.lengthscale.size != xs.shape[1]:
        raise ShapeError(f"{spec.lengthscale.size} length scales for {xs.shape[1]}-d inputs")
    return xs, xs2


def _distance(a: np.ndarray, b: np.ndarray, symmetric: bool = False) -> np.ndarray:
    if a.shape[1] <= 4:
        return cdist(a, b)
    # wide inputs: GEMM expansion on inputs centred for stability
    centre = a.mean(axis=0)
    a = a - centre
    b = a if symmetric else b - centre
    d2 = np.einsum("ij,ij->i", a, a)[:, None] + np.einsum("ij,ij->i", b, b)[None, :] - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    if symmetric:
        d2[np.diag_indices_from(d2)] = 0.0
    return np.sqrt(d2)


def scaled_distance(spec: KernelSpec, xs: np.ndarray, xs2: np.ndarray | None = None) -> np.ndarray:
    symmetric = xs2 is None
    xs, xs2 = _check_pair(spec, xs, xs if symmetric else xs2)
    ls = spec.lengthscale
    return _distance(xs / ls, xs2 / ls, symmetric)


def kernel_value(spec: KernelSpec, x, x2) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    x2 = np.atleast_1d(np.asarray(x2, dtype=np.float64))
    if x.shape != x2.shape:
        raise ShapeError(f"input dimensions differ: {x.shape} vs {x2.shape}")
    if spec.ard and spec.lengthscale.size != x.size:
        raise ShapeError(f"{spec.lengthscale.size} length scales for {x.size}-d inputs")
    r = float(np.sqrt(np.sum(((x - x2) / spec.lengthscale) ** 2)))
    return float(spec.outputscale * _profile(spec.family, np.float64(r)))


def gram(spec: KernelSpec, xs: np.ndarray, xs2: np.ndarray | None = None,
         r: np.ndarray | None = None) -> np.ndarray:
    """Covariance matrix between the rows of ``xs`` and ``xs2``.

    ``r`` may carry precomputed scaled distances.
    """
    symmetric = xs2 is None
    if r is None:
        r = scaled_distance(spec, xs, xs2)
    k = spec.outputscale * _profile(spec.family, r)
    if symmetric:
        k = 0.5 * (k + k.T)
    return k


def gram_diag(spec: KernelSpec, xs: np.ndarray) -> np.ndarray:
    return np.full(np.atleast_2d(xs).shape[0], spec.outputscale)


def kernel_grads(spec: KernelSpec, xs: np.ndarray, xs2: np.ndarray) -> dict[str, np.ndarray]:
    """Partials of every Gram entry.

    ``log_lengthscale`` has shape ``(P, N, M)`` with ``P`` the number of
    length scales; ``log_outputscale`` has shape ``(N, M)``.
    """
    xs, xs2 = _check_pair(spec, xs, xs2)
    ls = spec.lengthscale
    r = cdist(xs / ls, xs2 / ls)
    k = spec.outputscale * _profile(spec.family, r)
    w = spec.outputscale * _profile_slope_over_r(spec.family, r)
    if spec.ard:
        diff2 = ((xs[:, None, :] - xs2[None, :, :]) / ls) ** 2
        d_ls = -w[None] * np.moveaxis(diff2, -1, 0)
    else:
        d_ls = (-w * r * r)[None]
    return {"log_lengthscale": d_ls, "log_outputscale": k}


def gram_vjp(spec: KernelSpec, xs: np.ndarray, xs2: np.ndarray | None, k_bar: np.ndarray,
             want_inputs: bool = True, r: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Contract ``k_bar`` (same shape as the Gram) against the Gram's partials.

    Returns gradients for ``log_lengthscale``, ``log_outputscale`` and, if
    requested, the inputs ``xs`` and ``xs2``. When ``xs2`` is None the Gram is
    ``gram(xs, xs)`` and the two input contributions are summed into ``xs``.
    """
    symmetric = xs2 is None
    if symmetric:
        xs2 = xs
    xs, xs2 = _check_pair(spec, xs, xs2)
    ls = spec.lengthscale
    if r is None:
        r = _distance(xs / ls, xs2 / ls, symmetric)
    g = _profile(spec.family, r)
    w = k_bar * (spec.outputscale * _profile_slope_over_r(spec.family, r))
    out = {"log_outputscale": np.array([np.sum(k_bar * g) * spec.outputscale])}
    row = w.sum(axis=1)
    col = w.sum(axis=0)
    inv_l2 = 1.0 / (ls * ls)
    if spec.ard:
        # sum_ab w_ab (x_ak - y_bk)^2 / l_k^2, expanded per dimension
        s = (row @ (xs * xs) + col @ (xs2 * xs2) - 2.0 * np.einsum("ak,ab,bk->k", xs, w, xs2))
        out["log_lengthscale"] = -s * inv_l2
    else:
        out["log_lengthscale"] = np.array([-np.sum(w * r * r)])
    if want_inputs:
        d1 = (row[:, None] * xs - w @ xs2) * inv_l2
        d2 = (col[:, None] * xs2 - w.T @ xs) * inv_l2
        if symmetric:
            out["xs"] = d1 + d2
        else:
            out["xs"] = d1
            out["xs2"] = d2
    return out
