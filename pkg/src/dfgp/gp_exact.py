"""Exact GP regression with an affine mean function.

The covariance inputs and the mean inputs may differ (a spatial kernel with
a mean over deep features, for instance). ``K`` below always means the
noisy covariance ``k(X, X) + noise * I``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InsufficientSamples, NumericalDivergence, ShapeError, TooManySamples
from .kernels import KernelSpec, gram, gram_diag, gram_vjp
from .numeric import Adam, Schedule, cho_inverse, cho_solve, cholesky_jittered, tri_solve

LOG_2PI = np.log(2.0 * np.pi)
EXACT_CAP = 10_000
NOISE_FLOOR = 1e-8


def default_exact_schedule() -> Schedule:
    return Schedule([(500, 0.01), (100, 0.001)])


def mean_design(x_mean: np.ndarray | None, n: int) -> np.ndarray:
    """``[1, X]`` design matrix for the affine mean."""
    if x_mean is None or np.size(x_mean) == 0:
        return np.ones((n, 1))
    x_mean = np.asarray(x_mean, dtype=np.float64).reshape(n, -1)
    return np.hstack([np.ones((n, 1)), x_mean])


def least_squares(h: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Ordinary least squares via jittered normal equations."""
    l, _ = cholesky_jittered(h.T @ h, jitter0=0.0)
    return cho_solve(l, h.T @ y)


@dataclass
class ExactGpModel:
    kernel: KernelSpec
    beta: np.ndarray
    noise: float
    x_mean: np.ndarray | None = None
    x_cov: np.ndarray | None = None
    y: np.ndarray | None = None
    chol: np.ndarray | None = field(default=None, repr=False)
    alpha: np.ndarray | None = field(default=None, repr=False)
    jitter: float = 0.0

    def condition(self, x_mean, x_cov, y) -> "ExactGpModel":
        """Store the training data and factor ``K``."""
        x_cov = np.atleast_2d(np.asarray(x_cov, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64).ravel()
        n = y.size
        if x_cov.shape[0] != n:
            raise ShapeError("covariance inputs and targets have different row counts")
        h = mean_design(x_mean, n)
        if h.shape[1] != self.beta.size:
            raise ShapeError(f"mean design has {h.shape[1]} columns, beta has {self.beta.size}")
        k = gram(self.kernel, x_cov)
        k[np.diag_indices(n)] += self.noise
        self.chol, self.jitter = cholesky_jittered(k, jitter0=0.0)
        self.alpha = cho_solve(self.chol, y - h @ self.beta)
        self.x_mean = None if x_mean is None else np.asarray(x_mean, dtype=np.float64).reshape(n, -1)
        self.x_cov, self.y = x_cov, y
        return self

    def to_header(self) -> dict:
        return {"kind": "exact", "kernel": self.kernel.to_dict(), "beta": self.beta.tolist(),
                "noise": float(self.noise)}


def log_marginal(model: ExactGpModel, x_mean, x_cov, y, return_grad: bool = False):
    """Gaussian log marginal likelihood of ``y``.

    With ``return_grad`` also returns a dict of gradients with respect to
    ``beta``, ``log_lengthscale``, ``log_outputscale`` and ``log_noise``.
    """
    x_cov = np.atleast_2d(np.asarray(x_cov, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    n = y.size
    if x_cov.shape[0] != n:
        raise ShapeError("covariance inputs and targets have different row counts")
    h = mean_design(x_mean, n)
    resid = y - h @ model.beta
    k = gram(model.kernel, x_cov)
    k[np.diag_indices(n)] += model.noise
    l, _ = cholesky_jittered(k, jitter0=0.0)
    alpha = cho_solve(l, resid)
    value = -0.5 * resid @ alpha - np.sum(np.log(np.diag(l))) - 0.5 * n * LOG_2PI
    if not return_grad:
        return float(value)
    k_inv = cho_inverse(l)
    k_bar = 0.5 * (np.outer(alpha, alpha) - k_inv)
    kg = gram_vjp(model.kernel, x_cov, None, k_bar, want_inputs=False)
    grads = {
        "beta": h.T @ alpha,
        "log_lengthscale": kg["log_lengthscale"],
        "log_outputscale": kg["log_outputscale"],
        "log_noise": np.array([model.noise * np.trace(k_bar)]),
    }
    return float(value), grads


def fit_map(x_mean, x_cov, y, kernel: KernelSpec | None = None, bounds=None,
            schedule: Schedule | None = None, seed: int = 0, cap: int = EXACT_CAP,
            noise_init: float | None = None) -> tuple[ExactGpModel, list[float]]:
    """Maximize the log marginal likelihood by full-batch Adam.

    Length scales are clamped into their bounds after every step. Returns the
    conditioned model and the per-iteration objective trace. ``seed`` is
    accepted for interface symmetry; the full-batch fit is deterministic.
    """
    del seed
    x_cov = np.atleast_2d(np.asarray(x_cov, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    n = y.size
    if n < 2:
        raise InsufficientSamples("exact GP needs at least two samples")
    if n > cap:
        raise TooManySamples(f"{n} samples exceeds the exact-GP cap of {cap}")
    schedule = schedule or default_exact_schedule()
    h = mean_design(x_mean, n)
    beta0 = least_squares(h, y)
    var_y = float(np.var(y)) or 1.0
    if kernel is None:
        lo, hi = bounds if bounds is not None else (1e-2, 1e2)
        kernel = KernelSpec("Matern52", np.sqrt(lo * hi), var_y, (lo, hi))
    else:
        kernel = KernelSpec.from_dict(kernel.to_dict())
        if bounds is not None:
            kernel.bounds = tuple(bounds)
    kernel.clamp()
    noise = noise_init if noise_init is not None else 0.5 * var_y
    params = {
        "beta": beta0.copy(),
        "log_lengthscale": np.log(kernel.lengthscale),
        "log_outputscale": np.array([np.log(kernel.outputscale)]),
        "log_noise": np.array([np.log(noise)]),
    }
    opt = Adam(params)
    lo_log, hi_log = np.log(kernel.bounds[0]), np.log(kernel.bounds[1])
    model = ExactGpModel(kernel, params["beta"].copy(), noise)
    trace = []
    for lr in schedule:
        _sync(model, params)
        value, grads = log_marginal(model, x_mean, x_cov, y, return_grad=True)
        if not np.isfinite(value):
            raise NumericalDivergence("log marginal likelihood became non-finite")
        trace.append(value)
        opt.lr = lr
        opt.step({k: -g for k, g in grads.items()})
        np.clip(params["log_lengthscale"], lo_log, hi_log, out=params["log_lengthscale"])
        np.maximum(params["log_noise"], np.log(NOISE_FLOOR), out=params["log_noise"])
    _sync(model, params)
    model.condition(x_mean, x_cov, y)
    return model, trace


def _sync(model: ExactGpModel, params: dict) -> None:
    model.beta = params["beta"].copy()
    model.kernel.lengthscale = np.exp(params["log_lengthscale"])
    model.kernel.clamp()
    model.kernel.outputscale = float(np.exp(params["log_outputscale"][0]))
    model.noise = float(np.exp(params["log_noise"][0]))


def predict(model: ExactGpModel, x_mean_star, x_cov_star, full_cov: bool = False,
            include_noise: bool = False, block: int = 4096):
    """Posterior mean and latent variance at the query inputs.

    ``include_noise`` adds the noise variance (observation intervals). With
    ``full_cov`` the full posterior covariance is returned instead of the
    variance vector.
    """
    if model.chol is None:
        raise ShapeError("model has not been conditioned on training data")
    x_cov_star = np.atleast_2d(np.asarray(x_cov_star, dtype=np.float64))
    n_star = x_cov_star.shape[0]
    if x_cov_star.shape[1] != model.x_cov.shape[1]:
        raise ShapeError("query covariance inputs have the wrong width")
    h_star = mean_design(x_mean_star, n_star)
    if h_star.shape[1] != model.beta.size:
        raise ShapeError("query mean inputs have the wrong width")
    prior_mean = h_star @ model.beta
    if full_cov:
        k_sn = gram(model.kernel, x_cov_star, model.x_cov)
        v = tri_solve(model.chol, k_sn.T)
        cov = gram(model.kernel, x_cov_star) - v.T @ v
        if include_noise:
            cov[np.diag_indices(n_star)] += model.noise
        return prior_mean + k_sn @ model.alpha, cov
    mu = np.empty(n_star)
    var = np.empty(n_star)
    for start in range(0, n_star, block):
        sl = slice(start, start + block)
        k_sn = gram(model.kernel, x_cov_star[sl], model.x_cov)
        v = tri_solve(model.chol, k_sn.T)
        mu[sl] = prior_mean[sl] + k_sn @ model.alpha
        var[sl] = gram_diag(model.kernel, x_cov_star[sl]) - np.sum(v * v, axis=0)
    var = np.maximum(var, 0.0)
    if include_noise:
        var = var + model.noise
    return mu, var
