"""Sparse variational GP regression with inducing points.

The variational distribution is whitened: ``u = L v`` with ``L`` the
Cholesky factor of ``K_MM`` and ``q(v) = N(m_u, L_S L_S^T)``. The expected
Gaussian log-likelihood is closed form, so the minibatch ELBO and all of
its gradients (including inducing locations) are analytic.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg.blas as blas

from .errors import InsufficientSamples, NumericalDivergence, ShapeError
from .gp_exact import LOG_2PI, least_squares, mean_design
from .kernels import KernelSpec, gram, gram_vjp, scaled_distance
from .numeric import Adam, Schedule, cholesky_backward, cholesky_jittered, make_rng, minibatches, tri_solve

NOISE_FLOOR = 1e-6


def default_svgp_schedule() -> Schedule:
    return Schedule([(300, 0.01), (100, 0.001)])


@dataclass
class SvgpConfig:
    num_inducing: int = 500
    batch_size: int = 1024
    family: str = "Matern52"
    bounds: tuple[float, float] = (1e-2, 1e2)
    learn_inducing: bool = True
    ard: bool = False
    noise_init: float | None = None
    block_size: int = 4096

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["bounds"] = list(self.bounds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SvgpConfig":
        d = dict(d)
        if "bounds" in d:
            d["bounds"] = tuple(d["bounds"])
        return cls(**d)


@dataclass
class SvgpModel:
    kernel: KernelSpec
    beta: np.ndarray
    noise: float
    z: np.ndarray
    m_u: np.ndarray
    q_sqrt: np.ndarray
    learn_inducing: bool = True
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_inducing(self) -> int:
        return self.z.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        """Unconstrained parameter arrays (copies)."""
        return {
            "beta": self.beta.copy(),
            "log_lengthscale": np.log(self.kernel.lengthscale),
            "log_outputscale": np.array([np.log(self.kernel.outputscale)]),
            "log_noise": np.array([np.log(self.noise)]),
            "z": self.z.copy(),
            "m_u": self.m_u.copy(),
            "q_lower": np.tril(self.q_sqrt, -1),
            "q_log_diag": np.log(np.diag(self.q_sqrt)),
        }

    def set_params(self, p: dict[str, np.ndarray]) -> None:
        self.beta = np.array(p["beta"], dtype=np.float64)
        self.kernel.lengthscale = np.exp(p["log_lengthscale"])
        self.kernel.clamp()
        self.kernel.outputscale = float(np.exp(p["log_outputscale"][0]))
        self.noise = float(np.exp(p["log_noise"][0]))
        self.z = np.array(p["z"], dtype=np.float64)
        self.m_u = np.array(p["m_u"], dtype=np.float64)
        self.q_sqrt = np.tril(p["q_lower"], -1) + np.diag(np.exp(p["q_log_diag"]))
        self._cache.clear()

    def kl(self) -> float:
        """KL(q(v) || N(0, I))."""
        d = np.diag(self.q_sqrt)
        return 0.5 * float(self.m_u @ self.m_u + np.sum(self.q_sqrt ** 2)
                           - 2.0 * np.sum(np.log(d)) - self.num_inducing)

    def to_header(self) -> dict:
        return {"kind": "svgp", "kernel": self.kernel.to_dict(), "noise": float(self.noise),
                "learn_inducing": bool(self.learn_inducing)}

    def arrays(self) -> dict[str, np.ndarray]:
        return {"z": self.z, "m_u": self.m_u, "q_sqrt": self.q_sqrt, "beta": self.beta}

    @classmethod
    def from_saved(cls, header: dict, arrays: dict) -> "SvgpModel":
        return cls(KernelSpec.from_dict(header["kernel"]), np.asarray(arrays["beta"], np.float64),
                   float(header["noise"]), np.asarray(arrays["z"], np.float64),
                   np.asarray(arrays["m_u"], np.float64), np.asarray(arrays["q_sqrt"], np.float64),
                   bool(header.get("learn_inducing", True)))


def _kmm_factor(model: SvgpModel, r: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    kmm = gram(model.kernel, model.z, r=r)
    return cholesky_jittered(kmm)


def elbo_minibatch(model: SvgpModel, x_mean, x_cov, y, n_total: int, return_grad: bool = False):
    """Minibatch ELBO, scaled so its expectation over batches is the full ELBO.

    Returns the value, or ``(value, grads)`` keyed like :meth:`SvgpModel.params`.
    """
    x_cov = np.atleast_2d(np.asarray(x_cov, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    b = y.size
    if b < 1 or x_cov.shape[0] != b:
        raise ShapeError("batch inputs and targets disagree")
    if x_cov.shape[1] != model.z.shape[1]:
        raise ShapeError("covariance inputs do not match inducing-input width")
    h = mean_design(x_mean, b)
    if h.shape[1] != model.beta.size:
        raise ShapeError("mean inputs do not match the mean weights")
    kern = model.kernel
    noise = model.noise
    scale = n_total / b

    r_mm = scaled_distance(kern, model.z)
    r_mn = scaled_distance(kern, model.z, x_cov)
    l, jitter = _kmm_factor(model, r_mm)
    a = tri_solve(l, gram(kern, model.z, x_cov, r=r_mn))
    ls = model.q_sqrt
    ls_t_a = blas.dtrmm(1.0, ls, a, lower=1, trans_a=1)
    mu = h @ model.beta + a.T @ model.m_u
    var = kern.outputscale - np.sum(a * a, axis=0) + np.sum(ls_t_a * ls_t_a, axis=0)
    resid = y - mu
    sq = resid * resid + var
    ell = -0.5 * (LOG_2PI + np.log(noise)) - 0.5 * sq / noise
    value = scale * float(np.sum(ell)) - model.kl()
    if not return_grad:
        return value

    g_mu = scale * resid / noise
    g_var = -0.5 * scale / noise
    a_g = a @ g_mu
    aat = blas.dsyrk(1.0, a, lower=1)
    aat = np.tril(aat) + np.tril(aat, -1).T
    s = ls @ ls.T
    a_bar = np.outer(model.m_u, g_mu) + 2.0 * g_var * (blas.dtrmm(1.0, ls, ls_t_a, lower=1) - a)
    a_bar_at = np.outer(model.m_u, a_g) + 2.0 * g_var * (s @ aat - aat)

    kmn_bar = tri_solve(l, a_bar, transposed=True)
    l_bar = -np.tril(tri_solve(l, a_bar_at, transposed=True))
    kmm_bar = cholesky_backward(l, l_bar)

    g_cross = gram_vjp(kern, model.z, x_cov, kmn_bar, want_inputs=model.learn_inducing, r=r_mn)
    g_self = gram_vjp(kern, model.z, None, kmm_bar, want_inputs=model.learn_inducing, r=r_mm)

    ls_bar = 2.0 * g_var * (aat @ ls) - ls
    ls_bar[np.diag_indices_from(ls_bar)] += 1.0 / np.diag(ls)
    grads = {
        "beta": h.T @ g_mu,
        "log_lengthscale": g_cross["log_lengthscale"] + g_self["log_lengthscale"],
        # diag(K_nn) = outputscale and the K_MM jitter is relative to it
        "log_outputscale": (g_cross["log_outputscale"] + g_self["log_outputscale"]
                            + g_var * b * kern.outputscale + jitter * np.trace(kmm_bar)),
        "log_noise": np.array([scale * np.sum(-0.5 + 0.5 * sq / noise)]),
        "z": (g_cross["xs"] + g_self["xs"]) if model.learn_inducing else np.zeros_like(model.z),
        "m_u": a_g - model.m_u,
        "q_lower": np.tril(ls_bar, -1),
        "q_log_diag": np.diag(ls_bar) * np.diag(ls),
    }
    return value, grads


def init_svgp(x_mean, x_cov, y, config: SvgpConfig, seed: int,
              z_init: np.ndarray | None = None) -> SvgpModel:
    """Inducing inputs from a seeded subsample; q(v) at the prior; OLS mean."""
    x_cov = np.atleast_2d(np.asarray(x_cov, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    n = y.size
    rng = make_rng(seed)
    if z_init is None:
        m = config.num_inducing
        if n < m:
            raise InsufficientSamples(f"{n} training samples but {m} inducing points requested")
        z = x_cov[np.sort(rng.choice(n, size=m, replace=False))].copy()
    else:
        z = np.array(z_init, dtype=np.float64)
    m = z.shape[0]
    h = mean_design(x_mean, n)
    beta = least_squares(h, y)
    resid_var = float(np.var(y - h @ beta))
    if not resid_var > 0:
        resid_var = 1e-4
    lo, hi = config.bounds
    n_ls = x_cov.shape[1] if config.ard else 1
    kernel = KernelSpec(config.family, np.full(n_ls, np.sqrt(lo * hi)), resid_var, (lo, hi))
    noise = config.noise_init if config.noise_init is not None else max(0.1 * resid_var, NOISE_FLOOR)
    return SvgpModel(kernel, beta, noise, z, np.zeros(m), np.eye(m), config.learn_inducing)


def fit_svgp(x_mean, x_cov, y, config: SvgpConfig | None = None, schedule: Schedule | None = None,
             seed: int = 0, z_init: np.ndarray | None = None) -> tuple[SvgpModel, list[float]]:
    """Train by minibatch Adam on the negative ELBO.

    Returns the model and the per-epoch mean of the minibatch ELBO values.
    """
    config = config or SvgpConfig()
    schedule = schedule or default_svgp_schedule()
    x_cov = np.atleast_2d(np.asarray(x_cov, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).ravel()
    x_mean = None if x_mean is None or np.size(x_mean) == 0 else \
        np.asarray(x_mean, dtype=np.float64).reshape(y.size, -1)
    n = y.size
    model = init_svgp(x_mean, x_cov, y, config, seed, z_init)
    rng = make_rng(seed + 1)
    params = model.params()
    opt = Adam(params)
    lo_log, hi_log = np.log(config.bounds[0]), np.log(config.bounds[1])
    trace = []
    for lr in schedule:
        opt.lr = lr
        values = []
        for idx in minibatches(n, config.batch_size, rng):
            xm = None if x_mean is None else x_mean[idx]
            value, grads = elbo_minibatch(model, xm, x_cov[idx], y[idx], n, return_grad=True)
            if not np.isfinite(value):
                raise NumericalDivergence("ELBO became non-finite")
            values.append(value)
            if not model.learn_inducing:
                grads.pop("z")
            opt.step({k: -g for k, g in grads.items()})
            np.clip(params["log_lengthscale"], lo_log, hi_log, out=params["log_lengthscale"])
            np.maximum(params["log_noise"], np.log(NOISE_FLOOR), out=params["log_noise"])
            model.set_params(params)
        trace.append(float(np.mean(values)))
    return model, trace


def predict_svgp(model: SvgpModel, x_mean_star, x_cov_star, include_noise: bool = False,
                 block: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance, evaluated in row blocks of ``block``."""
    x_cov_star = np.atleast_2d(np.asarray(x_cov_star, dtype=np.float64))
    n_star = x_cov_star.shape[0]
    if x_cov_star.shape[1] != model.z.shape[1]:
        raise ShapeError("query covariance inputs do not match inducing-input width")
    h = mean_design(x_mean_star, n_star)
    if h.shape[1] != model.beta.size:
        raise ShapeError("query mean inputs do not match the mean weights")
    l, _ = _kmm_factor(model)
    mu = np.empty(n_star)
    var = np.empty(n_star)
    for start in range(0, n_star, block):
        sl = slice(start, start + block)
        a = tri_solve(l, gram(model.kernel, model.z, x_cov_star[sl]))
        lta = model.q_sqrt.T @ a
        mu[sl] = h[sl] @ model.beta + a.T @ model.m_u
        var[sl] = model.kernel.outputscale - np.sum(a * a, axis=0) + np.sum(lta * lta, axis=0)
    # an unconverged q(u) can exceed the prior; the exact posterior never does
    var = np.clip(var, 0.0, model.kernel.outputscale)
    if include_noise:
        var = var + model.noise
    return mu, var
