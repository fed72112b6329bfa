"""Dense linear algebra helpers, seeded RNG and the Adam optimizer.

Matrices are plain float64 numpy arrays. Everything here is shared by the
CNN trainer and both GP solvers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
import scipy.linalg

from .errors import NotPositiveDefinite, NumericalDivergence, ShapeError, SingularMatrix

DEFAULT_RELATIVE_JITTER = 1e-6
JITTER_RETRIES = 4


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give bit-identical streams."""
    return np.random.default_rng(np.uint64(seed))


def cholesky_jittered(a: np.ndarray, jitter0: float | None = None,
                      retries: int = JITTER_RETRIES) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``a + jitter * I``.

    The first attempt uses ``jitter0`` (default ``1e-6 * mean(diag(a))``);
    each retry multiplies the jitter by 10. A zero starting jitter escalates
    to the relative default on the first retry.

    Returns ``(L, jitter_used)``.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    n = a.shape[0]
    base = DEFAULT_RELATIVE_JITTER * float(np.mean(np.abs(np.diag(a)))) if n else 0.0
    if base == 0.0:
        base = DEFAULT_RELATIVE_JITTER
    jitter = base if jitter0 is None else float(jitter0)
    for attempt in range(retries + 1):
        try:
            if jitter > 0.0:
                shifted = a.copy()
                shifted[np.diag_indices(n)] += jitter
            else:
                shifted = a
            return np.linalg.cholesky(shifted), jitter
        except np.linalg.LinAlgError:
            if attempt == retries:
                break
            jitter = jitter * 10.0 if jitter > 0.0 else base
    raise NotPositiveDefinite(f"Cholesky failed with jitter up to {jitter:.3g}")


def tri_solve(l: np.ndarray, b: np.ndarray, transposed: bool = False) -> np.ndarray:
    """Solve ``L x = b`` (or ``L^T x = b``) for lower-triangular ``L``."""
    l = np.asarray(l, dtype=np.float64)
    if l.ndim != 2 or l.shape[0] != l.shape[1]:
        raise ShapeError(f"expected a square matrix, got shape {l.shape}")
    if np.any(np.diag(l) == 0.0):
        raise SingularMatrix("triangular matrix has a zero on its diagonal")
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != l.shape[0]:
        raise ShapeError(f"right-hand side has {b.shape[0]} rows, expected {l.shape[0]}")
    return scipy.linalg.solve_triangular(l, b, lower=True, trans=1 if transposed else 0,
                                         check_finite=False)


def cho_solve(l: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``(L L^T) x = b``."""
    return scipy.linalg.cho_solve((l, True), b, check_finite=False)


def cho_inverse(l: np.ndarray) -> np.ndarray:
    """``(L Lᵀ)⁻¹`` from its lower Cholesky factor."""
    inv, info = scipy.linalg.lapack.dpotri(l, lower=1)
    if info != 0:
        raise SingularMatrix(f"inverse from Cholesky factor failed (info={info})")
    return np.tril(inv) + np.tril(inv, -1).T


def cholesky_backward(l: np.ndarray, l_bar: np.ndarray) -> np.ndarray:
    """Reverse-mode derivative of ``L = chol(A)``.

    Given the gradient ``l_bar`` of a scalar with respect to the lower factor,
    returns the symmetric gradient with respect to ``A``.
    """
    p = np.tril(l.T @ l_bar)
    p[np.diag_indices_from(p)] *= 0.5
    s = tri_solve(l, tri_solve(l, p.T, transposed=True).T, transposed=True)
    return 0.5 * (s + s.T)


@dataclass
class AdamState:
    """Moment accumulators for one parameter array."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray, lr: float = 1e-3) -> "AdamState":
        return cls(m=np.zeros_like(params, dtype=np.float64),
                   v=np.zeros_like(params, dtype=np.float64), lr=lr)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update (descent direction).

    Returns new arrays; the inputs are left untouched. An all-zero gradient
    advances the moments and step count but leaves ``params`` where they are.
    """
    params = np.asarray(params)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeError("params, grads and Adam moments must share a shape")
    if not np.all(np.isfinite(grads)):
        raise NumericalDivergence("non-finite gradient, update rejected")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** step)
    v_hat = v / (1.0 - state.beta2 ** step)
    if np.any(grads):
        new = params - (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(params.dtype)
    else:
        new = params.copy()
    return new, AdamState(m=m, v=v, step=step, lr=state.lr, beta1=state.beta1,
                          beta2=state.beta2, eps=state.eps)


class Adam:
    """Adam over a dict of named arrays, updated in place.

    All gradients are checked for finiteness before any parameter moves.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3):
        self.params = params
        self.lr = lr
        self.states = {k: AdamState.zeros_like(p, lr) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericalDivergence(f"non-finite gradient for {k!r}")
        for k, g in grads.items():
            # in-place equivalent of adam_step
            st = self.states[k]
            st.step += 1
            st.lr = self.lr
            st.m *= st.beta1
            st.m += (1.0 - st.beta1) * g
            st.v *= st.beta2
            st.v += (1.0 - st.beta2) * np.square(g, dtype=np.float64)
            if not np.any(g):
                continue
            denom = np.sqrt(st.v / (1.0 - st.beta2 ** st.step))
            denom += st.eps
            upd = st.m / denom
            upd *= st.lr / (1.0 - st.beta1 ** st.step)
            p = self.params[k]
            p -= upd.astype(p.dtype, copy=False)


@dataclass
class Schedule:
    """Piecewise-constant learning rate: a list of ``(epochs, lr)`` phases."""

    phases: list[tuple[int, float]] = field(default_factory=list)

    @property
    def total_epochs(self) -> int:
        return sum(int(e) for e, _ in self.phases)

    def __iter__(self) -> Iterator[float]:
        for epochs, lr in self.phases:
            for _ in range(int(epochs)):
                yield float(lr)

    def to_list(self) -> list[list]:
        return [[int(e), float(lr)] for e, lr in self.phases]

    @classmethod
    def from_list(cls, phases: Sequence[Sequence]) -> "Schedule":
        return cls([(int(e), float(lr)) for e, lr in phases])


def minibatches(n: int, batch_size: int, rng: np.random.Generator,
                min_size: int = 1) -> list[np.ndarray]:
    """Shuffled index batches covering ``range(n)``; a trailing batch smaller
    than ``min_size`` is dropped."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return [b for b in batches if len(b) >= min_size]
