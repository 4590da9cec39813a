"""Gradient-space geometry of an approximate gradient relative to the exact one.

An approximate gradient g_hat is split as ``g_hat = rho * g + e`` with
``e`` orthogonal to the exact gradient ``g``; ``rho`` is the relative step
length along the gradient direction.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import LossSpec, NetworkParams, NeuronConfig, block_indices
from .curvature import LinearOperator, hessian_operator, top_k_eigenvalues
from .errors import DecompositionError


@dataclass
class Decomposition:
    rho: float
    e: np.ndarray
    g_norm: float
    e_norm: float

    def reconstruct(self, g) -> np.ndarray:
        return self.rho * np.asarray(g, dtype=float) + self.e


def decompose(g_hat, g) -> Decomposition:
    g_hat = np.asarray(g_hat, dtype=float).ravel()
    g = np.asarray(g, dtype=float).ravel()
    gg = float(g @ g)
    if gg == 0.0:
        raise DecompositionError("exact gradient is zero; rho is undefined")
    rho = float(g_hat @ g) / gg
    e = g_hat - rho * g
    return Decomposition(rho, e, float(np.sqrt(gg)), float(np.linalg.norm(e)))


def norm_identity_check(g, e, eta: float, rtol: float = 1e-10):
    """Compare ||eta g + eta e||^2 with eta^2 ||g||^2 + eta^2 ||e||^2.

    Raises DecompositionError if ``e`` is not orthogonal to ``g``.
    Returns ``(lhs, rhs, holds)``.
    """
    g = np.asarray(g, dtype=float).ravel()
    e = np.asarray(e, dtype=float).ravel()
    ng, ne = np.linalg.norm(g), np.linalg.norm(e)
    if abs(g @ e) > 1e-10 * max(ng * ne, np.finfo(float).tiny):
        raise DecompositionError("error vector is not orthogonal to the gradient")
    step = eta * g + eta * e
    lhs = float(step @ step)
    rhs = float(eta ** 2 * (g @ g) + eta ** 2 * (e @ e))
    holds = abs(lhs - rhs) <= rtol * max(abs(rhs), np.finfo(float).tiny)
    return lhs, rhs, bool(holds)


def abs_cosine(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DecompositionError("cosine of a zero vector")
    return float(abs(a @ b) / (na * nb))


def alignment_with(v, eigenvectors) -> float:
    """Mean |cos(v, u_j)| over the columns of ``eigenvectors``."""
    U = np.atleast_2d(np.asarray(eigenvectors, dtype=float))
    if U.shape[0] != np.size(v):
        U = U.T
    return float(np.mean([abs_cosine(v, U[:, j]) for j in range(U.shape[1])]))


def alignment(v, op: LinearOperator, top_m: int = 5, tol: float = 1e-6, max_iter: int = 500,
              seed=0, eigenvectors: Optional[np.ndarray] = None):
    """Mean absolute cosine between ``v`` and the top-``top_m`` eigenvectors of ``op``.

    Returns ``(value, converged)``; pre-computed ``eigenvectors`` (columns)
    skip the eigensolve.
    """
    if np.linalg.norm(v) == 0.0:
        raise DecompositionError("alignment of a zero vector")
    converged = True
    if eigenvectors is None:
        res = top_k_eigenvalues(op, top_m, tol=tol, max_iter=max_iter, seed=seed)
        eigenvectors, converged = res.vectors, bool(np.all(res.converged))
    return alignment_with(v, eigenvectors[:, :top_m]), converged


@dataclass
class TaylorTerms:
    T1: float
    T2: float
    T1_hat: float
    T2_hat: float
    rho: float
    assumption1_residual: float


def taylor_terms(hvp_fn: Callable[[np.ndarray], np.ndarray], g, g_hat, eta_B: float,
                 eta_e: float) -> TaylorTerms:
    """First- and second-order terms of the loss change for an exact step
    ``-eta_B g`` and an approximate step ``-eta_e g_hat``.

    The residual ``|g_hat'H g_hat - rho^2 g'H g| / |g'H g|`` measures how far
    the error vector is from the Hessian's null directions.
    """
    g = np.asarray(g, dtype=float).ravel()
    g_hat = np.asarray(g_hat, dtype=float).ravel()
    d = decompose(g_hat, g)
    gHg = float(g @ hvp_fn(g))
    hHh = float(g_hat @ hvp_fn(g_hat))
    T1 = eta_B * float(g @ g)
    T1_hat = eta_e * float(g_hat @ g)
    T2 = 0.5 * eta_B ** 2 * gHg
    T2_hat = 0.5 * eta_e ** 2 * hHh
    resid = abs(hHh - d.rho ** 2 * gHg) / abs(gHg) if gHg != 0.0 else float("inf")
    return TaylorTerms(T1, T2, T1_hat, T2_hat, d.rho, resid)


def alignment_at(v, params: NetworkParams, cfg: NeuronConfig, inputs, targets, spec: LossSpec,
                 top_m: int = 5, block: str = "all", **kw):
    """``alignment`` against the loss Hessian of a network."""
    op = hessian_operator(params, cfg, inputs, targets, spec, block)
    return alignment(v, op, top_m, **kw)


def taylor_terms_at(params: NetworkParams, cfg: NeuronConfig, inputs, targets, spec: LossSpec,
                    g, g_hat, eta_B: float, eta_e: float, block: str = "all") -> TaylorTerms:
    op = hessian_operator(params, cfg, inputs, targets, spec, block)
    return taylor_terms(op.apply, g, g_hat, eta_B, eta_e)


def decompose_block(g_hat, g, cfg: NeuronConfig, block: str = "W_h") -> Decomposition:
    """``decompose`` restricted to one parameter block of the flat vectors."""
    idx = block_indices(cfg, block)
    return decompose(np.asarray(g_hat)[idx], np.asarray(g)[idx])
