"""Numerical checks of the curvature bound for fixed points of the update map.

For a scalar-output network trained by SGD on a single example with a
last-step squared error, the update ``dW = F(W) = -eta * g_hat(W)`` has
Jacobian

    J = -eta * (grad~y grad y^T + (y_hat - y) * d(grad~y)/dW)

which collapses to the rank-1 matrix ``-eta * grad~y grad y^T`` at zero error.
Its only nonzero eigenvalue is ``-eta * grad~y^T grad y = -eta * rho * |grad y|^2``
and ``|grad y|^2`` is the leading Hessian eigenvalue, so stability of the fixed
point (``|lambda_J| < 1``) gives ``|lambda_H| < 1 / (|rho| eta)``; ``rho = 1``
for the exact gradient.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, asdict, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import LossSpec, NetworkParams, NeuronConfig, block_indices, forward
from .curvature import (DENSE_MAX_DIM, LinearOperator, hessian_operator, leading_eigenvalue,
                        top_k_eigenvalues)
from .errors import ConfigurationError, SizeGuardError
from .geometry import alignment, decompose
from .optim import sgd_step
from .rules import compute_gradient

log = logging.getLogger(__name__)

EPS_CONV = 1e-4
EPS_FP = 1e-6
GATE_WINDOW = 50
JACOBIAN_MAX_DIM = DENSE_MAX_DIM


# ---------------------------------------------------------------------------
# Single-example setting
# ---------------------------------------------------------------------------

def _example(example):
    """(inputs, target) -> ((1, T, N_in) inputs, (1, 1, 1) target)."""
    x, y = example
    x = np.asarray(x, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.shape[0] != 1:
        raise ConfigurationError("the theorem setting uses a single example")
    return x, np.asarray(y, dtype=float).reshape(1, 1, 1)


def _check_setting(cfg: NeuronConfig):
    if cfg.n_out != 1:
        raise ConfigurationError("the theorem setting needs a scalar output (n_out = 1)")


LAST_MSE = LossSpec.last("mse")


def output_gradient(params: NetworkParams, cfg: NeuronConfig, inputs, rule: str = "bptt") -> np.ndarray:
    """Gradient of the last readout ``y_hat_T`` w.r.t. the flat parameters.

    For a non-exact rule this is the rule's approximation of it.  It uses the
    identity ``grad L = (y_hat - y) grad y_hat`` with the target set one unit
    below the prediction.
    """
    _check_setting(cfg)
    x, _ = _example((inputs, 0.0))
    y_hat = forward(params, cfg, x).y_hat[0, -1, 0]
    return compute_gradient(rule, params, cfg, x, np.full((1, 1, 1), y_hat - 1.0), LAST_MSE).flat


def _update_map(params: NetworkParams, cfg: NeuronConfig, example, rule: str, eta: float):
    x, y = _example(example)

    def F(flat):
        return -eta * compute_gradient(rule, params.with_flat(flat), cfg, x, y, LAST_MSE).flat
    return F


def jacobian_fd(fn: Callable[[np.ndarray], np.ndarray], w, step: Optional[float] = None) -> np.ndarray:
    """Central-difference Jacobian ``J[i, j] = d fn_i / d w_j``."""
    w = np.asarray(w, dtype=float)
    n = w.size
    if n > JACOBIAN_MAX_DIM:
        raise SizeGuardError(f"dense Jacobian of dimension {n} exceeds the {JACOBIAN_MAX_DIM} guard")
    cols = []
    for j in range(n):
        h = step if step is not None else np.finfo(float).eps ** (1 / 3) * max(1.0, abs(w[j]))
        wp, wm = w.copy(), w.copy()
        wp[j] += h
        wm[j] -= h
        cols.append((np.asarray(fn(wp)) - np.asarray(fn(wm))) / (2.0 * h))
    return np.stack(cols, axis=1)


def _kink_warning(params, cfg, x, step):
    if cfg.activation != "relu":
        return
    u = forward(params, cfg, x).u
    near = np.abs(u) < 10 * step * (1.0 + np.abs(params.flatten()).max())
    if np.any(near & (u != 0)):
        warnings.warn("relu pre-activations lie within the finite-difference step of the kink; "
                      "the numerical Jacobian may be unreliable", RuntimeWarning)


def update_jacobian(params: NetworkParams, cfg: NeuronConfig, example, rule: str, eta: float,
                    step: Optional[float] = None) -> np.ndarray:
    """``d(dW)/dW`` of the update ``W -> W - eta * g_rule(W)`` by central differences."""
    _check_setting(cfg)
    if eta == 0:
        n = params.flatten().size
        return np.zeros((n, n))
    x, _ = _example(example)
    _kink_warning(params, cfg, x, step or np.finfo(float).eps ** (1 / 3))
    return jacobian_fd(_update_map(params, cfg, example, rule, eta), params.flatten(), step)


def output_hessian(params: NetworkParams, cfg: NeuronConfig, inputs, rule: str = "bptt") -> np.ndarray:
    """``d(grad~y)/dW`` by central differences of ``output_gradient``."""
    x, _ = _example((inputs, 0.0))
    return jacobian_fd(lambda f: output_gradient(params.with_flat(f), cfg, x, rule), params.flatten())


def predicted_jacobian(params: NetworkParams, cfg: NeuronConfig, example, rule: str, eta: float,
                       include_error_term: bool = True) -> np.ndarray:
    """``-eta (grad~y grad y^T + (y_hat - y) d grad~y / dW)`` assembled from its parts."""
    x, y = _example(example)
    gy = output_gradient(params, cfg, x, "bptt")
    gty = gy if rule == "bptt" else output_gradient(params, cfg, x, rule)
    J = np.outer(gty, gy)
    if include_error_term:
        err = forward(params, cfg, x).y_hat[0, -1, 0] - y[0, 0, 0]
        J = J + err * output_hessian(params, cfg, x, rule)
    return -eta * J


def rank1_residual(J: np.ndarray, params: NetworkParams, cfg: NeuronConfig, example, rule: str,
                   eta: float) -> float:
    """``|J + eta grad~y grad y^T|_F / |J|_F``."""
    nJ = np.linalg.norm(J)
    if nJ == 0.0:
        return 0.0
    R = J - predicted_jacobian(params, cfg, example, rule, eta, include_error_term=False)
    return float(np.linalg.norm(R) / nJ)


def dominant_eigenvalue(M: np.ndarray) -> complex:
    ev = np.linalg.eigvals(M)
    return ev[np.argmax(np.abs(ev))]


@dataclass
class EigenRelation:
    lambda_J: float        # |leading eigenvalue| of the update Jacobian
    lambda_H: float        # leading loss-Hessian eigenvalue
    rho: float
    eta: float
    predicted: float       # |rho * eta * lambda_H|
    residual: float
    converged: bool        # Hessian eigensolver converged


def relation_residual(lambda_J: float, rho: float, eta: float, lambda_H: float) -> float:
    predicted = abs(rho * eta * lambda_H)
    return abs(abs(lambda_J) - predicted) / max(predicted, np.finfo(float).tiny)


def eigenvalue_relation_generic(J: np.ndarray, hess_op: LinearOperator, rho: float, eta: float,
                                tol: float = 1e-10, max_iter: int = 2000, seed=0) -> EigenRelation:
    """Compare ``|lambda_J|`` (dense eig of ``J``) with ``|rho eta lambda_H|``
    (power iteration on ``hess_op``)."""
    lam_J = float(abs(dominant_eigenvalue(J)))
    pr = leading_eigenvalue(hess_op, tol=tol, max_iter=max_iter, seed=seed)
    if not pr.converged:
        log.warning("Hessian power iteration did not converge (residual %.3g)", pr.residual)
    predicted = abs(rho * eta * pr.value)
    return EigenRelation(lam_J, pr.value, rho, eta, predicted,
                         relation_residual(lam_J, rho, eta, pr.value), pr.converged)


def measure_rho(params: NetworkParams, cfg: NeuronConfig, example, rule: str) -> float:
    """rho of the rule against BPTT; on a single scalar-output example it does
    not depend on the error, so output gradients are used directly."""
    if rule == "bptt":
        return 1.0
    x, _ = _example(example)
    return decompose(output_gradient(params, cfg, x, rule), output_gradient(params, cfg, x, "bptt")).rho


def eigenvalue_relation_check(params: NetworkParams, cfg: NeuronConfig, example, rule: str, eta: float,
                              J: Optional[np.ndarray] = None, rho: Optional[float] = None,
                              tol: float = 1e-10) -> EigenRelation:
    """|lambda_J| against |rho eta lambda_H|, both computed independently.

    ``rho`` defaults to its value at ``params``; pass the trailing-window mean
    when checking a converged run.
    """
    if J is None:
        J = update_jacobian(params, cfg, example, rule, eta)
    if rho is None:
        rho = measure_rho(params, cfg, example, rule)
    x, y = _example(example)
    op = hessian_operator(params, cfg, x, y, LAST_MSE)
    return eigenvalue_relation_generic(J, op, rho, eta, tol=tol)


# ---------------------------------------------------------------------------
# Fixed points and the bound
# ---------------------------------------------------------------------------

@dataclass
class FixedPointReport:
    rule: str
    eta: float
    rho_at_convergence: float
    lambda1_H: float
    bound: float
    update_norm_residual: float
    train_error: float
    jacobian_rank1_residual: float = math.nan
    eigenvalue_relation_residual: float = math.nan
    converged: bool = False
    iterations: int = 0
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.bound > 0:
            raise ConfigurationError("bound must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def curvature_bound(rule: str, eta: float, rho: float = 1.0) -> float:
    """``1 / eta`` for BPTT, ``1 / (|rho| eta)`` otherwise."""
    if rule == "bptt":
        return 1.0 / eta
    if rho == 0 or not np.isfinite(rho):
        return math.inf
    return 1.0 / (abs(rho) * eta)


def bound_check(report: FixedPointReport) -> str:
    """'pass', 'violation', or 'not applicable' for runs that failed the convergence gate."""
    if not report.converged:
        return "not applicable"
    return "pass" if abs(report.lambda1_H) < report.bound else "violation"


def convergence_gate(losses: Sequence[float], update_norms: Sequence[float], eps_conv: float = EPS_CONV,
                     eps_fp: float = EPS_FP, window: int = GATE_WINDOW) -> bool:
    """True when the last ``window`` losses and update norms are all within tolerance."""
    if len(losses) < window or len(update_norms) < window:
        return False
    return bool(np.all(np.asarray(losses[-window:]) <= eps_conv)
                and np.all(np.asarray(update_norms[-window:]) <= eps_fp))


def run_fixed_point(params: NetworkParams, cfg: NeuronConfig, example, rule: str, eta: float,
                    max_iter: int = 20000, window: int = GATE_WINDOW, eps_conv: float = EPS_CONV,
                    eps_fp: float = EPS_FP, check_structure: bool = True, seed: Optional[int] = None):
    """Single-example SGD until the convergence gate holds, then the report.

    Returns ``(report, params)``.  Structure residuals are only computed for
    converged runs.
    """
    _check_setting(cfg)
    x, y = _example(example)
    losses, norms, rhos = [], [], []
    p = params
    it = 0
    for it in range(1, max_iter + 1):
        g_hat = compute_gradient(rule, p, cfg, x, y, LAST_MSE)
        losses.append(g_hat.loss)
        if rule == "bptt":
            rhos.append(1.0)
        else:
            g = compute_gradient("bptt", p, cfg, x, y, LAST_MSE).flat
            rhos.append(decompose(g_hat.flat, g).rho if np.any(g) else math.nan)
        step = eta * g_hat.flat
        norms.append(float(np.linalg.norm(step)))
        p = sgd_step(p, g_hat, eta)
        if convergence_gate(losses, norms, eps_conv, eps_fp, window):
            break
    converged = convergence_gate(losses, norms, eps_conv, eps_fp, window)
    rho = float(np.nanmean(rhos[-window:])) if rhos else 1.0
    op = hessian_operator(p, cfg, x, y, LAST_MSE)
    lam = leading_eigenvalue(op, tol=1e-10, max_iter=2000).value
    report = FixedPointReport(rule=rule, eta=eta, rho_at_convergence=rho, lambda1_H=lam,
                              bound=curvature_bound(rule, eta, rho), update_norm_residual=norms[-1] if norms else 0.0,
                              train_error=losses[-1] if losses else math.nan, converged=converged,
                              iterations=it, seed=seed)
    if converged and check_structure:
        J = update_jacobian(p, cfg, (x, y), rule, eta)
        report.jacobian_rank1_residual = rank1_residual(J, p, cfg, (x, y), rule, eta)
        report.eigenvalue_relation_residual = eigenvalue_relation_check(p, cfg, (x, y), rule, eta, J=J,
                                                                        rho=rho).residual
    return report, p


# ---------------------------------------------------------------------------
# Orthogonality of the error vector to sharp directions
# ---------------------------------------------------------------------------

@dataclass
class Assumption1Probe:
    alignment_e: float
    alignment_g: float
    He_ratio: float
    converged: bool = True


def assumption1_from_operator(op: LinearOperator, g, g_hat, top_m: int = 5, tol: float = 1e-6,
                              max_iter: int = 500, seed=0) -> Assumption1Probe:
    """Alignments of ``e`` and ``g`` with the top-``top_m`` eigenvectors of
    ``op`` and ``|H e| / (|H| |e|)``, with ``|H|`` the spectral norm."""
    d = decompose(g_hat, g)
    res = top_k_eigenvalues(op, top_m, tol=tol, max_iter=max_iter, seed=seed)
    vecs = res.vectors
    conv = bool(np.all(res.converged))
    a_g, _ = alignment(g, op, top_m, eigenvectors=vecs)
    if d.e_norm == 0.0:
        return Assumption1Probe(math.nan, a_g, 0.0, conv)
    a_e, _ = alignment(d.e, op, top_m, eigenvectors=vecs)
    h_norm = abs(res.values[0])
    ratio = float(np.linalg.norm(op(d.e)) / (h_norm * d.e_norm)) if h_norm > 0 else 0.0
    return Assumption1Probe(a_e, a_g, ratio, conv)


def assumption1_probe(params: NetworkParams, cfg: NeuronConfig, inputs, targets, spec: LossSpec, rule: str,
                      top_m: int = 5, block: str = "all", **kw) -> Assumption1Probe:
    g = compute_gradient("bptt", params, cfg, inputs, targets, spec).flat
    g_hat = compute_gradient(rule, params, cfg, inputs, targets, spec).flat
    idx = block_indices(cfg, block)
    op = hessian_operator(params, cfg, inputs, targets, spec, block)
    return assumption1_from_operator(op, g[idx], g_hat[idx], top_m, **kw)
