"""Matrix-free Hessian probes.

Hessian-vector products are central differences of the exact (BPTT)
gradient,

    H v ~= (g(w + eps v) - g(w - eps v)) / (2 eps),
    eps = sqrt(machine_eps) * (1 + ||w||) / ||v||,

which is exact on quadratics up to rounding and needs no second-order
recursion through the network.  Eigenvalues come from power iteration
(leading, signed, largest magnitude) or subspace iteration with QR and a
Rayleigh-Ritz projection (top k by magnitude).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, NamedTuple, Optional

import numpy as np

from .core import NetworkParams, NeuronConfig, LossSpec, block_indices, forward, loss_at
from .errors import ConfigurationError, NumericalOverflowError, SizeGuardError
from .rules import grad_bptt

log = logging.getLogger(__name__)

MACHINE_EPS = np.finfo(float).eps
DENSE_MAX_DIM = 2000


@dataclass
class LinearOperator:
    """A symmetric-ish linear map known only through its action."""
    dim: int
    apply: Callable[[np.ndarray], np.ndarray]

    def __call__(self, v):
        return self.apply(v)

    @classmethod
    def from_matrix(cls, A) -> "LinearOperator":
        A = np.asarray(A, dtype=float)
        return cls(A.shape[0], lambda v: A @ v)


# ---------------------------------------------------------------------------
# Hessian-vector products
# ---------------------------------------------------------------------------

def fd_epsilon(w: np.ndarray, v: np.ndarray) -> float:
    return np.sqrt(MACHINE_EPS) * (1.0 + np.linalg.norm(w)) / np.linalg.norm(v)


def hvp_fd(grad_fn: Callable[[np.ndarray], np.ndarray], w, v, eps: Optional[float] = None) -> np.ndarray:
    """Central difference of ``grad_fn`` at ``w`` along ``v``."""
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        raise ConfigurationError("hvp needs a non-zero direction")
    if eps is None:
        eps = fd_epsilon(w, v)
    if not eps > 0.0 or not np.isfinite(eps):
        raise NumericalOverflowError("finite-difference step underflowed", eps=eps)
    out = (grad_fn(w + eps * v) - grad_fn(w - eps * v)) / (2.0 * eps)
    if not np.all(np.isfinite(out)):
        raise NumericalOverflowError("non-finite Hessian-vector product")
    return out


def _grad_fn(params, cfg, inputs, targets, spec):
    # A relu loss is piecewise smooth.  Differencing the gradient across a kink
    # gives jump / eps, so the on/off pattern is frozen at the base point and
    # the result is the Hessian of the active piece (relu'' = 0).
    gate = None
    if cfg.activation == "relu":
        gate = (forward(params, cfg, inputs).u > 0).astype(float)

    def g(flat):
        return grad_bptt(params.with_flat(flat), cfg, inputs, targets, spec, gate=gate).flat
    return g


def hvp(params: NetworkParams, cfg: NeuronConfig, inputs, targets, spec: LossSpec, v,
        block: str = "all", eps: Optional[float] = None) -> np.ndarray:
    """H v for the loss Hessian restricted to ``block`` ('all', 'W_h', 'readout')."""
    idx = block_indices(cfg, block)
    v = np.asarray(v, dtype=float)
    if v.shape != (len(idx),):
        raise ConfigurationError(f"direction has shape {v.shape}, block {block!r} has {len(idx)} entries")
    w = params.flatten()
    full = np.zeros_like(w)
    full[idx] = v
    return hvp_fd(_grad_fn(params, cfg, inputs, targets, spec), w, full, eps)[idx]


def hessian_operator(params: NetworkParams, cfg: NeuronConfig, inputs, targets, spec: LossSpec,
                     block: str = "all") -> LinearOperator:
    idx = block_indices(cfg, block)
    w = params.flatten()
    g = _grad_fn(params, cfg, inputs, targets, spec)

    def apply(v):
        full = np.zeros_like(w)
        full[idx] = v
        return hvp_fd(g, w, full)[idx]

    return LinearOperator(len(idx), apply)


# ---------------------------------------------------------------------------
# Eigensolvers
# ---------------------------------------------------------------------------

class PowerResult(NamedTuple):
    value: float
    iterations: int
    residual: float
    converged: bool
    vector: np.ndarray


def start_vector(dim: int, seed=0) -> np.ndarray:
    v = np.random.default_rng(seed).standard_normal(dim)
    return v / np.linalg.norm(v)


def _rel_change(new, old):
    return abs(new - old) / (abs(old) + 1e-6)


def leading_eigenvalue(op: LinearOperator, tol: float = 1e-6, max_iter: int = 1000, seed=0,
                       v0: Optional[np.ndarray] = None) -> PowerResult:
    """Signed eigenvalue of largest magnitude by power iteration.

    Stops once the relative change of the Rayleigh quotient falls to ``tol``.
    Hitting ``max_iter`` returns the last estimate with ``converged=False``.
    """
    if not tol > 0:
        raise ConfigurationError("tol must be positive")
    v = start_vector(op.dim, seed) if v0 is None else np.asarray(v0, float) / np.linalg.norm(v0)
    lam = None
    w = op(v)
    for it in range(1, max_iter + 1):
        nw = np.linalg.norm(w)
        new = float(v @ w)
        if nw == 0.0:
            return PowerResult(0.0, it, 0.0, True, v)
        done = lam is not None and _rel_change(new, lam) <= tol
        lam = new
        residual = float(np.linalg.norm(w - lam * v))
        if done:
            return PowerResult(lam, it, residual, True, v)
        v = w / nw
        w = op(v)
    lam = float(v @ w)
    residual = float(np.linalg.norm(w - lam * v))
    log.debug("power iteration hit max_iter=%d (residual %.3g)", max_iter, residual)
    return PowerResult(lam, max_iter, residual, False, v)


@dataclass
class EigenResult:
    values: np.ndarray
    vectors: np.ndarray
    iterations: int
    residuals: np.ndarray
    converged: np.ndarray

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]


def top_k_eigenvalues(op: LinearOperator, k: int, tol: float = 1e-6, max_iter: int = 500, seed=0,
                      oversample: Optional[int] = None) -> EigenResult:
    """Top-``k`` eigenpairs by magnitude via subspace iteration.

    Each sweep applies the operator to an orthonormal block, re-orthonormalises
    with QR and extracts Ritz pairs; the block carries ``oversample`` extra
    columns to speed up the k-th pair.  Values are sorted by magnitude,
    descending.  Convergence is judged per pair on the relative change of its
    Ritz value.
    """
    if not 1 <= k <= op.dim:
        raise ConfigurationError(f"k must lie in [1, dim={op.dim}], got {k}")
    if oversample is None:
        oversample = max(2, k // 2)
    p = min(op.dim, k + oversample)
    rng = np.random.default_rng(seed)
    Q, _ = np.linalg.qr(rng.standard_normal((op.dim, p)))
    prev = None
    conv = np.zeros(k, dtype=bool)
    theta = np.zeros(p)
    X = Q
    res = np.full(k, np.inf)
    it = 0
    for it in range(1, max_iter + 1):
        AQ = np.column_stack([op(Q[:, j]) for j in range(p)])
        Hs = Q.T @ AQ
        Hs = 0.5 * (Hs + Hs.T)
        theta, S = np.linalg.eigh(Hs)
        order = np.argsort(-np.abs(theta), kind="stable")
        theta, S = theta[order], S[:, order]
        X = Q @ S
        AX = AQ @ S
        res = np.linalg.norm(AX[:, :k] - X[:, :k] * theta[:k], axis=0)
        if prev is not None:
            conv = np.array([_rel_change(theta[i], prev[i]) <= tol for i in range(k)])
            if conv.all():
                break
        prev = theta.copy()
        Q, _ = np.linalg.qr(AX)
    return EigenResult(theta[:k].copy(), X[:, :k].copy(), it, res, conv)


# ---------------------------------------------------------------------------
# Scale-aware measures
# ---------------------------------------------------------------------------

def power_law_fit(eigs, k: Optional[int] = None, full_output: bool = False):
    """Decay exponent of a spectrum: minus the least-squares slope of
    log(lambda_i) against log(i), i = 1..k.

    Non-positive eigenvalues are dropped first.  With ``full_output`` a dict
    with the intercept and the used/dropped counts is returned as well.
    """
    lam = np.asarray(eigs, dtype=float)
    keep = lam > 0
    lam = lam[keep]
    dropped = int((~keep).sum())
    if k is not None:
        if k > len(lam):
            raise ConfigurationError(f"k={k} exceeds the {len(lam)} positive eigenvalues")
        lam = lam[:k]
    if len(lam) < 3:
        raise ConfigurationError("power-law fit needs at least 3 positive eigenvalues")
    x = np.log(np.arange(1, len(lam) + 1))
    slope, intercept = np.polyfit(x, np.log(lam), 1)
    exponent = float(-slope)
    if full_output:
        return exponent, {"intercept": float(intercept), "n_used": len(lam), "n_dropped": dropped}
    return exponent


def relative_flatness_from_hvp(hvp_readout: Callable[[np.ndarray], np.ndarray], w_out) -> float:
    """sum_{k,k'} <w_k, w_k'> Tr(H^(k,k')) over readout rows.

    ``hvp_readout`` maps a flattened (N_out, N) direction to the matching
    slice of H v.  One probe per readout coordinate.
    """
    w_out = np.atleast_2d(np.asarray(w_out, dtype=float))
    n_out, n = w_out.shape
    traces = np.zeros((n_out, n_out))
    for k in range(n_out):
        for j in range(n):
            e = np.zeros((n_out, n))
            e[k, j] = 1.0
            col = np.asarray(hvp_readout(e.ravel())).reshape(n_out, n)
            traces[:, k] += col[:, j]
    gram = w_out @ w_out.T
    return float(np.sum(gram * traces))


def relative_flatness(params: NetworkParams, cfg: NeuronConfig, inputs, targets, spec: LossSpec) -> float:
    op = hessian_operator(params, cfg, inputs, targets, spec, block="readout")
    return relative_flatness_from_hvp(op.apply, params.w_out)


# ---------------------------------------------------------------------------
# Dense oracles
# ---------------------------------------------------------------------------

@dataclass
class DenseHessian:
    matrix: np.ndarray          # symmetric part
    raw: np.ndarray             # as assembled (columns may disagree with rows)
    asymmetry: float            # ||raw - raw^T||_F / 2

    @property
    def eigenvalues(self) -> np.ndarray:
        ev = np.linalg.eigvalsh(self.matrix)
        return ev[np.argsort(-np.abs(ev), kind="stable")]


def _dense(raw) -> DenseHessian:
    raw = np.asarray(raw, dtype=float)
    return DenseHessian(0.5 * (raw + raw.T), raw, float(0.5 * np.linalg.norm(raw - raw.T)))


def dense_hessian_from_loss(loss_fn: Callable[[np.ndarray], float], w, step: Optional[float] = None) -> DenseHessian:
    """Second differences of a scalar function (4 evaluations per off-diagonal pair)."""
    w = np.asarray(w, dtype=float)
    d = w.size
    if d > DENSE_MAX_DIM:
        raise SizeGuardError(f"dense Hessian refused for dimension {d} > {DENSE_MAX_DIM}")
    h = (MACHINE_EPS ** 0.25) * np.maximum(1.0, np.abs(w)) if step is None else np.full(d, float(step))
    f0 = loss_fn(w)
    fp = np.empty(d)
    fm = np.empty(d)
    for i in range(d):
        e = np.zeros(d)
        e[i] = h[i]
        fp[i], fm[i] = loss_fn(w + e), loss_fn(w - e)
    H = np.empty((d, d))
    H[np.diag_indices(d)] = (fp - 2.0 * f0 + fm) / h ** 2
    for i in range(d):
        for j in range(i + 1, d):
            e = np.zeros(d)
            e[i] += h[i]
            e[j] += h[j]
            f = np.zeros(d)
            f[i] += h[i]
            f[j] -= h[j]
            val = (loss_fn(w + e) - loss_fn(w + f) - loss_fn(w - f) + loss_fn(w - e)) / (4.0 * h[i] * h[j])
            H[i, j] = H[j, i] = val
    return _dense(H)


def dense_hessian_from_grad(grad_fn: Callable[[np.ndarray], np.ndarray], w) -> DenseHessian:
    """Columns H e_i by central differences of the gradient."""
    w = np.asarray(w, dtype=float)
    d = w.size
    if d > DENSE_MAX_DIM:
        raise SizeGuardError(f"dense Hessian refused for dimension {d} > {DENSE_MAX_DIM}")
    cols = []
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        cols.append(hvp_fd(grad_fn, w, e))
    return _dense(np.column_stack(cols))


def dense_hessian(params: NetworkParams, cfg: NeuronConfig, inputs, targets, spec: LossSpec,
                  method: str = "loss", block: str = "all") -> DenseHessian:
    """Full Hessian of the network loss.

    ``method='loss'`` uses second differences of the loss (independent of the
    gradient code); ``method='grad'`` stacks Hessian-vector products, whose
    asymmetry is informative on ReLU networks.
    """
    idx = block_indices(cfg, block)
    if len(idx) > DENSE_MAX_DIM:
        raise SizeGuardError(f"dense Hessian refused for dimension {len(idx)} > {DENSE_MAX_DIM}")
    w = params.flatten()

    def embed(sub):
        full = w.copy()
        full[idx] = sub
        return full

    if method == "loss":
        return dense_hessian_from_loss(
            lambda s: loss_at(params.with_flat(embed(s)), cfg, inputs, targets, spec), w[idx])
    if method == "grad":
        g = _grad_fn(params, cfg, inputs, targets, spec)
        return dense_hessian_from_grad(lambda s: g(embed(s))[idx], w[idx])
    raise ConfigurationError(f"unknown method {method!r}")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class CurvatureReport:
    lambda1: float
    top_k: List[float] = field(default_factory=list)
    powerlaw_exponent: float = float("nan")
    relative_flatness: float = float("nan")
    iterations: int = 0
    residual: float = float("nan")
    converged: bool = True
    block: str = "all"

    def to_dict(self) -> dict:
        return dict(lambda1=self.lambda1, top_k=list(map(float, self.top_k)),
                    powerlaw_exponent=self.powerlaw_exponent,
                    relative_flatness=self.relative_flatness, iterations=self.iterations,
                    residual=self.residual, converged=self.converged, block=self.block)


def curvature_report(params: NetworkParams, cfg: NeuronConfig, inputs, targets, spec: LossSpec,
                     block: str = "all", k: int = 0, tol: float = 1e-6, max_iter: int = 1000,
                     seed=0, flatness: bool = False, dense: bool = False) -> CurvatureReport:
    """Leading eigenvalue, optional top-k spectrum with power-law exponent and
    relative flatness.  ``dense=True`` takes the spectrum from an explicit
    Hessian assembled column by column, which is cheaper than subspace
    iteration when k is a sizeable fraction of the dimension."""
    op = hessian_operator(params, cfg, inputs, targets, spec, block)
    lead = leading_eigenvalue(op, tol=tol, max_iter=max_iter, seed=seed)
    rep = CurvatureReport(lambda1=lead.value, iterations=lead.iterations, residual=lead.residual,
                          converged=lead.converged, block=block)
    if k:
        if dense:
            vals = dense_hessian(params, cfg, inputs, targets, spec, method="grad", block=block).eigenvalues[:k]
        else:
            vals = top_k_eigenvalues(op, k, tol=tol, max_iter=max_iter, seed=seed).values
        rep.top_k = [float(v) for v in vals]
        pos = vals[vals > 0]
        if len(pos) >= 3:
            rep.powerlaw_exponent = power_law_fit(pos)
    if flatness:
        rep.relative_flatness = relative_flatness(params, cfg, inputs, targets, spec)
    return rep
