"""Exact gradients and truncation-based approximations.

Every rule returns a :class:`GradientEstimate` over the same flat ordering
(W_x, W_h, w_out; each row-major).  The readout gradient is always exact.

Rules
-----
bptt              reverse accumulation through the unrolled dynamics
rtrl              forward sensitivity tensor (oracle, N <= 32)
three_factor_sym  same-neuron eligibility traces, learning signal through w_out
three_factor_rf   same-neuron eligibility traces, learning signal through B_fb
mdgl              three_factor_sym plus the one-connection-step term
tbptt             BPTT with each loss term back-propagated through at most
                  T - 1 - truncation transitions

For the truncated rules a neuron's state is the pair (h_i, b_i).  The
same-neuron Jacobian keeps the leak, the self-connection W_ii and the
threshold coupling; every path through another neuron is dropped.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import (NetworkParams, NeuronConfig, LossSpec, Trajectory, activation_deriv,
                   activation_fn, forward, loss_and_error)
from .errors import ConfigurationError, NumericalOverflowError, SizeGuardError

TRUNCATED_RULES = ("three_factor_sym", "three_factor_rf", "mdgl")
RULES = ("bptt", "rtrl") + TRUNCATED_RULES + ("tbptt",)
RTRL_MAX_HIDDEN = 32


@dataclass
class GradientEstimate:
    g_Wx: np.ndarray
    g_Wh: np.ndarray
    g_wout: np.ndarray
    rule: str
    loss: float = float("nan")

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.g_Wx.ravel(), self.g_Wh.ravel(), self.g_wout.ravel()])

    def check_finite(self) -> "GradientEstimate":
        for name in ("g_Wx", "g_Wh", "g_wout"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NumericalOverflowError("non-finite gradient", block=name[2:], rule=self.rule)
        return self


class _Pass:
    """Forward quantities shared by all gradient routines."""

    def __init__(self, params, cfg, inputs, targets, spec, gate=None):
        self.params, self.cfg = params, cfg
        self.traj: Trajectory = forward(params, cfg, inputs, gate=gate)
        self.loss, self.E = loss_and_error(self.traj, targets, spec)
        tr = self.traj
        self.B, self.T, self.N = tr.batch_size, tr.T, cfg.n_hidden
        u = tr.u
        if tr.gate is None:
            self.fp = activation_deriv(cfg.activation, u)               # (B, T+1, N)
            r0 = activation_fn(cfg.activation, u[:, :1])
        else:
            self.fp = tr.gate.copy()
            r0 = tr.gate[:, :1] * u[:, :1]
        self.r_full = np.concatenate([r0, tr.r], axis=1)                # (B, T+1, N)
        # presynaptic vector entering h_t, t = 1..T: [x_{t-1}, r_{t-1}]
        self.Z = np.concatenate([tr.x, self.r_full[:, :-1]], axis=2)   # (B, T, N_in + N)
        self.amask = cfg.adaptive_mask

    def readout_grad(self) -> np.ndarray:
        return np.einsum("btk,btn->kn", self.E, self.traj.r)

    def estimate(self, G: np.ndarray, rule: str) -> GradientEstimate:
        n_in = self.cfg.n_in
        return GradientEstimate(G[:, :n_in].copy(), G[:, n_in:].copy(), self.readout_grad(),
                                rule, self.loss).check_finite()


# ---------------------------------------------------------------------------
# Exact gradients
# ---------------------------------------------------------------------------

def _backward(p: _Pass, window: Optional[int] = None) -> np.ndarray:
    """Adjoint sweep; returns dL/dh_t for t = 1..T as (B, T, N).

    With ``window`` set, each masked loss row keeps its own adjoint, which is
    dropped once it has travelled more than ``window`` transitions back.
    """
    cfg, W_h, w_out = p.cfg, p.params.W_h, p.params.w_out
    a, bt, amask = cfg.alpha, cfg.beta, p.amask
    B, T, N = p.B, p.T, p.N
    out = np.zeros((B, T, N))
    if window is None:
        dh_next = np.zeros((B, N))
        db_next = np.zeros((B, N))
        for t in range(T, 0, -1):
            dr = p.E[:, t - 1] @ w_out + (1.0 - a) * (dh_next @ W_h) + (1.0 - bt) * amask * db_next
            du = p.fp[:, t] * dr
            dh = a * dh_next + du
            db = amask * (bt * db_next - du)
            out[:, t - 1] = dh
            dh_next, db_next = dh, db
        return out

    origins = np.flatnonzero(np.any(p.E != 0.0, axis=(0, 2))) + 1   # loss-carrying times
    O = len(origins)
    dh_next = np.zeros((O, B, N))
    db_next = np.zeros((O, B, N))
    inject = np.zeros((O, B, N))
    for t in range(T, 0, -1):
        inject[:] = 0.0
        hit = origins == t
        if np.any(hit):
            inject[hit] = p.E[:, t - 1] @ w_out
        dr = inject + (1.0 - a) * (dh_next @ W_h) + (1.0 - bt) * amask * db_next
        du = p.fp[:, t] * dr
        dh = a * dh_next + du
        db = amask * (bt * db_next - du)
        keep = ((origins >= t) & (origins - t <= window)).astype(float)[:, None, None]
        dh *= keep
        db *= keep
        out[:, t - 1] = dh.sum(axis=0)
        dh_next, db_next = dh, db
    return out


def _weights_from_adjoint(p: _Pass, DH: np.ndarray) -> np.ndarray:
    return (1.0 - p.cfg.alpha) * np.einsum("btn,btm->nm", DH, p.Z)


def grad_bptt(params: NetworkParams, cfg: NeuronConfig, inputs, targets,
              spec: LossSpec, gate=None) -> GradientEstimate:
    """Exact gradient by back-propagation through time (batch-averaged).

    ``gate`` freezes the relu on/off pattern (see ``core.forward``).
    """
    p = _Pass(params, cfg, inputs, targets, spec, gate)
    return p.estimate(_weights_from_adjoint(p, _backward(p)), "bptt")


def grad_tbptt(params: NetworkParams, cfg: NeuronConfig, inputs, targets, spec: LossSpec,
               truncation: int) -> GradientEstimate:
    """Truncated BPTT: ``truncation`` of the T - 1 recurrent transitions are cut.

    Each loss term at step tau back-propagates through at most
    ``T - 1 - truncation`` transitions.  ``truncation=0`` is exact BPTT and
    ``truncation=T-1`` keeps only the immediate dependence of each loss term.
    """
    x = np.asarray(inputs)
    T = x.shape[-2]
    truncation = int(truncation)
    if not 0 <= truncation < T:
        raise ConfigurationError(f"truncation must lie in [0, T-1={T - 1}], got {truncation}")
    if truncation == 0:
        g = grad_bptt(params, cfg, inputs, targets, spec)
        g.rule = "tbptt(0)"
        return g
    p = _Pass(params, cfg, inputs, targets, spec)
    DH = _backward(p, window=T - 1 - truncation)
    return p.estimate(_weights_from_adjoint(p, DH), f"tbptt({truncation})")


def _immediate_rtrl(p: _Pass, t: int) -> np.ndarray:
    """d h_t / d theta_rec holding earlier states fixed: (B, N, P) in flat order."""
    B, N, n_in = p.B, p.N, p.cfg.n_in
    eye = np.eye(N)
    x_prev = p.traj.x[:, t - 1]
    r_prev = p.r_full[:, t - 1]
    imm_x = (eye[None, :, :, None] * x_prev[:, None, None, :]).reshape(B, N, N * n_in)
    imm_h = (eye[None, :, :, None] * r_prev[:, None, None, :]).reshape(B, N, N * N)
    return (1.0 - p.cfg.alpha) * np.concatenate([imm_x, imm_h], axis=2)


def grad_rtrl(params: NetworkParams, cfg: NeuronConfig, inputs, targets,
              spec: LossSpec) -> GradientEstimate:
    """Exact gradient by real-time recurrent learning.

    Carries the full sensitivity of every hidden state and threshold to every
    input/recurrent weight, so memory grows as N^2 (N + N_in); refused for
    N > 32.
    """
    if cfg.n_hidden > RTRL_MAX_HIDDEN:
        raise SizeGuardError(
            f"RTRL oracle keeps an N x N x (N+N_in) tensor per example; refusing N={cfg.n_hidden} "
            f"> {RTRL_MAX_HIDDEN}. Use grad_bptt for larger networks.")
    p = _Pass(params, cfg, inputs, targets, spec)
    a, bt, amask = cfg.alpha, cfg.beta, p.amask
    W_h, w_out = params.W_h, params.w_out
    B, N, n_in = p.B, p.N, cfg.n_in
    P = N * (n_in + N)
    Sh = np.zeros((B, N, P))
    Sb = np.zeros((B, N, P))
    g = np.zeros(P)
    for t in range(1, p.T + 1):
        dR = p.fp[:, t - 1, :, None] * (Sh - Sb)
        Sh_new = a * Sh + (1.0 - a) * np.einsum("lm,bmp->blp", W_h, dR) + _immediate_rtrl(p, t)
        Sb_new = amask[None, :, None] * (bt * Sb + (1.0 - bt) * dR)
        Sh, Sb = Sh_new, Sb_new
        dL_dr = p.E[:, t - 1] @ w_out
        g += np.einsum("bl,blp->p", dL_dr * p.fp[:, t], Sh - Sb)
    g_Wx = g[: N * n_in].reshape(N, n_in)
    g_Wh = g[N * n_in:].reshape(N, N)
    return GradientEstimate(g_Wx, g_Wh, p.readout_grad(), "rtrl", p.loss).check_finite()


# ---------------------------------------------------------------------------
# Truncated rules
# ---------------------------------------------------------------------------

def _same_neuron_jacobian(p: _Pass, t: int):
    """2x2 per-neuron Jacobian of (h_i, b_i) from step t-1 to t, each (B, N)."""
    a, bt, amask = p.cfg.alpha, p.cfg.beta, p.amask
    fp = p.fp[:, t - 1]
    w_ii = np.diag(p.params.W_h)
    Jhh = a + (1.0 - a) * w_ii * fp
    Jhb = -(1.0 - a) * w_ii * fp
    Jbh = amask * (1.0 - bt) * fp
    Jbb = amask * (bt - (1.0 - bt) * fp)
    return Jhh, Jhb, Jbh, Jbb


def _signals(p: _Pass, rule: str):
    """Per-step coefficients multiplying the trace difference (e_h - e_b).

    Returns ``s`` (B, T, N), the three-factor signal at step t applied to the
    current traces, and ``c`` (B, T, N), the one-connection-step term at step t
    applied to the traces from step t-1 (zero unless mdgl).
    """
    w_out, W_h = p.params.w_out, p.params.W_h
    if rule == "three_factor_rf":
        if p.params.B_fb is None:
            raise ConfigurationError("three_factor_rf needs a feedback matrix B_fb")
        feedback = p.params.B_fb.T
    else:
        feedback = w_out
    s = (p.E @ feedback) * p.fp[:, 1:]
    c = np.zeros_like(s)
    if rule == "mdgl":
        delta = (p.E @ w_out) * p.fp[:, 1:]            # symmetric learning signal
        w_ii = np.diag(W_h)
        lateral = delta @ W_h - w_ii * delta           # sum over l != i of W_li delta_l
        c = (1.0 - p.cfg.alpha) * p.fp[:, :-1] * lateral
    return s, c


def _truncated_traces(p: _Pass, rule: str) -> np.ndarray:
    """Online form: propagate eligibility traces forward in time."""
    B, N, T = p.B, p.N, p.T
    M = p.Z.shape[2]
    s, c = _signals(p, rule)
    eh = np.zeros((B, N, M))
    eb = np.zeros((B, N, M))
    G = np.zeros((N, M))
    for t in range(1, T + 1):
        Jhh, Jhb, Jbh, Jbb = _same_neuron_jacobian(p, t)
        if rule == "mdgl" and t > 1:
            G += np.einsum("bn,bnm->nm", c[:, t - 1], eh - eb)
        eh, eb = (Jhh[..., None] * eh + Jhb[..., None] * eb
                  + (1.0 - p.cfg.alpha) * p.Z[:, t - 1, None, :],
                  Jbh[..., None] * eh + Jbb[..., None] * eb)
        G += np.einsum("bn,bnm->nm", s[:, t - 1], eh - eb)
    return G


def _truncated_adjoint(p: _Pass, rule: str) -> np.ndarray:
    """Offline form: the same linear functional of the traces, evaluated by a
    per-neuron backward sweep.  O(T B N) recursion plus one contraction."""
    B, N, T = p.B, p.N, p.T
    s, c = _signals(p, rule)
    # coefficient on (e_h, e_b) at step t: s_t now, c_{t+1} one step later
    q = s.copy()
    q[:, :-1] += c[:, 1:]
    lam_h = np.zeros((B, T, N))
    lh = np.zeros((B, N))
    lb = np.zeros((B, N))
    for t in range(T, 0, -1):
        if t < T:
            Jhh, Jhb, Jbh, Jbb = _same_neuron_jacobian(p, t + 1)
            lh, lb = Jhh * lh + Jbh * lb, Jhb * lh + Jbb * lb
        lh = lh + q[:, t - 1]
        lb = lb - q[:, t - 1]
        lam_h[:, t - 1] = lh
    return (1.0 - p.cfg.alpha) * np.einsum("btn,btm->nm", lam_h, p.Z)


def grad_truncated(params: NetworkParams, cfg: NeuronConfig, inputs, targets, spec: LossSpec,
                   rule: str, method: str = "adjoint") -> GradientEstimate:
    """Approximate gradient for one of the truncation-based rules.

    ``method='traces'`` runs the online eligibility-trace recursion;
    ``method='adjoint'`` evaluates the identical quantity backwards in time,
    which is much cheaper for large batches.  Both agree to rounding.
    """
    if rule not in TRUNCATED_RULES:
        raise ConfigurationError(f"unknown truncated rule {rule!r}; expected one of {TRUNCATED_RULES}")
    p = _Pass(params, cfg, inputs, targets, spec)
    if method == "traces":
        G = _truncated_traces(p, rule)
    elif method == "adjoint":
        G = _truncated_adjoint(p, rule)
    else:
        raise ConfigurationError(f"unknown method {method!r}")
    return p.estimate(G, rule)


def parse_rule(rule: str):
    """'tbptt:3' or 'tbptt(3)' -> ('tbptt', 3); other names pass through."""
    r = rule.strip()
    for sep in (":", "("):
        if r.startswith("tbptt" + sep):
            return "tbptt", int(r[len("tbptt") + 1:].rstrip(")"))
    if r not in RULES:
        raise ConfigurationError(f"unknown rule {rule!r}; expected one of {RULES}")
    return r, None


def compute_gradient(rule: str, params: NetworkParams, cfg: NeuronConfig, inputs, targets,
                     spec: LossSpec, truncation: Optional[int] = None) -> GradientEstimate:
    name, trunc = parse_rule(rule)
    if name == "bptt":
        return grad_bptt(params, cfg, inputs, targets, spec)
    if name == "rtrl":
        return grad_rtrl(params, cfg, inputs, targets, spec)
    if name == "tbptt":
        trunc = truncation if trunc is None else trunc
        if trunc is None:
            raise ConfigurationError("tbptt needs a truncation length")
        return grad_tbptt(params, cfg, inputs, targets, spec, trunc)
    return grad_truncated(params, cfg, inputs, targets, spec, name)
