"""Rate-based RNN dynamics, readout and losses.

The hidden state evolves as

    h_{t+1} = alpha * h_t + (1 - alpha) * (W_h f(h_t - b_t) + W_x x_t)
    b_{t+1} = beta * b_t + (1 - beta) * f(h_t - b_t)      (adaptive units)

and the readout at step t is ``y_hat_t = w_out f(h_t - b_t)`` for t = 1..T.
Input ``x_t`` (t = 0..T-1) drives the transition into ``h_{t+1}``, so the
first readout already sees the first input.  Non-adaptive units keep
``b = 0``.  The first ``n_adaptive`` hidden units are the adaptive ones.

All arrays are float64.  Batched arrays carry the batch on axis 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, NumericalOverflowError

ACTIVATIONS = ("relu", "tanh")
CE_CLAMP = 1e-12


@dataclass(frozen=True)
class NeuronConfig:
    n_hidden: int
    n_in: int
    n_out: int
    n_adaptive: int = 0
    alpha: float = 0.0
    beta: float = 0.0
    activation: str = "relu"

    def __post_init__(self):
        for name in ("n_hidden", "n_in", "n_out"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0 <= self.n_adaptive <= self.n_hidden:
            raise ConfigurationError(
                f"n_adaptive must lie in [0, n_hidden={self.n_hidden}], got {self.n_adaptive}")
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie in [0, 1), got {self.alpha}")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigurationError(f"beta must lie in [0, 1), got {self.beta}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def adaptive_mask(self) -> np.ndarray:
        """1.0 for adaptive-threshold units, 0.0 otherwise."""
        m = np.zeros(self.n_hidden)
        m[: self.n_adaptive] = 1.0
        return m

    @property
    def n_params(self) -> int:
        return self.n_hidden * (self.n_in + self.n_hidden + self.n_out)

    def to_dict(self) -> dict:
        return dict(n_hidden=self.n_hidden, n_in=self.n_in, n_out=self.n_out,
                    n_adaptive=self.n_adaptive, alpha=self.alpha, beta=self.beta,
                    activation=self.activation)


def activation_fn(name: str, u: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(u, 0.0)
    return np.tanh(u)


def activation_deriv(name: str, u: np.ndarray) -> np.ndarray:
    # relu'(0) := 0
    if name == "relu":
        return (u > 0.0).astype(float)
    t = np.tanh(u)
    return 1.0 - t * t


# ---------------------------------------------------------------------------
# Parameters and flattening
# ---------------------------------------------------------------------------

BLOCK_ORDER = ("W_x", "W_h", "w_out")


def block_slices(cfg: NeuronConfig) -> dict:
    """Slices of each trainable block inside the flat parameter vector.

    The flat order is fixed: W_x row-major, then W_h row-major, then w_out
    row-major.  B_fb is never part of the flat vector.
    """
    n, n_in, n_out = cfg.n_hidden, cfg.n_in, cfg.n_out
    a = n * n_in
    b = a + n * n
    c = b + n_out * n
    return {"W_x": slice(0, a), "W_h": slice(a, b), "w_out": slice(b, c)}


def block_indices(cfg: NeuronConfig, block: str = "all") -> np.ndarray:
    """Flat indices for a curvature block selector: 'all', 'W_h' or 'readout'."""
    sl = block_slices(cfg)
    if block == "all":
        return np.arange(cfg.n_params)
    if block in ("W_h", "recurrent"):
        return np.arange(sl["W_h"].start, sl["W_h"].stop)
    if block in ("readout", "w_out"):
        return np.arange(sl["w_out"].start, sl["w_out"].stop)
    if block == "W_x":
        return np.arange(sl["W_x"].start, sl["W_x"].stop)
    raise ConfigurationError(f"unknown block selector {block!r}")


@dataclass(frozen=True)
class NetworkParams:
    """Trainable weights plus the fixed random feedback matrix.

    Shapes: W_x (N, N_in), W_h (N, N), w_out (N_out, N), B_fb (N, N_out).
    """
    W_x: np.ndarray
    W_h: np.ndarray
    w_out: np.ndarray
    B_fb: Optional[np.ndarray] = None

    def check(self, cfg: NeuronConfig) -> "NetworkParams":
        n, n_in, n_out = cfg.n_hidden, cfg.n_in, cfg.n_out
        expected = {"W_x": (n, n_in), "W_h": (n, n), "w_out": (n_out, n)}
        for name, shape in expected.items():
            got = np.shape(getattr(self, name))
            if got != shape:
                raise ConfigurationError(f"{name} has shape {got}, expected {shape}")
        if self.B_fb is not None and np.shape(self.B_fb) != (n, n_out):
            raise ConfigurationError(f"B_fb has shape {np.shape(self.B_fb)}, expected {(n, n_out)}")
        return self

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.W_x.ravel(), self.W_h.ravel(), self.w_out.ravel()])

    def with_flat(self, flat: np.ndarray) -> "NetworkParams":
        """New params with trainable blocks taken from ``flat``; B_fb is shared."""
        n, n_in = self.W_x.shape
        n_out = self.w_out.shape[0]
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (n * (n_in + n + n_out),):
            raise ConfigurationError(f"flat vector has shape {flat.shape}")
        a, b = n * n_in, n * n_in + n * n
        return NetworkParams(flat[:a].reshape(n, n_in).copy(),
                             flat[a:b].reshape(n, n).copy(),
                             flat[b:].reshape(n_out, n).copy(),
                             self.B_fb)

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.W_x.copy(), self.W_h.copy(), self.w_out.copy(),
                             None if self.B_fb is None else self.B_fb.copy())

    def to_dict(self) -> dict:
        d = {k: getattr(self, k).tolist() for k in BLOCK_ORDER}
        d["B_fb"] = None if self.B_fb is None else self.B_fb.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkParams":
        B = d.get("B_fb")
        return cls(np.asarray(d["W_x"], float), np.asarray(d["W_h"], float),
                   np.asarray(d["w_out"], float), None if B is None else np.asarray(B, float))


def init_params(cfg: NeuronConfig, rng: np.random.Generator, gain: float = 1.0) -> NetworkParams:
    """Gaussian initialisation: variance 1/N for W_h, w_out and B_fb, 1/N_in for W_x.

    ``gain`` multiplies the standard deviation of W_h.
    """
    n, n_in, n_out = cfg.n_hidden, cfg.n_in, cfg.n_out
    W_x = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n, n_in))
    W_h = rng.normal(0.0, gain / np.sqrt(n), size=(n, n))
    w_out = rng.normal(0.0, 1.0 / np.sqrt(n), size=(n_out, n))
    B_fb = rng.normal(0.0, 1.0 / np.sqrt(n), size=(n, n_out))
    return NetworkParams(W_x, W_h, w_out, B_fb)


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------

def _advance(params, cfg, h, b, x, amask, gate=None):
    r = activation_fn(cfg.activation, h - b) if gate is None else gate * (h - b)
    # overflow is detected and raised by the callers
    with np.errstate(over="ignore", invalid="ignore"):
        h_next = cfg.alpha * h + (1.0 - cfg.alpha) * (r @ params.W_h.T + x @ params.W_x.T)
    if cfg.n_adaptive:
        b_next = amask * (cfg.beta * b + (1.0 - cfg.beta) * r)
    else:
        b_next = np.zeros_like(h_next)
    return h_next, b_next


def step(params: NetworkParams, cfg: NeuronConfig, h, b, x_t):
    """One transition (h_t, b_t, x_t) -> (h_{t+1}, b_{t+1}).

    Works on single vectors or on (B, N) batches.
    """
    h = np.asarray(h, dtype=float)
    b = np.asarray(b, dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    if h.shape[-1] != cfg.n_hidden or b.shape != h.shape:
        raise ConfigurationError(f"state shapes h{h.shape}, b{b.shape} do not match N={cfg.n_hidden}")
    if x_t.shape[-1] != cfg.n_in:
        raise ConfigurationError(f"input has shape {x_t.shape}, expected last dim {cfg.n_in}")
    params.check(cfg)
    h_next, b_next = _advance(params, cfg, h, b, x_t, cfg.adaptive_mask)
    if not (np.all(np.isfinite(h_next)) and np.all(np.isfinite(b_next))):
        raise NumericalOverflowError("non-finite hidden state", where="step")
    return h_next, b_next


@dataclass
class Trajectory:
    """Batched forward pass.

    Shapes: x (B, T, N_in), h and b (B, T+1, N) including the initial state,
    r (B, T, N) with ``r[:, t-1] = f(h[:, t] - b[:, t])`` for t = 1..T,
    y_hat (B, T, N_out) with ``y_hat[:, t-1] = r[:, t-1] @ w_out.T``.
    """
    x: np.ndarray
    h: np.ndarray
    b: np.ndarray
    r: np.ndarray
    y_hat: np.ndarray
    activation: str = "relu"
    gate: Optional[np.ndarray] = None

    @property
    def T(self) -> int:
        return self.r.shape[1]

    @property
    def batch_size(self) -> int:
        return self.r.shape[0]

    @property
    def u(self) -> np.ndarray:
        """Pre-activations h - b for t = 0..T, shape (B, T+1, N)."""
        return self.h - self.b


def _as_batch(inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ConfigurationError(f"inputs must be (T, N_in) or (B, T, N_in), got shape {x.shape}")
    return x


def forward(params: NetworkParams, cfg: NeuronConfig, inputs, h0=None, b0=None, gate=None) -> Trajectory:
    """Simulate the network on ``inputs`` of shape (T, N_in) or (B, T, N_in).

    The returned trajectory is always batched (a 2-D input becomes B = 1).
    Initial states default to zero.  ``gate`` (B, T+1, N) replaces a relu by
    the fixed linear map ``r = gate * u``, i.e. the relu with its on/off
    pattern frozen.
    """
    params.check(cfg)
    x = _as_batch(inputs)
    B, T, n_in = x.shape
    if T < 1:
        raise ConfigurationError("need at least one time step")
    if n_in != cfg.n_in:
        raise ConfigurationError(f"inputs have {n_in} channels, expected {cfg.n_in}")
    n = cfg.n_hidden
    h = np.zeros((B, T + 1, n))
    b = np.zeros((B, T + 1, n))
    if h0 is not None:
        h[:, 0] = h0
    if b0 is not None:
        b[:, 0] = np.asarray(b0) * cfg.adaptive_mask
    amask = cfg.adaptive_mask
    if gate is not None:
        gate = np.broadcast_to(np.asarray(gate, dtype=float), (B, T + 1, n))
    for t in range(T):
        g_t = None if gate is None else gate[:, t]
        h[:, t + 1], b[:, t + 1] = _advance(params, cfg, h[:, t], b[:, t], x[:, t], amask, g_t)
        if not np.all(np.isfinite(h[:, t + 1])):
            raise NumericalOverflowError("non-finite hidden state", time_index=t + 1)
    u = h[:, 1:] - b[:, 1:]
    r = activation_fn(cfg.activation, u) if gate is None else gate[:, 1:] * u
    y_hat = r @ params.w_out.T
    if not np.all(np.isfinite(y_hat)):
        raise NumericalOverflowError("non-finite readout")
    return Trajectory(x=x, h=h, b=b, r=r, y_hat=y_hat, activation=cfg.activation,
                      gate=None if gate is None else np.array(gate))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossSpec:
    """Which loss and which readout rows carry it.

    ``mask`` holds 0-based indices into the T readout rows (row T-1 is the
    final step).  ``normalize='mask'`` divides by the number of masked steps;
    ``normalize='T'`` reproduces the divide-by-trial-length convention.
    """
    kind: str = "mse"
    mask: tuple = field(default=(-1,))
    normalize: str = "mask"

    def __post_init__(self):
        if self.kind not in ("mse", "cross_entropy"):
            raise ConfigurationError(f"unknown loss kind {self.kind!r}")
        if len(self.mask) == 0:
            raise ConfigurationError("loss mask must be non-empty")
        if self.normalize not in ("mask", "T"):
            raise ConfigurationError(f"normalize must be 'mask' or 'T', got {self.normalize!r}")
        object.__setattr__(self, "mask", tuple(int(m) for m in self.mask))

    @classmethod
    def full(cls, T: int, kind: str = "mse", **kw) -> "LossSpec":
        return cls(kind=kind, mask=tuple(range(T)), **kw)

    @classmethod
    def last(cls, kind: str = "mse", **kw) -> "LossSpec":
        return cls(kind=kind, mask=(-1,), **kw)

    def indices(self, T: int) -> np.ndarray:
        idx = np.array([m % T if -T <= m < T else -1 for m in self.mask])
        if np.any(idx < 0):
            raise ConfigurationError(f"mask {self.mask} out of range for T={T}")
        if len(set(idx.tolist())) != len(idx):
            raise ConfigurationError(f"mask {self.mask} has duplicate steps for T={T}")
        return idx

    def denominator(self, T: int) -> int:
        return len(self.mask) if self.normalize == "mask" else T

    def to_dict(self) -> dict:
        return dict(kind=self.kind, mask=list(self.mask), normalize=self.normalize)


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def one_hot_targets(targets, n_out: int) -> np.ndarray:
    """Integer class labels (B, M) or one-hot (B, M, n_out) -> one-hot float array."""
    t = np.asarray(targets)
    if np.issubdtype(t.dtype, np.integer):
        if t.ndim == 1:
            t = t[:, None]
        return np.eye(n_out)[t]
    t = t.astype(float)
    return t[None] if t.ndim == 2 else t


def _masked_targets(traj: Trajectory, targets, spec: LossSpec) -> np.ndarray:
    n_out = traj.y_hat.shape[-1]
    B, M = traj.batch_size, len(spec.mask)
    if spec.kind == "cross_entropy":
        y = one_hot_targets(targets, n_out)
        if not np.allclose(y.sum(-1), 1.0):
            raise ConfigurationError("cross-entropy targets must be one-hot")
    else:
        y = np.asarray(targets, dtype=float)
        if y.ndim == 2 and B == 1:
            y = y[None]
        if y.ndim == 1:
            y = y.reshape(B, M, n_out)
    if y.shape != (B, M, n_out):
        raise ConfigurationError(f"targets have shape {y.shape}, expected {(B, M, n_out)}")
    return y


def loss_and_error(traj: Trajectory, targets, spec: LossSpec):
    """Loss value and dL/dy_hat of shape (B, T, N_out), zero on unmasked rows."""
    B, T = traj.batch_size, traj.T
    idx = spec.indices(T)
    y = _masked_targets(traj, targets, spec)
    yh = traj.y_hat[:, idx]
    denom = spec.denominator(T) * B
    err = np.zeros_like(traj.y_hat)
    if spec.kind == "mse":
        diff = yh - y
        with np.errstate(over="ignore", invalid="ignore"):
            value = 0.5 * np.sum(diff * diff) / denom
        err[:, idx] = diff / denom
    else:
        logp = log_softmax(yh)
        floor = np.log(CE_CLAMP)
        clamped = logp < floor
        value = -np.sum(y * np.maximum(logp, floor)) / denom
        # d/dz of -sum_k pi_k log p_k, with clamped targets contributing nothing
        active = np.sum(y * ~clamped, axis=-1, keepdims=True)
        g = np.exp(logp) * active - y * ~clamped
        err[:, idx] = g / denom
    if not np.isfinite(value):
        raise NumericalOverflowError("non-finite loss")
    return float(value), err


def loss(traj: Trajectory, targets, spec: LossSpec) -> float:
    return loss_and_error(traj, targets, spec)[0]


def loss_at(params: NetworkParams, cfg: NeuronConfig, inputs, targets, spec: LossSpec) -> float:
    """Convenience: forward then loss."""
    return loss(forward(params, cfg, inputs), targets, spec)
