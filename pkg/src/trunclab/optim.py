"""Parameter updates: SGD, Adam, learning-rate schedules and step matching.

Updates are functional: each returns new parameters and never touches
``B_fb``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .core import NetworkParams, BLOCK_ORDER
from .errors import ConfigurationError, NumericalOverflowError
from .geometry import decompose
from .rules import GradientEstimate

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    """``constant`` or ``step_decay``.

    step_decay: ``eta * initial_multiplier * (1 - decay_fraction) ** (iter // period)``.
    ``period=None`` is resolved by the training loop to ``iterations // 30``.
    """
    kind: str = "constant"
    initial_multiplier: float = 3.0
    decay_fraction: float = 0.8
    period: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("constant", "step_decay"):
            raise ConfigurationError(f"unknown schedule {self.kind!r}")
        if self.kind == "step_decay":
            if not 0.0 < self.decay_fraction < 1.0:
                raise ConfigurationError("decay_fraction must lie in (0, 1)")
            if self.period is not None and self.period < 1:
                raise ConfigurationError("period must be >= 1")

    def resolved(self, iterations: int) -> "Schedule":
        if self.period is not None:
            return self
        return Schedule(self.kind, self.initial_multiplier, self.decay_fraction, max(1, iterations // 30))

    def to_dict(self) -> dict:
        return dict(kind=self.kind, initial_multiplier=self.initial_multiplier,
                    decay_fraction=self.decay_fraction, period=self.period)


@dataclass(frozen=True)
class UpdateRuleConfig:
    optimizer: str = "sgd"
    eta: float = 0.01
    schedule: Schedule = field(default_factory=Schedule)
    step_match: Optional[str] = None
    step_match_scope: str = "all"          # "all": one rho; "block": one rho per W_x, W_h, w_out
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if not self.eta > 0:
            raise ConfigurationError("eta must be positive")
        if self.step_match_scope not in ("all", "block"):
            raise ConfigurationError(f"unknown step_match_scope {self.step_match_scope!r}")

    def to_dict(self) -> dict:
        return dict(optimizer=self.optimizer, eta=self.eta, schedule=self.schedule.to_dict(),
                    step_match=self.step_match, step_match_scope=self.step_match_scope, adam_beta1=self.adam_beta1,
                    adam_beta2=self.adam_beta2, adam_eps=self.adam_eps)

    @classmethod
    def from_dict(cls, d: dict) -> "UpdateRuleConfig":
        d = dict(d)
        d["schedule"] = Schedule(**d.get("schedule", {}))
        return cls(**d)


def lr_at(schedule: Schedule, eta: float, iteration: int) -> float:
    if iteration < 0:
        raise ConfigurationError("iteration must be >= 0")
    if schedule.kind == "constant":
        return eta
    if schedule.period is None:
        raise ConfigurationError("step_decay period is unresolved; call Schedule.resolved(iterations)")
    return eta * schedule.initial_multiplier * (1.0 - schedule.decay_fraction) ** (iteration // schedule.period)


def _apply(params: NetworkParams, delta: np.ndarray) -> NetworkParams:
    new = params.with_flat(params.flatten() + delta)
    for name in BLOCK_ORDER:
        if not np.all(np.isfinite(getattr(new, name))):
            raise NumericalOverflowError("non-finite parameters after update", block=name)
    return new


def _flat(grad) -> np.ndarray:
    return grad.flat if isinstance(grad, GradientEstimate) else np.asarray(grad, dtype=float)


def sgd_step(params: NetworkParams, grad, eta: float) -> NetworkParams:
    g = _flat(grad)
    if g.shape != (params.flatten().size,):
        raise ConfigurationError(f"gradient has {g.size} entries, parameters have {params.flatten().size}")
    return _apply(params, -eta * g)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, dim: int, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(np.zeros(dim), np.zeros(dim), 0, beta1, beta2, eps)


def adam_step(params: NetworkParams, grad, state: AdamState, eta: float) -> Tuple[NetworkParams, AdamState]:
    g = _flat(grad)
    if g.shape != state.m.shape:
        raise ConfigurationError("Adam state does not match the gradient dimension")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new = _apply(params, -eta * m_hat / (np.sqrt(v_hat) + state.eps))
    return new, AdamState(m, v, t, state.beta1, state.beta2, state.eps)


def step_matched_update(params: NetworkParams, grad_exact, grad_approx, eta: float, blocks=None):
    """Exact-gradient step scaled by the approximate rule's rho.

    Returns ``(new_params, rho)``; a zero exact gradient skips the update and
    returns ``rho = nan``.  With ``blocks`` (a list of flat index arrays
    partitioning the parameters) each block is scaled by its own rho; the
    along-gradient progress <dW, g> still equals the approximate rule's, and
    the returned rho is the whole-vector value.
    """
    g = _flat(grad_exact)
    gh = _flat(grad_approx)
    if not np.any(g):
        log.info("step-matched update skipped: exact gradient is zero")
        return params, math.nan
    rho = decompose(gh, g).rho
    if blocks is None:
        return _apply(params, -eta * rho * g), rho
    scale = np.zeros_like(g)
    for idx in blocks:
        gb = g[idx]
        # a block with zero exact gradient takes no step
        scale[idx] = decompose(gh[idx], gb).rho if np.any(gb) else 0.0
    return _apply(params, -eta * scale * g), rho
