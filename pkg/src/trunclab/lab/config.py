"""Experiment configuration, stored as JSON.

Schema (every key optional, defaults shown by ``ExperimentConfig().to_dict()``):

    {
      "task":     {TaskConfig fields},
      "rule":     "bptt" | "rtrl" | "tbptt:K" | "three_factor_sym" | "three_factor_rf" | "mdgl",
      "update":   {"optimizer": "sgd" | "adam", "eta": float,
                   "schedule": {"kind": "constant" | "step_decay", "initial_multiplier", "decay_fraction", "period"},
                   "step_match": null | rule name, "step_match_scope": "all" | "block"},
      "iterations": int, "eval_every": int,
      "probe":    {"block", "tol", "max_iter", "k", "alignment_top_m", "flatness", "n_examples", "exact_gradient"},
      "stopping": {"enabled", "window", "rtol"},
      "seeds": [int, ...], "out_dir": str, "init_gain": float
    }

A step-decay ``period`` of null means ``iterations // 30``.
"""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, asdict, fields
from pathlib import Path
from typing import List, Optional

from ..errors import ConfigurationError
from ..optim import Schedule, UpdateRuleConfig
from ..rules import parse_rule, TRUNCATED_RULES
from ..tasks import TaskConfig

ETA_GRID = (3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1)
MNIST_BATCH_GRID = (64, 256, 1024)


@dataclass
class ProbeConfig:
    block: str = "W_h"
    tol: float = 1e-4
    max_iter: int = 300
    k: int = 0                      # extra top-k spectrum at the final evaluation
    alignment_top_m: int = 0        # 0 disables alignment statistics
    flatness: bool = False
    n_examples: Optional[int] = None  # cap on training examples used for curvature
    exact_gradient: bool = True     # co-compute BPTT for rho / |e| at evaluations


@dataclass
class StoppingConfig:
    """Stop once loss and lambda1 both moved less than ``rtol`` (relative)
    over the last ``window`` evaluations."""
    enabled: bool = False
    window: int = 10
    rtol: float = 0.02


@dataclass
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    rule: str = "bptt"
    update: UpdateRuleConfig = field(default_factory=UpdateRuleConfig)
    iterations: int = 1000
    eval_every: int = 100
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    stopping: StoppingConfig = field(default_factory=StoppingConfig)
    seeds: List[int] = field(default_factory=lambda: [0])
    out_dir: Optional[str] = None
    init_gain: float = 1.0

    def __post_init__(self):
        parse_rule(self.rule)
        if self.update.step_match is not None:
            if self.update.step_match != "bptt" and self.update.step_match not in TRUNCATED_RULES:
                raise ConfigurationError("step_match reference must be a truncated rule (or bptt)")
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.eval_every < 1 or (self.iterations > 0 and self.eval_every > self.iterations):
            raise ConfigurationError("eval_every must lie in [1, iterations]")
        if not self.seeds:
            raise ConfigurationError("seeds must be non-empty")

    @property
    def rule_tag(self) -> str:
        if self.update.step_match:
            scope = "_block" if self.update.step_match_scope == "block" else ""
            return f"bptt_matched{scope}_{self.update.step_match}"
        return self.rule.replace(":", "").replace("(", "").replace(")", "")

    def schedule(self) -> Schedule:
        return self.update.schedule.resolved(self.iterations)

    def to_dict(self) -> dict:
        return {
            "task": self.task.to_dict(),
            "rule": self.rule,
            "update": self.update.to_dict(),
            "iterations": self.iterations,
            "eval_every": self.eval_every,
            "probe": asdict(self.probe),
            "stopping": asdict(self.stopping),
            "seeds": list(self.seeds),
            "out_dir": self.out_dir,
            "init_gain": self.init_gain,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = copy.deepcopy(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        kw = dict(d)
        if "task" in d:
            kw["task"] = TaskConfig(**d["task"])
        if "update" in d:
            u = dict(d["update"])
            if "schedule" in u and isinstance(u["schedule"], dict):
                u["schedule"] = Schedule(**u["schedule"])
            kw["update"] = UpdateRuleConfig(**u)
        if "probe" in d:
            kw["probe"] = ProbeConfig(**d["probe"])
        if "stopping" in d:
            kw["stopping"] = StoppingConfig(**d["stopping"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``replace(**{"update.eta": 0.03})``."""
        return self.from_dict(apply_overrides(self.to_dict(), overrides))


def apply_overrides(d: dict, overrides: dict) -> dict:
    d = copy.deepcopy(d)
    for key, value in overrides.items():
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return d


def parse_override(text: str):
    """'update.eta=0.03' -> ('update.eta', 0.03); values are parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def save_config(cfg: ExperimentConfig, path):
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")
