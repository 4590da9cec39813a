"""Training loops with curvature instrumentation, sweeps and summaries."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import stats

from ..core import NetworkParams, block_indices, forward, init_params, loss_and_error
from ..curvature import curvature_report, hessian_operator, leading_eigenvalue, top_k_eigenvalues
from ..errors import ConfigurationError, NumericalOverflowError
from ..geometry import alignment_with, decompose
from ..optim import AdamState, adam_step, lr_at, sgd_step, step_matched_update
from ..rules import compute_gradient
from ..tasks import (TaskBatch, accuracy, gen_dms, gen_pattern, generalization_gap, load_mnist_split,
                     sample_test_delays)
from .config import ETA_GRID, ExperimentConfig
from . import persist
from .persist import ROW_COLUMNS

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Task data
# ---------------------------------------------------------------------------

@dataclass
class TaskData:
    train: TaskBatch
    tests: List[TaskBatch]
    probe: TaskBatch
    meta: dict = field(default_factory=dict)


def _head(batch: TaskBatch, n: Optional[int]) -> TaskBatch:
    if n is None or n >= batch.inputs.shape[0]:
        return batch
    return TaskBatch(batch.inputs[:n], batch.targets[:n], batch.spec, dict(batch.meta))


def prepare_task(cfg: ExperimentConfig, seed: int) -> TaskData:
    tc = cfg.task
    if tc.task == "pattern_gen":
        train = gen_pattern(tc, seed)
        sigma = tc.test_noise_sigma
        if sigma is None:
            sigma = float(np.random.default_rng([seed, 3]).uniform(0.0, 0.2))
        tests = [gen_pattern(tc, seed, sigma)]
        meta = {"test_noise_sigma": sigma}
    elif tc.task == "dms":
        train = gen_dms(tc, seed)
        delays = sample_test_delays(tc, seed)
        tests = [gen_dms(tc, seed, d) for d in delays]
        meta = {"test_delays": delays}
    else:
        tr = load_mnist_split("train", tc.mnist_dir)
        te = load_mnist_split("test", tc.mnist_dir)
        if tc.n_train > len(tr) or tc.n_test > len(te):
            raise ConfigurationError(f"requested {tc.n_train}/{tc.n_test} examples, "
                                     f"data has {len(tr)}/{len(te)}")
        train = tr.subset(slice(0, tc.n_train)).batch()
        tests = [te.subset(slice(0, tc.n_test)).batch(noise_sigma=tc.mnist_noise_sigma,
                                                       rng=np.random.default_rng([seed, 5]))]
        meta = {"test_noise_sigma": tc.mnist_noise_sigma, "n_train": tc.n_train, "n_test": tc.n_test}
    return TaskData(train, tests, _head(train, cfg.probe.n_examples), meta)


def _metric(params, ncfg, batch: TaskBatch):
    traj = forward(params, ncfg, batch.inputs)
    value, _ = loss_and_error(traj, batch.targets, batch.spec)
    return value, accuracy(traj, batch.targets, batch.spec)


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    config: dict
    seed: int
    rule: str
    rows: List[dict] = field(default_factory=list)
    final: Optional[dict] = None
    completed: bool = False
    abort_reason: Optional[str] = None
    wall_time: float = 0.0
    meta: dict = field(default_factory=dict)
    params: Optional[NetworkParams] = field(default=None, repr=False, compare=False)

    @property
    def run_id(self) -> str:
        return f"{self.config['task']['task']}_{self.rule}_seed{self.seed}"

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=float)

    def to_dict(self) -> dict:
        """Everything except the final parameters, which are stored separately."""
        return {k: copy.deepcopy(getattr(self, k)) for k in
                ("config", "seed", "rule", "rows", "final", "completed", "abort_reason", "wall_time", "meta")}

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(**d)


def _stabilized(rows, window: int, rtol: float) -> bool:
    if len(rows) < window:
        return False
    for key in ("train_loss", "lambda1"):
        v = np.array([r[key] for r in rows[-window:]], dtype=float)
        scale = abs(np.mean(v))
        if not np.all(np.isfinite(v)) or scale == 0.0 or (v.max() - v.min()) / scale > rtol:
            return False
    return True


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

class _Evaluator:
    def __init__(self, cfg: ExperimentConfig, data: TaskData, ncfg, seed: int):
        self.cfg, self.data, self.ncfg, self.seed = cfg, data, ncfg, seed
        self.v0 = None
        self.idx = block_indices(ncfg, cfg.probe.block)
        self.last_power = None

    def _rule_for_rho(self) -> Optional[str]:
        if self.cfg.update.step_match:
            return self.cfg.update.step_match
        return self.cfg.rule

    def __call__(self, it: int, params: NetworkParams, lr: float) -> dict:
        cfg, pb, ncfg = self.cfg, self.data.probe, self.ncfg
        train_loss, train_metric = _metric(params, ncfg, self.data.train)
        test_metric = float(np.mean([_metric(params, ncfg, b)[1] for b in self.data.tests]))
        op = hessian_operator(params, ncfg, pb.inputs, pb.targets, pb.spec, cfg.probe.block)
        pr = leading_eigenvalue(op, tol=cfg.probe.tol, max_iter=cfg.probe.max_iter, seed=self.seed, v0=self.v0)
        self.v0, self.last_power = pr.vector, pr
        row = dict(iter=it, lr=lr, train_loss=train_loss, train_metric=train_metric, test_metric=test_metric,
                   lambda1=pr.value, lambda1_iters=pr.iterations, rho=math.nan, g_norm=math.nan,
                   e_norm=math.nan, align_g=math.nan, align_e=math.nan)
        if cfg.probe.exact_gradient:
            g = compute_gradient("bptt", params, ncfg, pb.inputs, pb.targets, pb.spec).flat
            row["g_norm"] = float(np.linalg.norm(g))
            ref = self._rule_for_rho()
            g_hat = g if ref == "bptt" else compute_gradient(ref, params, ncfg, pb.inputs, pb.targets, pb.spec).flat
            if np.any(g):
                d = decompose(g_hat, g)
                row["rho"], row["e_norm"] = d.rho, d.e_norm
                m = cfg.probe.alignment_top_m
                if m:
                    res = top_k_eigenvalues(op, m, tol=cfg.probe.tol, max_iter=cfg.probe.max_iter, seed=self.seed)
                    row["align_g"] = alignment_with(g[self.idx], res.vectors)
                    if np.linalg.norm(d.e[self.idx]) > 0:
                        row["align_e"] = alignment_with(d.e[self.idx], res.vectors)
        return row


def run_training(cfg: ExperimentConfig, seed: int, out_dir=None, data: Optional[TaskData] = None,
                 stop_when: Optional[Callable[[dict], bool]] = None, save_params: bool = True,
                 tag: Optional[str] = None) -> RunRecord:
    """One training run; evaluation rows every ``eval_every`` iterations.

    ``stop_when(row)`` ends the run early after an evaluation.  Numerical
    overflow aborts the run; the record keeps every row evaluated before it.
    """
    t0 = time.perf_counter()
    ncfg = cfg.task.neuron_config()
    data = data if data is not None else prepare_task(cfg, seed)
    params = init_params(ncfg, np.random.default_rng(seed), cfg.init_gain)
    schedule = cfg.schedule()
    rule_tag = tag or cfg.rule_tag
    rec = RunRecord(config=cfg.to_dict(), seed=seed, rule=rule_tag,
                    meta={"init": "gaussian, var 1/N (W_h, w_out, B_fb), 1/N_in (W_x)", **data.meta})
    evaluate = _Evaluator(cfg, data, ncfg, seed)
    adam = AdamState.zeros(params.flatten().size, cfg.update.adam_beta1, cfg.update.adam_beta2,
                           cfg.update.adam_eps) if cfg.update.optimizer == "adam" else None
    batch_rng = np.random.default_rng([seed, 4])
    train = data.train
    n_train = train.inputs.shape[0]
    bs = cfg.task.batch_size
    stopped_by = None
    match_blocks = None
    if cfg.update.step_match_scope == "block":
        match_blocks = [block_indices(ncfg, b) for b in ("W_x", "W_h", "readout")]
    it = 0
    try:
        for it in range(cfg.iterations + 1):
            lr = lr_at(schedule, cfg.update.eta, it)
            if it % cfg.eval_every == 0 or it == cfg.iterations:
                row = evaluate(it, params, lr)
                rec.rows.append(row)
                if stop_when is not None and stop_when(row):
                    stopped_by = "target"
                    break
                if cfg.stopping.enabled and _stabilized(rec.rows, cfg.stopping.window, cfg.stopping.rtol):
                    stopped_by = "stabilized"
                    break
            if it == cfg.iterations:
                break
            if bs and bs < n_train:
                sel = np.sort(batch_rng.choice(n_train, bs, replace=False))
                x, y = train.inputs[sel], train.targets[sel]
            else:
                x, y = train.inputs, train.targets
            if cfg.update.step_match:
                g = compute_gradient("bptt", params, ncfg, x, y, train.spec)
                g_hat = g if cfg.update.step_match == "bptt" else compute_gradient(
                    cfg.update.step_match, params, ncfg, x, y, train.spec)
                params, _ = step_matched_update(params, g, g_hat, lr, match_blocks)
            else:
                g_hat = compute_gradient(cfg.rule, params, ncfg, x, y, train.spec)
                if adam is not None:
                    params, adam = adam_step(params, g_hat, adam, lr)
                else:
                    params = sgd_step(params, g_hat, lr)
    except (NumericalOverflowError, FloatingPointError) as exc:
        rec.abort_reason = "overflow"
        rec.meta["abort_detail"] = str(exc)
        rec.meta["abort_iter"] = it
        log.warning("run %s aborted at iteration %d: %s", rec.run_id, it, exc)

    if rec.abort_reason is None:
        rec.completed = True
        last = rec.rows[-1]
        task = cfg.task.task
        final = {
            "iter": last["iter"],
            "train_metric": last["train_metric"],
            "test_metric": last["test_metric"],
            "gap": generalization_gap(last["train_metric"], last["test_metric"], task),
            "lambda1": last["lambda1"],
            "stopped_by": stopped_by,
            "stabilized": _stabilized(rec.rows, cfg.stopping.window, cfg.stopping.rtol),
            "eigensolver_converged": bool(evaluate.last_power.converged),
        }
        if cfg.probe.k or cfg.probe.flatness:
            pb = data.probe
            rep = curvature_report(params, ncfg, pb.inputs, pb.targets, pb.spec, block=cfg.probe.block,
                                   k=cfg.probe.k, tol=cfg.probe.tol, max_iter=cfg.probe.max_iter, seed=seed,
                                   flatness=cfg.probe.flatness)
            final["curvature"] = rep.to_dict()
        rec.final = final
    rec.wall_time = time.perf_counter() - t0
    if out_dir is not None:
        persist.save_record(rec, out_dir)
        if save_params and rec.completed:
            persist.save_params(params, Path(out_dir) / f"{rec.run_id}.params.json")
    rec.params = params
    return rec


# ---------------------------------------------------------------------------
# Sweeps and summaries
# ---------------------------------------------------------------------------

def _mean_std(v):
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    return float(np.mean(v)), float(np.std(v, ddof=1)) if v.size > 1 else 0.0


def _rule_stats(records: Sequence[RunRecord]) -> dict:
    done = sorted((r for r in records if r.completed), key=lambda r: r.seed)
    gaps = [r.final["gap"] for r in done]
    lams = [r.final["lambda1"] for r in done]
    out = {"n_completed": len(done), "n_aborted": len(records) - len(done),
           "seeds": [r.seed for r in done], "gaps": gaps, "lambda1_final": lams}
    out["gap_mean"], out["gap_std"] = _mean_std(gaps)
    out["lambda1_mean"], out["lambda1_std"] = _mean_std(lams)
    for key in ("train_metric", "test_metric"):
        out[key + "_mean"], out[key + "_std"] = _mean_std([r.final[key] for r in done])
    if done:
        n = min(len(r.rows) for r in done)
        curves = np.array([[row["lambda1"] for row in r.rows[:n]] for r in done])
        out["curve_iters"] = [r for r in (row["iter"] for row in done[0].rows[:n])]
        out["lambda1_curve_mean"] = curves.mean(axis=0).tolist()
        out["lambda1_curve_std"] = (curves.std(axis=0, ddof=1) if len(done) > 1 else np.zeros(n)).tolist()
    return out


def gap_lambda_correlation(gaps, lambdas) -> dict:
    """Spearman rank correlation and Pearson correlation on log lambda1."""
    gaps = np.asarray(gaps, dtype=float)
    lambdas = np.asarray(lambdas, dtype=float)
    ok = np.isfinite(gaps) & np.isfinite(lambdas)
    gaps, lambdas = gaps[ok], lambdas[ok]
    out = {"n": int(gaps.size), "spearman_r": math.nan, "spearman_p": math.nan,
           "pearson_log_r": math.nan, "pearson_log_p": math.nan}
    if gaps.size < 3 or np.ptp(gaps) == 0 or np.ptp(lambdas) == 0:
        return out
    sp = stats.spearmanr(gaps, lambdas)
    out["spearman_r"], out["spearman_p"] = float(sp.statistic), float(sp.pvalue)
    pos = lambdas > 0
    if pos.sum() >= 3:
        pr = stats.pearsonr(gaps[pos], np.log(lambdas[pos]))
        out["pearson_log_r"], out["pearson_log_p"] = float(pr.statistic), float(pr.pvalue)
    return out


@dataclass
class SweepSummary:
    per_rule: Dict[str, dict]
    correlation: dict
    n_runs: int
    n_completed: int
    n_aborted: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(records: Sequence[RunRecord], extra: Optional[dict] = None) -> SweepSummary:
    by_rule: Dict[str, list] = {}
    for r in records:
        by_rule.setdefault(r.rule, []).append(r)
    per_rule = {rule: _rule_stats(rs) for rule, rs in sorted(by_rule.items())}
    done = sorted((r for r in records if r.completed), key=lambda r: (r.rule, r.seed))
    corr = gap_lambda_correlation([r.final["gap"] for r in done], [r.final["lambda1"] for r in done])
    n_done = len(done)
    return SweepSummary(per_rule, corr, len(records), n_done, len(records) - n_done, extra or {})


def run_sweep(cfg: ExperimentConfig, rules: Sequence[str], seeds: Sequence[int], out_dir=None,
              records_out: Optional[list] = None) -> SweepSummary:
    """Cross-product of rules and seeds; aborted runs are counted, not fatal."""
    if len(seeds) < 2:
        raise ConfigurationError("a sweep needs at least two seeds")
    records = []
    for rule in rules:
        rcfg = cfg.replace(rule=rule)
        for seed in seeds:
            records.append(run_training(rcfg, seed, out_dir))
    if records_out is not None:
        records_out.extend(records)
    return summarize(records)


def run_step_matched(cfg: ExperimentConfig, reference_rule: str, seeds: Sequence[int], out_dir=None,
                     lr_multiplier: float = 1.0, records_out: Optional[list] = None) -> SweepSummary:
    """BPTT updates scaled by the reference rule's rho, at ``lr_multiplier`` times eta."""
    mcfg = cfg.replace(**{"rule": "bptt", "update.step_match": reference_rule,
                          "update.eta": cfg.update.eta * lr_multiplier})
    records = [run_training(mcfg, s, out_dir) for s in seeds]
    if records_out is not None:
        records_out.extend(records)
    return summarize(records, {"reference_rule": reference_rule, "lr_multiplier": lr_multiplier})


def _reached(target: float, task: str) -> Callable[[dict], bool]:
    if task == "pattern_gen":
        return lambda row: row["test_metric"] <= target
    return lambda row: row["test_metric"] >= target


def run_early_stop_control(cfg: ExperimentConfig, target_test_metric: float, seeds: Sequence[int],
                           out_dir=None, reference: Optional[Sequence[RunRecord]] = None,
                           records_out: Optional[list] = None) -> SweepSummary:
    """BPTT stopped at the first evaluation whose test metric reaches the target.

    ``reference`` records (e.g. the three-factor sweep) are summarised
    alongside.  Runs that never reach the target are flagged.
    """
    bcfg = cfg.replace(rule="bptt")
    stop = _reached(target_test_metric, cfg.task.task)
    records = []
    for s in seeds:
        rec = run_training(bcfg, s, out_dir, stop_when=stop, tag="bptt_early_stop")
        if rec.completed:
            rec.final["target_reached"] = rec.final["stopped_by"] == "target"
            rec.final["target_test_metric"] = target_test_metric
        records.append(rec)
    unreached = [r.seed for r in records if r.completed and not r.final["target_reached"]]
    if unreached:
        log.warning("early-stop target %.4g not reached for seeds %s", target_test_metric, unreached)
    if records_out is not None:
        records_out.extend(records)
    all_records = list(records) + list(reference or [])
    return summarize(all_records, {"target_test_metric": target_test_metric, "unreached_seeds": unreached})


def select_learning_rate(cfg: ExperimentConfig, seed: int = 0, grid: Sequence[float] = ETA_GRID,
                         criterion: str = "train") -> float:
    """Best eta on the grid by final train metric ('train') or held-out metric ('validation')."""
    if criterion not in ("train", "validation"):
        raise ConfigurationError("criterion must be 'train' or 'validation'")
    key = "train_metric" if criterion == "train" else "test_metric"
    lower_better = cfg.task.task == "pattern_gen"
    best, best_val = None, None
    for eta in grid:
        rec = run_training(cfg.replace(**{"update.eta": eta, "probe.exact_gradient": False}), seed)
        if not rec.completed:
            continue
        v = rec.final[key]
        if best is None or (v < best_val if lower_better else v > best_val):
            best, best_val = eta, v
    if best is None:
        raise NumericalOverflowError("every learning rate on the grid overflowed")
    return best
