"""Experiment protocols: learning curves, step-size sweeps, CDF studies and regret audits.

Runs are batched: all runs of an experiment advance together through numpy, run
``i`` drawing from its own generator seeded with ``seed_base + i``.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import envs, gtd, metrics
from .olo import FeasibleSet

ALGORITHMS = gtd.PF_VARIANTS + gtd.BASELINES
STEP_GRID = tuple(2.0 ** -i for i in range(10, -1, -1))


@dataclass
class ExperimentConfig:
    env: str = "random-walk-tabular"
    algo: str = "pfgtd+"
    runs: int = 200
    steps: int = 5000
    seed: int = 0
    alpha: float = 2.0 ** -5
    objective: str = "mspbe"
    radius: float = 100.0
    average: bool = False
    cadence: int = 1
    W0: float = 1.0
    eps_hat: float = 1.0
    warm_start: str = "auto"  # auto | on | off
    baird_behavior: str = "equiprobable"
    tdc_ratio: float = 1.0
    tdrc_beta: float = 1.0
    cdf_dist: str = "log-uniform"
    cdf_range: tuple = (2.0 ** -10, 1.0)
    workers: int = 1

    def __post_init__(self):
        self.algo = self.algo.lower()
        if self.algo not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algo!r}; choose from {list(ALGORITHMS)}")
        if self.env not in envs.ENVIRONMENTS and self.env not in envs.STREAM_ENVIRONMENTS:
            raise ValueError(f"unknown environment {self.env!r}")
        if self.runs < 1:
            raise ValueError("runs must be at least 1")
        if self.steps < 0 or self.cadence < 1:
            raise ValueError("steps must be >= 0 and cadence >= 1")
        if self.objective not in ("mspbe", "neu"):
            raise ValueError("objective must be mspbe or neu")
        if self.warm_start not in ("auto", "on", "off"):
            raise ValueError("warm_start must be auto, on or off")
        if self.cdf_dist not in ("log-uniform", "uniform"):
            raise ValueError("cdf_dist must be log-uniform or uniform")
        lo, hi = self.cdf_range = tuple(float(v) for v in self.cdf_range)
        if not 0 < lo <= hi:
            raise ValueError("cdf_range must satisfy 0 < low <= high")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cdf_range"] = list(self.cdf_range)
        return d

    @property
    def is_baseline(self) -> bool:
        return self.algo in gtd.BASELINES

    def uses_baird_init(self) -> bool:
        if self.warm_start == "auto":
            return self.env.startswith("baird")
        return self.warm_start == "on"

    def spec(self) -> envs.MdpSpec:
        return envs.make_env(self.env, self.baird_behavior)


@dataclass
class RunRecord:
    run_index: int
    seed: int
    metrics: List[float]
    final: float
    initial: float
    hyperparameters: dict = field(default_factory=dict)

    @property
    def diverged(self) -> bool:
        return not math.isfinite(self.final)


def cadence_steps(n_steps: int, cadence: int) -> List[int]:
    """Steps at which the metric is recorded: ``min(k * cadence, n)`` for k = 1..ceil(n / cadence)."""
    k = -(-n_steps // cadence)
    return [min(i * cadence, n_steps) for i in range(1, k + 1)]


def _initial_theta(config: ExperimentConfig, d: int):
    if config.uses_baird_init():
        if d != envs.BAIRD_INIT.shape[0]:
            raise ValueError("the Baird initialization needs 8 features")
        return envs.BAIRD_INIT.copy()
    return None


def make_learner(config: ExperimentConfig, d: int, n: int, alphas=None, track_regret=False):
    theta0 = _initial_theta(config, d)
    if config.is_baseline:
        alpha = config.alpha if alphas is None else np.asarray(alphas, float)
        bc = gtd.BaselineConfig(config.algo, alpha, config.tdc_ratio, config.tdrc_beta)
        return gtd.BaselineLearner(bc, d, (n,), theta0=theta0, average=config.average)
    return gtd.pfgtd_factory(config.algo, d, config.W0, config.eps_hat,
                             FeasibleSet(config.radius), warm_start=theta0, shape=(n,),
                             objective=config.objective, track_regret=track_regret)


def _simulate(config: ExperimentConfig, seeds: Sequence[int], alphas=None):
    """Run a batch; returns ``(initial (n,), curve (n, K))`` of RMSPBE values."""
    spec = config.spec()
    model = metrics.build_exact_model(spec, config.objective)
    n = len(seeds)
    learner = make_learner(config, spec.dim, n, alphas)
    sampler = envs.BatchSampler(spec, seeds)
    marks = set(cadence_steps(config.steps, config.cadence))
    curve = []
    diverged = np.zeros(n, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        initial = metrics.rmspbe(model, learner.estimate())
        for t in range(1, config.steps + 1):
            learner.step(sampler.sample())
            if t in marks:
                val = metrics.rmspbe(model, learner.estimate())
                diverged |= ~np.isfinite(val)
                curve.append(np.where(diverged, np.inf, val))
    curve = np.stack(curve, axis=1) if curve else np.zeros((n, 0))
    return initial, curve


def _simulate_chunk(args):
    config, seeds, alphas = args
    return _simulate(config, seeds, alphas)


def _run(config: ExperimentConfig, alphas=None):
    seeds = [config.seed + i for i in range(config.runs)]
    if config.workers <= 1:
        return _simulate(config, seeds, alphas)
    chunks = np.array_split(np.arange(config.runs), config.workers)
    jobs = [(config, [seeds[i] for i in c], None if alphas is None else np.asarray(alphas)[c])
            for c in chunks if len(c)]
    with ProcessPoolExecutor(config.workers) as pool:
        parts = list(pool.map(_simulate_chunk, jobs))
    return (np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]))


def _records(config, initial, curve, alphas=None) -> List[RunRecord]:
    out = []
    for i in range(config.runs):
        hp = {} if alphas is None else {"alpha": float(alphas[i])}
        row = [float(v) for v in curve[i]]
        final = row[-1] if row else float(initial[i])
        out.append(RunRecord(i, config.seed + i, row, final, float(initial[i]), hp))
    return out


def aggregate(values: np.ndarray):
    """Mean and standard error over finite entries per column, plus the diverged count."""
    values = np.asarray(values, float)
    finite = np.isfinite(values)
    cnt = finite.sum(axis=0)
    safe = np.where(finite, values, 0.0)
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        mean = safe.sum(axis=0) / cnt
        var = (np.where(finite, values - mean, 0.0) ** 2).sum(axis=0) / (cnt - 1)
        se = np.sqrt(var / cnt)
    se = np.where(cnt > 1, se, 0.0)
    diverged = int((~np.isfinite(values[:, -1])).sum()) if values.shape[1] else 0
    return mean, se, diverged


@dataclass
class CurveResult:
    config: ExperimentConfig
    steps: List[int]
    mean: np.ndarray
    stderr: np.ndarray
    n_diverged: int
    records: List[RunRecord]

    @property
    def initial_mean(self) -> float:
        return float(np.mean([r.initial for r in self.records]))

    @property
    def final_mean(self) -> float:
        return float(self.mean[-1]) if len(self.mean) else self.initial_mean

    def summary(self) -> dict:
        return {
            "n_runs": len(self.records),
            "n_diverged": self.n_diverged,
            "initial_mean": self.initial_mean,
            "final_mean": self.final_mean,
            "final_stderr": float(self.stderr[-1]) if len(self.stderr) else 0.0,
            "curve": [{"step": s, "mean": float(m), "stderr": float(e)}
                      for s, m, e in zip(self.steps, self.mean, self.stderr)],
        }


def run_learning_curves(config: ExperimentConfig) -> CurveResult:
    if config.env in envs.STREAM_ENVIRONMENTS:
        raise ValueError("prediction streams have no exact model; use run_stream_smape")
    initial, curve = _run(config)
    mean, se, div = aggregate(curve)
    return CurveResult(config, cadence_steps(config.steps, config.cadence), mean, se, div,
                       _records(config, initial, curve))


def sweep_step_sizes(config: ExperimentConfig, grid: Sequence[float] = STEP_GRID):
    """Grid-tune a baseline's step size by area under its mean curve (diverged runs count as +inf)."""
    if not config.is_baseline:
        raise ValueError("only baselines have a step size to sweep")
    table = []
    for a in grid:
        cfg = ExperimentConfig(**{**config.to_dict(), "alpha": float(a)})
        res = run_learning_curves(cfg)
        curve = np.array([r.metrics for r in res.records])
        with np.errstate(over="ignore", invalid="ignore"):
            area = float(np.mean(curve, axis=0).sum()) if curve.size else res.initial_mean
        if not math.isfinite(area):
            area = math.inf
        table.append({"alpha": float(a), "area": area, "final_mean": res.final_mean,
                      "n_diverged": res.n_diverged})
    best = min(table, key=lambda r: (r["area"], r["alpha"]))
    return best["alpha"], table


def draw_step_sizes(config: ExperimentConfig) -> np.ndarray:
    rng = np.random.default_rng([config.seed, 1])
    lo, hi = config.cdf_range
    if config.cdf_dist == "log-uniform":
        return np.exp2(rng.uniform(math.log2(lo), math.log2(hi), config.runs))
    return rng.uniform(lo, hi, config.runs)


def empirical_cdf(values) -> List[tuple]:
    """Sorted ``(x, fraction <= x)`` pairs, one per distinct value."""
    x = np.sort(np.asarray(values, float))
    n = len(x)
    out = []
    for i, v in enumerate(x):
        if i + 1 < n and x[i + 1] == v:
            continue
        out.append((float(v), (i + 1) / n))
    return out


@dataclass
class CdfResult:
    config: ExperimentConfig
    finals: np.ndarray
    cdf: List[tuple]
    alphas: Optional[np.ndarray]
    records: List[RunRecord]

    def iqr(self) -> float:
        q1, q3 = np.quantile(self.finals, [0.25, 0.75])
        return float(q3 - q1)

    def summary(self) -> dict:
        return {
            "n_runs": len(self.finals),
            "n_diverged": int((~np.isfinite(self.finals)).sum()),
            "iqr": self.iqr(),
            "median": float(np.median(self.finals)),
            "cdf": [list(p) for p in self.cdf],
        }


def run_cdf_study(config: ExperimentConfig) -> CdfResult:
    alphas = draw_step_sizes(config) if config.is_baseline else None
    initial, curve = _run(config, alphas)
    recs = _records(config, initial, curve, alphas)
    finals = np.array([r.final for r in recs])
    return CdfResult(config, np.sort(finals), empirical_cdf(finals), alphas, recs)


def run_regret_audit(config: ExperimentConfig) -> dict:
    """Per-run regrets against the exact saddle point and the averaged-iterate gap.

    Besides the stochastic regret, the exact-gradient regret is accumulated so the
    deterministic inequality ``L(theta_bar, y*) - L(theta*, y_bar) <= R_exact / T``
    can be reported alongside.
    """
    if config.is_baseline:
        raise ValueError("the regret audit applies to parameter-free variants")
    spec = config.spec()
    model = metrics.build_exact_model(spec, config.objective)
    seeds = [config.seed + i for i in range(config.runs)]
    learner = make_learner(config, spec.dim, config.runs, track_regret=True)
    sampler = envs.BatchSampler(spec, seeds)
    A, b, M = model.A, model.b, model.M
    th_s, y_s = model.theta_star, model.y_star
    exact = np.zeros(config.runs)
    for _ in range(config.steps):
        theta, y = learner.current()
        exact += np.sum(-(y @ A) * (theta - th_s), axis=-1)
        exact += np.sum((-b + theta @ A.T + y @ M) * (y - y_s), axis=-1)
        learner.step(sampler.sample())
    T = max(config.steps, 1)
    if config.steps:
        r_t, r_y, tot = learner.regret.regret(th_s, y_s)
        th_bar, y_bar = learner.state.theta_avg, learner.state.y_avg
    else:
        r_t = r_y = tot = np.zeros(config.runs)
        th_bar, y_bar = learner.current()
    gap = metrics.duality_gap(model, th_bar, y_bar, config.radius)
    lhs = model.lagrangian(th_bar, y_s) - model.lagrangian(th_s, y_bar)
    rows = []
    for i in range(config.runs):
        bound = float(tot[i]) / T
        rows.append({
            "run": i, "seed": seeds[i],
            "regret_theta": float(r_t[i]), "regret_y": float(r_y[i]),
            "gap": float(gap[i]), "regret_bound": bound,
            "pass": bool(gap[i] <= bound + 1e-9),
            "exact_regret": float(exact[i]),
            "partial_gap": float(lhs[i]),
            "exact_pass": bool(lhs[i] <= exact[i] / T + 1e-9),
        })
    return {
        "lambda_max_M": model.lambda_max_M,
        "radius": config.radius,
        "steps": config.steps,
        "singular": model.singular,
        "pass_rate": float(np.mean([r["pass"] for r in rows])),
        "exact_pass_rate": float(np.mean([r["exact_pass"] for r in rows])),
        "runs": rows,
    }


# ---------------------------------------------------------------------------
# multi-scale prediction streams


def run_stream_smape(config: ExperimentConfig, n_signals: int = 4,
                     scales=(1.0, 10.0, 100.0, 1000.0), noise=0.1) -> dict:
    """Predict every signal's discounted return online and score by SMAPE.

    Signals form the batch dimension; each gets an independent learner over the
    shared features.  The prediction at step t is made before seeing r_t.
    """
    scales = np.broadcast_to(np.asarray(scales, float), (n_signals,))
    stream = envs.multi_scale_stream(n_signals, scales, np.asarray(noise) * scales, config.seed,
                                     n_steps=config.steps)
    d = stream.features.shape[1]
    cfg = ExperimentConfig(**{**config.to_dict(), "warm_start": "off", "env": "multi-scale"})
    learner = make_learner(cfg, d, n_signals)
    T = stream.rewards.shape[0]
    preds = np.empty((T, n_signals))
    ones = np.ones(n_signals)
    for t in range(T):
        phi = np.broadcast_to(stream.features[t], (n_signals, d))
        preds[t] = np.sum(learner.estimate() * phi, axis=-1)
        nxt = np.broadcast_to(stream.features[t + 1], (n_signals, d))
        learner.step(envs.TransitionSample(phi, nxt, stream.rewards[t], ones, stream.gamma))
    returns = metrics.true_returns(stream.rewards, stream.gamma)
    scores = [metrics.smape(preds[:, k], returns[:, k]) for k in range(n_signals)]
    return {"scales": scales.tolist(), "smape": scores}


# ---------------------------------------------------------------------------
# outputs


def content_hash(payload: bytes) -> str:
    """Git blob hash of ``payload``."""
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


def _fmt(v: float) -> str:
    return repr(float(v))


def emit_outputs(records: Sequence[RunRecord], config: ExperimentConfig, out_prefix: str,
                 summary: Optional[dict] = None, cadence_marks: Optional[Sequence[int]] = None):
    """Write ``<prefix>.csv`` (``step,run,metric``) and ``<prefix>.json``; returns both paths."""
    csv_path, json_path = out_prefix + ".csv", out_prefix + ".json"
    marks = list(cadence_marks) if cadence_marks is not None else cadence_steps(config.steps, config.cadence)
    cfg = config.to_dict()
    cfg_bytes = json.dumps(cfg, sort_keys=True).encode()
    doc = {"config": cfg, "input_hash": content_hash(cfg_bytes),
           "summary": summary if summary is not None else {"n_runs": len(records)}}
    if not records:
        doc["summary"] = {**doc["summary"], "n_runs": 0}
    try:
        parent = os.path.dirname(os.path.abspath(csv_path))
        os.makedirs(parent, exist_ok=True)
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "run", "metric"])
            for r in records:
                for s, m in zip(marks, r.metrics):
                    w.writerow([s, r.run_index, _fmt(m)])
        with open(json_path, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True, allow_nan=True)
            f.write("\n")
    except OSError as e:
        raise OSError(f"could not write results to {e.filename or out_prefix}: {e.strerror}") from e
    return csv_path, json_path
