"""Regret metrics, the random acquisition baseline, and benchmark reports."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import History
from .inference import (
    DuelOracle,
    InferenceConfig,
    RunResult,
    StepRecord,
    _build_query_sets,
    _record_duel,
    _seed_history,
)
from .model import PreferencePolicy

CI_Z = 1.96


def simple_regret(observed_utilities: np.ndarray, f_opt: float) -> np.ndarray:
    """Per-step gap between the optimum and the best utility observed so
    far. ``observed_utilities`` holds the per-step best observation."""
    if f_opt is None:
        raise ValueError("simple regret needs the true optimum value")
    observed = np.asarray(observed_utilities, dtype=np.float64)
    return f_opt - np.maximum.accumulate(observed)


def cumulative_simple_regret(regret: np.ndarray) -> np.ndarray:
    return np.cumsum(np.asarray(regret, dtype=np.float64))


def random_baseline(
    oracle: DuelOracle,
    cfg: InferenceConfig,
    rng: np.random.Generator,
    dimension: int,
    candidates: np.ndarray | None = None,
) -> RunResult:
    """Uniformly random pair from the remaining candidate set each step."""
    (qset,) = _build_query_sets(
        InferenceConfig(**{**cfg.__dict__, "batch_count": 1}), dimension, candidates
    )
    history = History(dimension=dimension, budget=cfg.budget)
    records: list[StepRecord] = []
    incumbent = _seed_history(cfg, qset, oracle, history, records, rng)
    for t in range(1, cfg.budget + 1):
        live = np.flatnonzero(qset.available)
        if live.size == 0:
            raise RuntimeError("candidate pair set exhausted")
        t0 = time.perf_counter()
        gi = live[rng.integers(live.size)]
        latency = (time.perf_counter() - t0) * 1000.0
        qset.available[gi] = False
        i, j = qset.pairs[gi]
        incumbent = _record_duel(
            history, records, oracle, qset.points[i], qset.points[j], t, incumbent, latency
        )
    return RunResult(history=history, records=records)


@dataclass
class EvalTask:
    """A benchmark problem with known optimum, in model coordinates."""

    name: str
    utility_fn: object  # callable on (n, D) unit-coordinate points
    f_opt: float
    dimension: int
    candidates: np.ndarray | None = None


def _strategy_run(
    strategy: str,
    model: PreferencePolicy | None,
    task: EvalTask,
    cfg: InferenceConfig,
    seed: int,
) -> RunResult:
    rng = np.random.default_rng(seed)
    oracle = DuelOracle(task.utility_fn, cfg.sigma_noise, rng)
    if strategy == "random":
        return random_baseline(oracle, cfg, rng, task.dimension, task.candidates)
    if strategy == "model":
        if model is None:
            raise ValueError("model strategy needs a model")
        generator = torch.Generator()
        generator.manual_seed(seed)
        return model_strategy_run(model, oracle, cfg, rng, task, generator)
    raise ValueError(f"unknown strategy: {strategy!r}")


def model_strategy_run(model, oracle, cfg, rng, task, generator) -> RunResult:
    from .inference import batch_optimize, optimize

    if cfg.batch_count > 1:
        return batch_optimize(model, oracle, cfg, rng, generator=generator)
    return optimize(model, oracle, cfg, rng, candidates=task.candidates, generator=generator)


def run_benchmark(
    model: PreferencePolicy | None,
    tasks: list[EvalTask],
    strategies: list[str],
    seeds: list[int],
    cfg: InferenceConfig,
    out_dir: Path,
) -> dict:
    """Run every strategy on every task over the seed list; write raw
    per-step records, aggregate regret traces with 95% confidence
    intervals, and a metadata file."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    raw_rows = []
    failures = []
    summary = {}
    for task in tasks:
        for strategy in strategies:
            traces = []
            latencies = []
            for seed in seeds:
                try:
                    result = _strategy_run(strategy, model, task, cfg, seed)
                except Exception as exc:  # recorded, excluded from aggregates
                    failures.append(
                        {"task": task.name, "strategy": strategy, "seed": seed, "error": str(exc)}
                    )
                    continue
                regret = simple_regret(result.incumbents, task.f_opt)
                traces.append(regret)
                latencies.append(
                    np.mean([r.latency_ms for r in result.records if r.step >= 1])
                )
                for rec, reg in zip(result.records, regret):
                    raw_rows.append(
                        [task.name, strategy, seed, rec.step, f"{reg:.10g}",
                         f"{rec.incumbent:.10g}", f"{rec.latency_ms:.3f}"]
                    )
            if not traces:
                continue
            arr = np.stack(traces)  # (runs, steps)
            mean = arr.mean(axis=0)
            stderr = arr.std(axis=0, ddof=1) / np.sqrt(arr.shape[0]) if arr.shape[0] > 1 else np.zeros(arr.shape[1])
            summary[(task.name, strategy)] = {
                "runs": arr.shape[0],
                "mean_regret": mean,
                "ci_halfwidth": CI_Z * stderr,
                "mean_latency_ms": float(np.mean(latencies)),
            }

    with open(out_dir / "runs.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "strategy", "seed", "step", "simple_regret", "incumbent", "latency_ms"])
        writer.writerows(raw_rows)

    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "strategy", "runs", "step", "mean_regret", "ci_halfwidth", "mean_latency_ms"])
        for (task_name, strategy), agg in summary.items():
            for step, (m, h) in enumerate(zip(agg["mean_regret"], agg["ci_halfwidth"])):
                writer.writerow(
                    [task_name, strategy, agg["runs"], step, f"{m:.10g}", f"{h:.10g}",
                     f"{agg['mean_latency_ms']:.3f}"]
                )

    meta = {
        "strategies": strategies,
        "tasks": [t.name for t in tasks],
        "seeds": seeds,
        "config": cfg.__dict__,
        "failures": failures,
    }
    (out_dir / "meta.txt").write_text(json.dumps(meta, indent=2))
    return summary
