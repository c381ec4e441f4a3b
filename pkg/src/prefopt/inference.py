"""Test-time optimization loops driven by a trained policy.

``optimize`` runs the standard single-query-set loop; ``batch_optimize``
proposes from several independent query sets and acts on the globally
highest acquisition score. Both speak to the task only through a
duel-answering oracle.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import History, all_pairs, simulate_duels, sobol_query_set
from .model import PolicyDistribution, PreferencePolicy

PAIR_CHUNK_CEILING = 2_000_000


@dataclass
class InferenceConfig:
    query_size: int = 256
    budget: int = 30
    batch_count: int = 1
    selection_mode: str = "sample"  # or "argmax"
    initial_duels: int = 1
    sigma_noise: float = 0.0

    def __post_init__(self):
        if self.query_size < 2:
            raise ValueError("query_size must be at least 2")
        if self.batch_count < 1:
            raise ValueError("batch_count must be at least 1")
        if self.selection_mode not in ("sample", "argmax"):
            raise ValueError(f"unknown selection_mode: {self.selection_mode!r}")


class DuelOracle:
    """Answers duel queries from a latent utility in model coordinates."""

    def __init__(self, utility_fn, sigma_noise: float = 0.0, rng=None):
        self.utility_fn = utility_fn
        self.sigma_noise = sigma_noise
        self.rng = rng or np.random.default_rng()

    def utilities(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.utility_fn(np.atleast_2d(x)), dtype=np.float64)

    def answer(self, x1: np.ndarray, x2: np.ndarray) -> tuple[int, float, float]:
        y = self.utilities(np.stack([np.asarray(x1), np.asarray(x2)]))
        label = int(simulate_duels(y[:1], y[1:], self.sigma_noise, self.rng)[0])
        return label, float(y[0]), float(y[1])


@dataclass
class StepRecord:
    step: int
    x1: np.ndarray
    x2: np.ndarray
    label: int
    incumbent: float
    latency_ms: float


@dataclass
class RunResult:
    history: History
    records: list[StepRecord] = field(default_factory=list)

    @property
    def incumbents(self) -> np.ndarray:
        return np.asarray([r.incumbent for r in self.records])


def write_run_records(path, records: list[StepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "x1", "x2", "label", "incumbent", "latency_ms"])
        for r in records:
            writer.writerow(
                [
                    r.step,
                    " ".join(f"{v:.10g}" for v in np.atleast_1d(r.x1)),
                    " ".join(f"{v:.10g}" for v in np.atleast_1d(r.x2)),
                    r.label,
                    f"{r.incumbent:.10g}",
                    f"{r.latency_ms:.3f}",
                ]
            )


def _chunked_logits(
    model: PreferencePolicy, lam_q: torch.Tensor, pairs: np.ndarray, t: int, budget: int
) -> torch.Tensor:
    if pairs.shape[0] <= PAIR_CHUNK_CEILING:
        return model.acquisition_scores(lam_q, pairs, t, budget)
    chunks = []
    for start in range(0, pairs.shape[0], PAIR_CHUNK_CEILING):
        chunks.append(
            model.acquisition_scores(
                lam_q, pairs[start : start + PAIR_CHUNK_CEILING], t, budget
            )
        )
    return torch.cat(chunks)


@dataclass
class _QuerySet:
    points: np.ndarray  # (S, D)
    pairs: np.ndarray  # (P, 2)
    available: np.ndarray  # (P,) bool

    def live_pairs(self) -> np.ndarray:
        return self.pairs[self.available]


def _build_query_sets(
    cfg: InferenceConfig, dimension: int, candidates: np.ndarray | None
) -> list[_QuerySet]:
    if candidates is not None:
        points = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
        sets = [points]
    else:
        bounds = np.array([(-1.0, 1.0)] * dimension)
        pool = sobol_query_set(bounds, cfg.batch_count * cfg.query_size)
        sets = [
            pool[b * cfg.query_size : (b + 1) * cfg.query_size]
            for b in range(cfg.batch_count)
        ]
    out = []
    for pts in sets:
        pairs = all_pairs(pts.shape[0])
        out.append(
            _QuerySet(points=pts, pairs=pairs, available=np.ones(pairs.shape[0], bool))
        )
    return out


def _record_duel(
    history: History,
    records: list[StepRecord],
    oracle: DuelOracle,
    x1,
    x2,
    step: int,
    incumbent: float,
    latency_ms: float,
) -> float:
    label, y1, y2 = oracle.answer(x1, x2)
    history.append(x1, x2, label, y1, y2)
    incumbent = max(incumbent, y1, y2)
    records.append(
        StepRecord(
            step=step,
            x1=np.asarray(x1),
            x2=np.asarray(x2),
            label=label,
            incumbent=incumbent,
            latency_ms=latency_ms,
        )
    )
    return incumbent


def _seed_history(
    cfg: InferenceConfig,
    qset: _QuerySet,
    oracle: DuelOracle,
    history: History,
    records: list[StepRecord],
    rng: np.random.Generator,
) -> float:
    incumbent = -np.inf
    for k in range(cfg.initial_duels):
        live = np.flatnonzero(qset.available)
        gi = live[rng.integers(live.shape[0])]
        qset.available[gi] = False
        i, j = qset.pairs[gi]
        incumbent = _record_duel(
            history, records, oracle, qset.points[i], qset.points[j], -k, incumbent, 0.0
        )
    return incumbent


def optimize(
    model: PreferencePolicy,
    oracle: DuelOracle,
    cfg: InferenceConfig,
    rng: np.random.Generator,
    candidates: np.ndarray | None = None,
    generator: torch.Generator | None = None,
) -> RunResult:
    """Single-query-set loop: propose a pair per step, observe the duel,
    update history and the candidate pair set."""
    dimension = model.cfg.dimension
    (qset,) = _build_query_sets(
        InferenceConfig(**{**cfg.__dict__, "batch_count": 1}), dimension, candidates
    )
    history = History(dimension=dimension, budget=cfg.budget)
    records: list[StepRecord] = []
    incumbent = _seed_history(cfg, qset, oracle, history, records, rng)

    qtok = None
    with torch.no_grad():
        qtok = model.embed_point(qset.points)
        for t in range(1, cfg.budget + 1):
            live = np.flatnonzero(qset.available)
            if live.size == 0:
                raise RuntimeError("candidate pair set exhausted")
            t0 = time.perf_counter()
            hx1, hx2, hl = history.arrays()
            ctx = (
                model.embed_duel(hx1, hx2, hl)
                if hl.shape[0]
                else qtok[:0]
            )
            lam_q = model.encode_query(ctx, qtok)
            logits = _chunked_logits(model, lam_q, qset.pairs[live], t, cfg.budget)
            dist = PolicyDistribution(pairs=qset.pairs[live], logits=logits)
            choice = (
                dist.argmax()
                if cfg.selection_mode == "argmax"
                else dist.sample(generator)
            )
            latency = (time.perf_counter() - t0) * 1000.0
            gi = live[choice]
            qset.available[gi] = False
            i, j = qset.pairs[gi]
            incumbent = _record_duel(
                history, records, oracle, qset.points[i], qset.points[j], t, incumbent, latency
            )
    return RunResult(history=history, records=records)


def batch_optimize(
    model: PreferencePolicy,
    oracle: DuelOracle,
    cfg: InferenceConfig,
    rng: np.random.Generator,
    generator: torch.Generator | None = None,
) -> RunResult:
    """Propose from ``batch_count`` independent query sets; each set offers
    its top-logit pair, the global winner is queried, and only the winning
    set's pair pool shrinks. All sets share one history."""
    if cfg.batch_count == 1 and cfg.selection_mode == "argmax":
        return optimize(model, oracle, cfg, rng, generator=generator)
    dimension = model.cfg.dimension
    qsets = _build_query_sets(cfg, dimension, None)
    history = History(dimension=dimension, budget=cfg.budget)
    records: list[StepRecord] = []
    incumbent = _seed_history(cfg, qsets[0], oracle, history, records, rng)

    with torch.no_grad():
        qtoks = [model.embed_point(qs.points) for qs in qsets]
        for t in range(1, cfg.budget + 1):
            t0 = time.perf_counter()
            hx1, hx2, hl = history.arrays()
            best = None  # (logit, set_index, global_pair_index)
            for b, qs in enumerate(qsets):
                live = np.flatnonzero(qs.available)
                if live.size == 0:
                    continue
                ctx = (
                    model.embed_duel(hx1, hx2, hl)
                    if hl.shape[0]
                    else qtoks[b][:0]
                )
                lam_q = model.encode_query(ctx, qtoks[b])
                logits = _chunked_logits(model, lam_q, qs.pairs[live], t, cfg.budget)
                top = int(torch.argmax(logits).item())
                cand = (float(logits[top]), b, live[top])
                if best is None or cand[0] > best[0]:
                    best = cand
            if best is None:
                raise RuntimeError("all candidate pair sets exhausted")
            latency = (time.perf_counter() - t0) * 1000.0
            _, b, gi = best
            qsets[b].available[gi] = False
            i, j = qsets[b].pairs[gi]
            incumbent = _record_duel(
                history,
                records,
                oracle,
                qsets[b].points[i],
                qsets[b].points[j],
                t,
                incumbent,
                latency,
            )
    return RunResult(history=history, records=records)
