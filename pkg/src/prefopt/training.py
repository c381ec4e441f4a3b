"""Policy pre-training: rollouts, policy-gradient loss, auxiliary BCE loss.

The run alternates two phases. A warm-up phase trains only the preference
prediction path; afterwards the combined loss adds the discounted
policy-gradient term computed from rollouts over fresh meta-task batches.
"""

from __future__ import annotations

import csv
import json
import math
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy.stats import rankdata

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    DataConfig,
    History,
    MetaTask,
    build_meta_task,
    sample_pairs,
    simulate_duels,
    split_prediction_set,
)
from .model import ModelConfig, PreferencePolicy
from .tasks import sample_gp_function, sample_kernel
from .taskio import read_shards, read_task

PROB_CLAMP = 1e-7


@dataclass
class TrainConfig:
    warmup_iters: int = 3000
    total_iters: int = 8000
    horizon: int = 64
    lr_warmup: float = 1e-3
    lr_main: float = 3e-5
    batch_warmup: int = 128
    batch_main: int = 16
    trajectories_per_task: int = 20
    loss_weight: float = 1.0
    gamma: float = 0.98
    reward_mode: str = "utility"  # or "ranking"
    return_to_go: bool = False
    # subtract the per-task mean reward across that task's trajectories;
    # removes the arbitrary utility offset each task carries without
    # changing the estimator's expectation
    use_baseline: bool = False
    # tasks per rollout graph (0 = whole batch); smaller chunks trade speed
    # for memory, allowing more trajectories per task
    rollout_chunk: int = 0
    grad_clip: float = 1.0
    sigma_noise: float = 0.0
    # prediction splits evaluated per iteration during the policy phase;
    # None means one per rollout step (the full per-step reshuffle)
    prediction_splits: int | None = None
    eval_interval: int = 100
    eval_tasks: int = 32
    checkpoint_interval: int = 500
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.warmup_iters > self.total_iters:
            raise ValueError("warmup_iters cannot exceed total_iters")
        if self.reward_mode not in ("utility", "ranking"):
            raise ValueError(f"unknown reward_mode: {self.reward_mode!r}")

    def lr_at(self, iteration: int) -> float:
        if iteration < self.warmup_iters:
            return self.lr_warmup
        span = max(self.total_iters - self.warmup_iters, 1)
        progress = (iteration - self.warmup_iters) / span
        return self.lr_main * 0.5 * (1.0 + math.cos(math.pi * progress))


def desk_train_config(**overrides) -> TrainConfig:
    """CPU-scale preset: small model, short horizon, small batches."""
    base = TrainConfig(
        warmup_iters=1500,
        total_iters=3000,
        horizon=16,
        lr_main=1e-4,
        batch_warmup=32,
        batch_main=8,
        trajectories_per_task=24,
        rollout_chunk=2,
        use_baseline=True,
        prediction_splits=2,
        eval_interval=100,
        checkpoint_interval=500,
    )
    return replace(base, **overrides)


def desk_model_config(dimension: int) -> ModelConfig:
    return ModelConfig(dimension=dimension, embed_dim=32, layers=3, heads=4)


# ---------------------------------------------------------------------------
# Rewards
# ---------------------------------------------------------------------------


def reward(history: History, t: int) -> float:
    """Running maximum of all utilities observed through duel ``t``."""
    if t < 1 or t > len(history.labels):
        raise ValueError(f"step {t} outside history of {len(history.labels)} duels")
    vals = [
        v
        for y1, y2 in zip(history.y1[:t], history.y2[:t])
        for v in (y1, y2)
        if v is not None
    ]
    return float(max(vals))


def rewards_from_ranking(utilities: np.ndarray) -> np.ndarray:
    """Normalized average ranks in [0, 1]; invariant to monotone transforms."""
    utilities = np.asarray(utilities, dtype=np.float64)
    n = utilities.shape[0]
    if n == 1:
        return np.zeros(1)
    return (rankdata(utilities, method="average") - 1.0) / (n - 1.0)


# ---------------------------------------------------------------------------
# Rollouts
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """Per-step record of one rollout."""

    pair_indices: np.ndarray  # (T, 2) query-point indices
    log_probs: torch.Tensor  # (T,)
    rewards: np.ndarray  # (T,)
    labels: np.ndarray  # (T,)
    history: History


def rollout(
    model: PreferencePolicy,
    task: MetaTask,
    horizon: int,
    rng: np.random.Generator,
    generator: torch.Generator | None = None,
    reward_mode: str = "utility",
    sigma_noise: float = 0.0,
) -> Trajectory:
    """Run one on-policy episode on a single task."""
    m = task.candidate_pairs.shape[0]
    if m < horizon:
        raise ValueError(f"candidate pair set of {m} cannot cover horizon {horizon}")
    scores = (
        rewards_from_ranking(task.query_utilities)
        if reward_mode == "ranking"
        else task.query_utilities
    )
    available = np.ones(m, dtype=bool)
    history = History(dimension=task.dimension, budget=horizon)
    pair_rows, log_probs, rewards_, labels = [], [], [], []
    running = -np.inf
    for t in range(1, horizon + 1):
        live = np.flatnonzero(available)
        dist = model.forward_acquisition(
            history, task.query_points, task.candidate_pairs[live], t, horizon
        )
        choice = dist.sample(generator)
        log_probs.append(dist.log_probs[choice])
        gi = live[choice]
        available[gi] = False
        i, j = task.candidate_pairs[gi]
        y1, y2 = float(task.query_utilities[i]), float(task.query_utilities[j])
        label = int(simulate_duels(np.array([y1]), np.array([y2]), sigma_noise, rng)[0])
        history.append(task.query_points[i], task.query_points[j], label, y1, y2)
        running = max(running, float(scores[i]), float(scores[j]))
        pair_rows.append((i, j))
        rewards_.append(running)
        labels.append(label)
    return Trajectory(
        pair_indices=np.asarray(pair_rows),
        log_probs=torch.stack(log_probs),
        rewards=np.asarray(rewards_),
        labels=np.asarray(labels),
        history=history,
    )


def batch_rollouts(
    model: PreferencePolicy,
    tasks: list[MetaTask],
    n_traj: int,
    horizon: int,
    rng: np.random.Generator,
    generator: torch.Generator,
    reward_mode: str = "utility",
    sigma_noise: float = 0.0,
) -> tuple[torch.Tensor, np.ndarray]:
    """Vectorized episodes: ``n_traj`` rollouts for each task in one graph.

    Returns step log-probabilities (E, T) with E = len(tasks) * n_traj, and
    the matching reward array.
    """
    b = len(tasks)
    e = b * n_traj
    dtype = next(model.parameters()).dtype

    qpts = np.stack([t.query_points for t in tasks])  # (B, S, D)
    utils = np.stack([t.query_utilities for t in tasks])  # (B, S)
    pairs = np.stack([t.candidate_pairs for t in tasks])  # (B, M, 2)
    m = pairs.shape[1]
    if m < horizon:
        raise ValueError("candidate pair sets cannot cover the horizon")
    if reward_mode == "ranking":
        scores = np.stack([rewards_from_ranking(u) for u in utils])
    else:
        scores = utils

    qtok = model.embed_point(qpts).repeat_interleave(n_traj, dim=0)  # (E, S, emb)
    pairs_e = np.repeat(pairs, n_traj, axis=0)
    pairs_t = torch.as_tensor(pairs_e, dtype=torch.long)
    utils_e = np.repeat(utils, n_traj, axis=0)
    scores_e = np.repeat(scores, n_traj, axis=0)

    available = torch.ones(e, m, dtype=torch.bool)
    rows = np.arange(e)
    hx1 = np.zeros((e, 0, qpts.shape[2]))
    hx2 = np.zeros_like(hx1)
    hlab = np.zeros((e, 0), dtype=np.int64)
    running = np.full(e, -np.inf)
    step_log_probs = []
    rewards_ = np.zeros((e, horizon))

    for t in range(1, horizon + 1):
        if hlab.shape[1]:
            ctx = model.embed_duel(hx1, hx2, hlab)
        else:
            ctx = torch.zeros(e, 0, model.cfg.embed_dim, dtype=dtype)
        lam_q = model.encode_query(ctx, qtok)
        logits = model.acquisition_scores(lam_q, pairs_e, t, horizon)
        logits = logits.masked_fill(~available, float("-inf"))
        log_probs = torch.log_softmax(logits, dim=-1)
        actions = torch.multinomial(
            log_probs.detach().exp(), 1, generator=generator
        ).squeeze(1)
        step_log_probs.append(log_probs.gather(1, actions[:, None]).squeeze(1))
        a = actions.numpy()
        available[rows, a] = False

        ij = pairs_e[rows, a]  # (E, 2)
        y1 = utils_e[rows, ij[:, 0]]
        y2 = utils_e[rows, ij[:, 1]]
        labels = simulate_duels(y1, y2, sigma_noise, rng)
        running = np.maximum(
            running, np.maximum(scores_e[rows, ij[:, 0]], scores_e[rows, ij[:, 1]])
        )
        rewards_[:, t - 1] = running

        x1 = np.take_along_axis(
            np.repeat(qpts, n_traj, axis=0), ij[:, 0][:, None, None], axis=1
        )
        x2 = np.take_along_axis(
            np.repeat(qpts, n_traj, axis=0), ij[:, 1][:, None, None], axis=1
        )
        hx1 = np.concatenate([hx1, x1], axis=1)
        hx2 = np.concatenate([hx2, x2], axis=1)
        hlab = np.concatenate([hlab, labels[:, None]], axis=1)

    return torch.stack(step_log_probs, dim=1), rewards_


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def rl_loss(
    log_probs: torch.Tensor,
    rewards: np.ndarray,
    gamma: float,
    return_to_go: bool = False,
) -> torch.Tensor:
    """Negative discounted reward-weighted log-likelihood, averaged over
    trajectories. Rewards are constants (no gradient flows through them)."""
    if log_probs.dim() == 1:
        log_probs = log_probs[None]
        rewards = np.asarray(rewards)[None]
    horizon = log_probs.shape[1]
    r = np.asarray(rewards, dtype=np.float64)
    discounts = gamma ** np.arange(horizon)
    if return_to_go:
        # G_t = sum_{s >= t} gamma^{s-t} r_s, each step weighted by gamma^{t-1}
        g = np.zeros_like(r)
        acc = np.zeros(r.shape[0])
        for t in range(horizon - 1, -1, -1):
            acc = r[:, t] + gamma * acc
            g[:, t] = acc
        w = g * discounts
    else:
        w = r * discounts
    weights = torch.as_tensor(np.ascontiguousarray(w), dtype=log_probs.dtype)
    return -(weights * log_probs).sum(dim=1).mean()


def bce_loss(predicted: torch.Tensor, labels) -> torch.Tensor:
    """Summed binary cross entropy over held-out pairs, probabilities
    clamped away from {0, 1}."""
    labels_t = torch.as_tensor(np.asarray(labels), dtype=predicted.dtype)
    p = predicted.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    return -(labels_t * p.log() + (1.0 - labels_t) * (1.0 - p).log()).sum()


def prediction_loss(
    model: PreferencePolicy,
    splits: list,
    generator: torch.Generator | None = None,
    scale: float = 1.0,
) -> torch.Tensor:
    """Mean over splits' owning tasks of the summed BCE; ``splits`` is a list
    of (task_index, PredictionSplit). Padded batched forward."""
    dtype = next(model.parameters()).dtype
    d = model.cfg.dimension
    n = len(splits)
    c_max = max(s.n_ctx for _, s in splits)
    l_max = max(s.tar_points.shape[0] for _, s in splits)

    cx1 = np.zeros((n, c_max, d))
    cx2 = np.zeros((n, c_max, d))
    clab = np.zeros((n, c_max))
    cvalid = torch.zeros(n, c_max, dtype=torch.bool)
    tar = np.zeros((n, l_max, d))
    for k, (_, s) in enumerate(splits):
        c, l = s.n_ctx, s.tar_points.shape[0]
        cx1[k, :c] = s.ctx_x1
        cx2[k, :c] = s.ctx_x2
        clab[k, :c] = s.ctx_labels
        cvalid[k, :c] = True
        tar[k, :l] = s.tar_points

    total = c_max + l_max
    mask = torch.zeros(n, total, total, dtype=torch.bool)
    mask[:, :, :c_max] = cvalid[:, None, :]
    mask |= torch.eye(total, dtype=torch.bool)[None]

    ctx_tok = model.embed_duel(cx1, cx2, clab)
    tar_tok = model.embed_point(tar)
    lam = model.encode_query(ctx_tok, tar_tok, mask=mask)
    pred = model.predict_gaussian(lam)
    noise = torch.randn(pred.mean.shape, dtype=dtype, generator=generator)
    ybar = pred.mean + pred.var.sqrt() * noise

    per_task: dict[int, torch.Tensor] = {}
    for k, (task_idx, s) in enumerate(splits):
        pr = torch.as_tensor(s.tar_pairs, dtype=torch.long)
        lbar = torch.sigmoid(ybar[k, pr[:, 1]] - ybar[k, pr[:, 0]])
        loss = bce_loss(lbar, s.tar_labels)
        per_task[task_idx] = per_task.get(task_idx, 0.0) + loss
    return scale * torch.stack(list(per_task.values())).mean()


def prediction_accuracy(model: PreferencePolicy, splits: list) -> float:
    """Held-out duel accuracy using the predictive means (no sampling)."""
    correct = total = 0
    with torch.no_grad():
        for _, s in splits:
            ctx = model.embed_duel(s.ctx_x1, s.ctx_x2, s.ctx_labels)
            lam = model.encode_query(ctx, model.embed_point(s.tar_points))
            mu = model.predict_gaussian(lam).mean
            pred = (mu[s.tar_pairs[:, 1]] > mu[s.tar_pairs[:, 0]]).numpy()
            correct += int(np.sum(pred.astype(int) == s.tar_labels))
            total += s.n_tar_pairs
    return correct / max(total, 1)


# ---------------------------------------------------------------------------
# Task sources
# ---------------------------------------------------------------------------


class GPTaskSource:
    """Fresh GP meta-tasks sampled on the fly."""

    def __init__(self, dimension: int, data_config: DataConfig | None = None):
        self.dimension = dimension
        self.data_config = data_config or DataConfig()

    def __call__(self, rng: np.random.Generator, count: int) -> list[MetaTask]:
        tasks = []
        for _ in range(count):
            spec = sample_kernel(rng, self.dimension)
            fn = sample_gp_function(spec, self.dimension, rng)
            tasks.append(build_meta_task(fn, "continuous", self.data_config, rng))
        return tasks


class ShardTaskSource:
    """Meta-tasks built from pre-generated task shards on disk."""

    def __init__(self, data_dir: Path, data_config: DataConfig | None = None):
        self.paths = read_shards(data_dir)
        if not self.paths:
            raise ValueError(f"no tasks found under {data_dir}")
        self.data_config = data_config or DataConfig()
        probe = read_task(self.paths[0])
        self.dimension = probe.dimension

    def __call__(self, rng: np.random.Generator, count: int) -> list[MetaTask]:
        idx = rng.integers(0, len(self.paths), size=count)
        return [
            build_meta_task(read_task(self.paths[i]), "continuous", self.data_config, rng)
            for i in idx
        ]


# ---------------------------------------------------------------------------
# Trainer
# ---------------------------------------------------------------------------


def _iter_rng(seed: int, iteration: int, tag: str = "") -> np.random.Generator:
    tag_key = zlib.crc32(tag.encode())
    return np.random.default_rng(
        np.random.SeedSequence([seed, iteration & 0xFFFFFFFF, tag_key])
    )


def _iter_generator(seed: int, iteration: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed((seed * 1_000_003 + iteration) % (2**63))
    return g


LOG_FIELDS = ["iter", "phase", "loss_q", "loss_p", "holdout_acc", "lr", "wall_ms"]


class Trainer:
    def __init__(
        self,
        model: PreferencePolicy,
        config: TrainConfig,
        task_source,
        out_dir: Path,
    ):
        self.model = model
        self.config = config
        self.source = task_source
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.optimizer = torch.optim.Adam(
            model.parameters(), lr=config.lr_warmup, betas=(0.9, 0.999), eps=1e-8
        )
        self.iteration = 0
        self._eval_splits = None

    # -- persistence -------------------------------------------------------

    def _adam_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        names = [n for n, _ in self.model.named_parameters()]
        for name, p in zip(names, self.model.parameters()):
            state = self.optimizer.state.get(p)
            if not state:
                continue
            out[f"adam.{name}.exp_avg"] = state["exp_avg"]
            out[f"adam.{name}.exp_avg_sq"] = state["exp_avg_sq"]
            out[f"adam.{name}.step"] = torch.as_tensor(
                float(state["step"]), dtype=torch.float32
            )
        return out

    def _restore_adam(self, tensors: dict[str, torch.Tensor]):
        names = {n: p for n, p in self.model.named_parameters()}
        for name, p in names.items():
            key = f"adam.{name}.exp_avg"
            if key not in tensors:
                continue
            self.optimizer.state[p] = {
                "step": torch.tensor(float(tensors[f"adam.{name}.step"].item())),
                "exp_avg": tensors[key].clone(),
                "exp_avg_sq": tensors[f"adam.{name}.exp_avg_sq"].clone(),
            }

    def save(self, path: Path):
        save_checkpoint(
            path,
            self.model,
            extra_state={"iteration": self.iteration, "train_config": self.config.__dict__},
            extra_tensors=self._adam_tensors(),
        )

    @classmethod
    def resume(cls, path: Path, task_source, out_dir: Path) -> "Trainer":
        model, extra, extra_tensors = load_checkpoint(path)
        config = TrainConfig(**extra["train_config"])
        trainer = cls(model, config, task_source, out_dir)
        trainer.iteration = int(extra["iteration"])
        trainer._restore_adam(extra_tensors)
        return trainer

    # -- evaluation --------------------------------------------------------

    def _holdout_splits(self):
        if self._eval_splits is None:
            rng = _iter_rng(self.config.seed, -1, "holdout")
            tasks = self.source(rng, self.config.eval_tasks)
            self._eval_splits = [
                (i, split_prediction_set(t, rng)) for i, t in enumerate(tasks)
            ]
        return self._eval_splits

    def holdout_accuracy(self) -> float:
        return prediction_accuracy(self.model, self._holdout_splits())

    # -- stepping ----------------------------------------------------------

    def step(self) -> dict:
        cfg = self.config
        it = self.iteration
        if it >= cfg.total_iters:
            raise ValueError("training already complete")
        warmup = it < cfg.warmup_iters
        rng = _iter_rng(cfg.seed, it, "tasks")
        generator = _iter_generator(cfg.seed, it)
        t0 = time.perf_counter()

        lr = cfg.lr_at(it)
        for group in self.optimizer.param_groups:
            group["lr"] = lr

        def fail(val_q: float, val_p: float):
            dump = {"iteration": it, "loss_q": val_q, "loss_p": val_p}
            (self.out_dir / "diagnostic.json").write_text(json.dumps(dump))
            raise FloatingPointError(f"non-finite loss at iteration {it}: {dump}")

        self.optimizer.zero_grad(set_to_none=True)
        if warmup:
            tasks = self.source(rng, cfg.batch_warmup)
            splits = [(i, split_prediction_set(t, rng)) for i, t in enumerate(tasks)]
            loss_p = prediction_loss(self.model, splits, generator)
            val_q, val_p = 0.0, float(loss_p.detach())
            if not torch.isfinite(loss_p):
                fail(val_q, val_p)
            loss_p.backward()
        else:
            tasks = self.source(rng, cfg.batch_main)
            # rollouts go through the graph in task chunks so the retained
            # activations stay bounded regardless of trajectory count
            chunk = cfg.rollout_chunk or len(tasks)
            val_q = 0.0
            for c0 in range(0, len(tasks), chunk):
                part = tasks[c0 : c0 + chunk]
                log_probs, rewards = batch_rollouts(
                    self.model,
                    part,
                    cfg.trajectories_per_task,
                    cfg.horizon,
                    rng,
                    generator,
                    reward_mode=cfg.reward_mode,
                    sigma_noise=cfg.sigma_noise,
                )
                rewards = np.asarray(rewards)
                if cfg.use_baseline:
                    shaped = rewards.reshape(
                        len(part), cfg.trajectories_per_task, cfg.horizon
                    )
                    rewards = (
                        shaped - shaped.mean(axis=1, keepdims=True)
                    ).reshape(rewards.shape)
                part_loss = rl_loss(
                    log_probs, rewards, cfg.gamma, cfg.return_to_go
                ) * (len(part) / len(tasks))
                if not torch.isfinite(part_loss):
                    fail(float(part_loss.detach()), 0.0)
                part_loss.backward()
                val_q += float(part_loss.detach())
            n_splits = cfg.prediction_splits or cfg.horizon
            splits = [
                (i, split_prediction_set(t, rng))
                for i, t in enumerate(tasks)
                for _ in range(n_splits)
            ]
            loss_p = prediction_loss(
                self.model, splits, generator, scale=cfg.horizon / n_splits
            )
            val_p = float(loss_p.detach())
            if not torch.isfinite(loss_p):
                fail(val_q, val_p)
            (cfg.loss_weight * loss_p).backward()

        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip)
        self.optimizer.step()

        self.iteration += 1
        return {
            "iter": it,
            "phase": "warmup" if warmup else "policy",
            "loss_q": val_q,
            "loss_p": val_p,
            "holdout_acc": "",
            "lr": lr,
            "wall_ms": (time.perf_counter() - t0) * 1000.0,
        }

    def run(self, log_path: Path | None = None, progress=None) -> Path:
        log_path = log_path or self.out_dir / "training_log.csv"
        new_log = not Path(log_path).exists()
        ckpt = self.out_dir / "checkpoint.bin"
        with open(log_path, "a", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            if new_log:
                writer.writeheader()
            while self.iteration < self.config.total_iters:
                metrics = self.step()
                done = self.iteration
                if (
                    done % self.config.eval_interval == 0
                    or done == self.config.total_iters
                ):
                    metrics["holdout_acc"] = self.holdout_accuracy()
                writer.writerow(metrics)
                fh.flush()
                if (
                    done % self.config.checkpoint_interval == 0
                    or done == self.config.total_iters
                ):
                    self.save(ckpt)
                if progress is not None:
                    progress(metrics)
        return ckpt


def train(
    config: TrainConfig,
    model_config: ModelConfig,
    task_source,
    out_dir: Path,
    progress=None,
) -> Path:
    """Train from scratch; returns the final checkpoint path."""
    torch.manual_seed(config.seed)
    model = PreferencePolicy(model_config)
    trainer = Trainer(model, config, task_source, out_dir)
    return trainer.run(progress=progress)
