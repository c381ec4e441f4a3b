"""Command-line entry points: data generation, training, benchmarking,
serving, and simulated interactive runs.

Training options come from an INI file with one section per profile
(``[paper_defaults]``, ``[desk]``); any key the trainer or model does not
understand is rejected. The effective merged configuration is echoed into
the output directory so a run is reproducible from its artifacts alone.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import sys
from pathlib import Path

import click
import numpy as np
import torch

from .checkpoint import load_checkpoint
from .data import DataConfig
from .evaluation import EvalTask, run_benchmark
from .inference import DuelOracle, InferenceConfig, optimize, write_run_records
from .model import ModelConfig
from .tasks import TestFunction, sample_gp_function, sample_kernel
from .taskio import write_shards
from .training import (
    GPTaskSource,
    ShardTaskSource,
    TrainConfig,
    Trainer,
    desk_model_config,
    desk_train_config,
    train,
)

# Known optima of the built-in benchmark objectives (maximization form).
_F_OPT = {
    "forrester": 6.0207400553619665,
    "branin": -0.39788735772973816,
    "beale": 0.0,
    "ackley6": 0.0,
    "hartmann6": 3.322368011391339,
}

_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
_MODEL_KEYS = {
    f.name: f.type for f in dataclasses.fields(ModelConfig) if f.name != "dimension"
}


def _coerce(key: str, raw: str, annotation: str):
    ann = str(annotation)
    if "bool" in ann:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise click.UsageError(f"config key {key!r}: expected a boolean, got {raw!r}")
    if raw.lower() == "none":
        return None
    try:
        if "float" in ann:
            return float(raw)
        if "int" in ann:
            return int(raw)
    except ValueError:
        raise click.UsageError(f"config key {key!r}: cannot parse {raw!r}")
    return raw


def load_profile(path: Path | None, profile: str) -> tuple[dict, dict]:
    """Read one profile section into (train_overrides, model_overrides)."""
    if path is None:
        return {}, {}
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise click.UsageError(f"cannot read config file {path}")
    if profile not in parser:
        raise click.UsageError(
            f"config file {path} has no [{profile}] section "
            f"(found: {parser.sections()})"
        )
    train_kw, model_kw = {}, {}
    for key, raw in parser[profile].items():
        if key in _TRAIN_KEYS:
            train_kw[key] = _coerce(key, raw, _TRAIN_KEYS[key])
        elif key in _MODEL_KEYS:
            model_kw[key] = _coerce(key, raw, _MODEL_KEYS[key])
        else:
            raise click.UsageError(f"unknown config key {key!r} in [{profile}]")
    return train_kw, model_kw


def _echo_effective(out_dir: Path, train_cfg: TrainConfig, model_cfg: ModelConfig):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"train": train_cfg.__dict__, "model": model_cfg.to_dict()}
    (out_dir / "effective_config.json").write_text(json.dumps(doc, indent=2))
    click.echo(json.dumps(doc, indent=2))


@click.group()
def cli():
    """Amortized preferential optimization toolkit."""


def main(argv=None) -> int:
    """Console entry point. Exit codes: 0 success, 1 usage, 2 runtime."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        return 1
    except Exception as exc:  # runtime failure in a command
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


@cli.command("generate-data")
@click.option("--dimension", type=int, required=True)
@click.option("--count", type=int, required=True, help="Number of tasks to sample.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--tasks-per-shard", type=int, default=100, show_default=True)
def generate_data(dimension, count, seed, out_dir, tasks_per_shard):
    """Sample GP utility functions and write them as task shards."""
    if dimension < 1 or count < 1:
        raise click.UsageError("dimension and count must be positive")
    rng = np.random.default_rng(seed)
    functions = []
    for _ in range(count):
        spec = sample_kernel(rng, dimension)
        functions.append(sample_gp_function(spec, dimension, rng))
    index = write_shards(out_dir, functions, tasks_per_shard)
    click.echo(f"wrote {count} tasks in {len(index['shards'])} shards to {out_dir}")


@cli.command("train")
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path))
@click.option("--profile", default="desk", show_default=True,
              help="Config section to apply (e.g. desk, paper_defaults).")
@click.option("--dimension", type=int, default=1, show_default=True)
@click.option("--data", "data_dir", type=click.Path(exists=True, path_type=Path),
              help="Task shard directory; omitted = sample GP tasks on the fly.")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--resume", is_flag=True, help="Continue from <out>/checkpoint.bin.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
def train_cmd(config_path, profile, dimension, data_dir, out_dir, resume, seed):
    """Pre-train the policy on synthetic preferential meta-tasks."""
    train_kw, model_kw = load_profile(config_path, profile)
    if seed is not None:
        train_kw["seed"] = seed
    if profile == "desk" and config_path is None:
        train_cfg = desk_train_config(**train_kw)
        model_cfg = dataclasses.replace(desk_model_config(dimension), **model_kw)
    else:
        train_cfg = TrainConfig(**train_kw)
        model_cfg = ModelConfig(dimension=dimension, **model_kw)

    source = (
        ShardTaskSource(data_dir) if data_dir else GPTaskSource(dimension)
    )
    out_dir = Path(out_dir)
    ckpt = out_dir / "checkpoint.bin"
    if resume:
        if not ckpt.exists():
            raise click.UsageError(f"--resume given but {ckpt} does not exist")
        trainer = Trainer.resume(ckpt, source, out_dir)
        _echo_effective(out_dir, trainer.config, trainer.model.cfg)
        final = trainer.run()
    else:
        _echo_effective(out_dir, train_cfg, model_cfg)
        final = train(train_cfg, model_cfg, source, out_dir)
    click.echo(f"checkpoint: {final}")


def _standard_task(name: str) -> EvalTask:
    fn = TestFunction(name)
    return EvalTask(
        name=name,
        utility_fn=fn.eval_unit,
        f_opt=_F_OPT[name],
        dimension=fn.dimension,
    )


@cli.command("evaluate")
@click.option("--checkpoint", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--function", "functions", multiple=True, required=True,
              type=click.Choice(sorted(_F_OPT)), help="Benchmark objective(s).")
@click.option("--strategies", default="model,random", show_default=True)
@click.option("--seeds", type=int, default=30, show_default=True,
              help="Number of repeat runs per task and strategy.")
@click.option("--budget", type=int, default=30, show_default=True)
@click.option("--query-size", type=int, default=256, show_default=True)
@click.option("--batch-count", type=int, default=1, show_default=True)
@click.option("--selection-mode", default="sample", show_default=True,
              type=click.Choice(["sample", "argmax"]))
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
def evaluate(checkpoint, functions, strategies, seeds, budget, query_size,
             batch_count, selection_mode, out_dir):
    """Benchmark a trained policy against baselines on known objectives."""
    model, _, _ = load_checkpoint(checkpoint)
    model.eval()
    tasks = [_standard_task(name) for name in functions]
    for t in tasks:
        if t.dimension != model.cfg.dimension:
            raise click.UsageError(
                f"{t.name} is {t.dimension}-dimensional but the checkpoint "
                f"expects dimension {model.cfg.dimension}"
            )
    cfg = InferenceConfig(
        query_size=query_size,
        budget=budget,
        batch_count=batch_count,
        selection_mode=selection_mode,
    )
    summary = run_benchmark(
        model, tasks, strategies.split(","), list(range(seeds)), cfg, Path(out_dir)
    )
    for (task_name, strategy), agg in summary.items():
        final = agg["mean_regret"][-1]
        hw = agg["ci_halfwidth"][-1]
        click.echo(
            f"{task_name}/{strategy}: final regret {final:.4f} +/- {hw:.4f} "
            f"({agg['runs']} runs, {agg['mean_latency_ms']:.1f} ms/step)"
        )


@cli.command("serve")
@click.option("--checkpoint", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--sessions-dir", type=click.Path(path_type=Path), default="sessions",
              show_default=True)
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(checkpoint, sessions_dir, host, port):
    """Expose interactive optimization sessions over HTTP."""
    import uvicorn

    from .service import create_app

    app = create_app(model_path=checkpoint, sessions_dir=Path(sessions_dir))
    uvicorn.run(app, host=host, port=port)


@cli.command("simulate")
@click.option("--checkpoint", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--function", "function_name", required=True,
              type=click.Choice(sorted(_F_OPT)))
@click.option("--budget", type=int, default=16, show_default=True)
@click.option("--query-size", type=int, default=128, show_default=True)
@click.option("--selection-mode", default="sample", show_default=True,
              type=click.Choice(["sample", "argmax"]))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(path_type=Path),
              help="Write per-step records as CSV.")
def simulate(checkpoint, function_name, budget, query_size, selection_mode, seed,
             out_path):
    """Run one simulated session where duels are answered by the objective."""
    model, _, _ = load_checkpoint(checkpoint)
    model.eval()
    task = _standard_task(function_name)
    if task.dimension != model.cfg.dimension:
        raise click.UsageError(
            f"{function_name} is {task.dimension}-dimensional but the "
            f"checkpoint expects dimension {model.cfg.dimension}"
        )
    rng = np.random.default_rng(seed)
    generator = torch.Generator()
    generator.manual_seed(seed)
    oracle = DuelOracle(task.utility_fn, rng=rng)
    cfg = InferenceConfig(
        query_size=query_size, budget=budget, selection_mode=selection_mode
    )
    result = optimize(model, oracle, cfg, rng, generator=generator)
    for rec in result.records:
        click.echo(
            f"step {rec.step:3d}  label={rec.label}  "
            f"incumbent={rec.incumbent:.5f}  regret={task.f_opt - rec.incumbent:.5f}"
        )
    if out_path:
        write_run_records(out_path, result.records)
        click.echo(f"records written to {out_path}")


if __name__ == "__main__":
    sys.exit(main())
