import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

ARTIFACT_ROOT = Path(__file__).parent / "_artifacts"


def desk_artifact_dir() -> Path:
    """Cache directory keyed by the full desk configuration; a config change
    invalidates previously trained artifacts."""
    from prefopt.training import desk_model_config, desk_train_config

    key_doc = {
        "train": desk_train_config().__dict__,
        "model": desk_model_config(1).to_dict(),
    }
    key = hashlib.sha256(json.dumps(key_doc, sort_keys=True).encode()).hexdigest()[:16]
    return ARTIFACT_ROOT / f"desk_{key}"


def train_desk_artifacts(art_dir: Path) -> None:
    """Full desk-preset training run, saving a checkpoint at the end of the
    warm-up phase and at the end of training. Deterministic in the preset
    seed, so every invocation produces identical artifacts."""
    from prefopt.model import PreferencePolicy
    from prefopt.training import (
        GPTaskSource,
        Trainer,
        desk_model_config,
        desk_train_config,
    )

    art_dir.mkdir(parents=True, exist_ok=True)
    cfg = desk_train_config()
    torch.manual_seed(cfg.seed)
    model = PreferencePolicy(desk_model_config(1))
    trainer = Trainer(model, cfg, GPTaskSource(1), art_dir)
    while trainer.iteration < cfg.total_iters:
        trainer.step()
        if trainer.iteration == cfg.warmup_iters:
            trainer.save(art_dir / "warmup.bin")
    trainer.save(art_dir / "final.bin")


@pytest.fixture(scope="session")
def desk_artifacts():
    """Trained desk-preset checkpoints (warmup.bin, final.bin), cached on
    disk across runs. First execution takes on the order of 45 CPU-minutes."""
    art_dir = desk_artifact_dir()
    if not (art_dir / "final.bin").exists():
        train_desk_artifacts(art_dir)
    return art_dir


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_model():
    """Small 1-D policy, cheap enough for per-test forward passes."""
    from prefopt.model import ModelConfig, PreferencePolicy

    torch.manual_seed(7)
    return PreferencePolicy(
        ModelConfig(dimension=1, embed_dim=16, ff_dim=32, layers=2, heads=2)
    )


@pytest.fixture
def tiny_model_2d():
    from prefopt.model import ModelConfig, PreferencePolicy

    torch.manual_seed(8)
    return PreferencePolicy(
        ModelConfig(dimension=2, embed_dim=16, ff_dim=32, layers=2, heads=2)
    )
