import numpy as np
import pytest
import torch

from prefopt.checkpoint import load_checkpoint, save_checkpoint
from prefopt.model import ModelConfig, PreferencePolicy


def test_round_trip_weights_bit_identical(tmp_path, tiny_model):
    path = tmp_path / "model.bin"
    save_checkpoint(path, tiny_model, extra_state={"iteration": 17})
    loaded, extra, _ = load_checkpoint(path)
    assert extra == {"iteration": 17}
    assert loaded.cfg == tiny_model.cfg
    for (na, a), (nb, b) in zip(
        tiny_model.state_dict().items(), loaded.state_dict().items()
    ):
        assert na == nb
        assert torch.equal(a, b)


def test_round_trip_forward_bit_identical(tmp_path, tiny_model):
    path = tmp_path / "model.bin"
    save_checkpoint(path, tiny_model)
    loaded, _, _ = load_checkpoint(path)
    rng = np.random.default_rng(0)
    x = rng.uniform(-1, 1, (9, 1))
    with torch.no_grad():
        assert torch.equal(tiny_model.embed_point(x), loaded.embed_point(x))


def test_extra_tensors_survive(tmp_path, tiny_model):
    path = tmp_path / "model.bin"
    moment = torch.randn(5, 3)
    save_checkpoint(path, tiny_model, extra_tensors={"adam.w.exp_avg": moment})
    _, _, extras = load_checkpoint(path)
    assert torch.equal(extras["adam.w.exp_avg"], moment)


def test_float64_model_round_trip(tmp_path):
    torch.manual_seed(0)
    m = PreferencePolicy(
        ModelConfig(dimension=1, embed_dim=8, ff_dim=16, layers=1, heads=1)
    ).to(torch.float64)
    path = tmp_path / "m64.bin"
    save_checkpoint(path, m)
    loaded, _, _ = load_checkpoint(path)
    p = next(loaded.parameters())
    assert p.dtype == torch.float64


def test_corruption_detected(tmp_path, tiny_model):
    path = tmp_path / "model.bin"
    save_checkpoint(path, tiny_model)
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="checksum"):
        load_checkpoint(path)


def test_not_a_checkpoint(tmp_path):
    p = tmp_path / "junk.bin"
    import hashlib

    body = b"NOPE" + b"\x00" * 16
    p.write_bytes(body + hashlib.sha256(body).digest())
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(p)


def test_save_is_atomic(tmp_path, tiny_model):
    # No stray .tmp file left behind after a successful save.
    path = tmp_path / "model.bin"
    save_checkpoint(path, tiny_model)
    assert path.exists()
    assert not (tmp_path / "model.bin.tmp").exists()
