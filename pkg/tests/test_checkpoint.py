import numpy as np
import pytest

from flowig.checkpoint import save_checkpoint, load_checkpoint
from flowig.encoder import DISENTANGLED, init_params
from flowig.errors import DataError

from conftest import randomize_params, small_config


@pytest.fixture()
def model():
    cfg = small_config(20, DISENTANGLED)
    params = randomize_params(init_params(cfg), np.random.default_rng(0))
    return cfg, params


def test_roundtrip(tmp_path, model):
    cfg, params = model
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, cfg, params)
    cfg2, params2 = load_checkpoint(path)
    assert cfg2 == cfg
    assert sorted(params2) == sorted(params)
    for k in params:
        np.testing.assert_array_equal(params[k], params2[k])


def test_byte_deterministic(tmp_path, model):
    cfg, params = model
    save_checkpoint(tmp_path / "a.ckpt", cfg, params)
    save_checkpoint(tmp_path / "b.ckpt", cfg, dict(reversed(list(params.items()))))
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_bad_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(DataError, match="not a flowig checkpoint"):
        load_checkpoint(path)


def test_trailing_bytes(tmp_path, model):
    cfg, params = model
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, cfg, params)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(DataError, match="trailing"):
        load_checkpoint(path)
