import struct

import numpy as np
import pytest

from hetembed.autodiff import Tensor
from hetembed.checkpoint import MAGIC, Checkpoint, CheckpointError
from hetembed.config import TrainConfig
from hetembed.data import ATC_CLASSES, DomainSpec, Standardizer


@pytest.fixture
def ckpt(rng):
    specs = [DomainSpec(0, "physchem", 5), DomainSpec(1, "expr", 7)]
    st = Standardizer({0: rng.standard_normal(5), 1: rng.standard_normal(7)}, {0: np.ones(5), 1: rng.uniform(1, 2, 7)})
    params = {
        "embed.conv1.kernels": Tensor(rng.standard_normal((2, 1, 3))),
        "heads.W": Tensor(rng.standard_normal((4, 14))),
        "heads.b": Tensor(np.array([0.0, -0.0, np.pi, 1e-300, -1e300, 5e-324, 1, 2, 3, 4, 5, 6, 7, 8])),
    }
    return Checkpoint(TrainConfig(seed=3), specs, ATC_CLASSES, st, params)


def test_round_trip_is_byte_identical(ckpt, tmp_path):
    first = ckpt.save(tmp_path / "a.ckpt")
    loaded = Checkpoint.load(tmp_path / "a.ckpt")
    second = loaded.save(tmp_path / "b.ckpt")
    assert first == second
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    for name, t in ckpt.params.items():
        np.testing.assert_array_equal(loaded.params[name].data, t.data)
    # signed zero survives
    assert np.signbit(loaded.params["heads.b"].data[1])
    assert list(loaded.params) == list(ckpt.params)
    assert loaded.config == ckpt.config
    assert loaded.specs == ckpt.specs


def test_header_layout(ckpt):
    data = ckpt.to_bytes()
    assert data[:8] == MAGIC
    assert struct.unpack_from("<I", data, 8)[0] == 1
    assert data[12:44] == ckpt.config.digest()


def test_bad_magic(ckpt):
    data = bytearray(ckpt.to_bytes())
    data[:8] = b"NOTACKPT"
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(bytes(data))


def test_bad_version(ckpt):
    data = bytearray(ckpt.to_bytes())
    struct.pack_into("<I", data, 8, 99)
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(bytes(data))


@pytest.mark.parametrize("cut", [5, 50, -1])
def test_truncation(ckpt, cut):
    data = ckpt.to_bytes()
    with pytest.raises(CheckpointError, match="truncated|length"):
        Checkpoint.from_bytes(data[:cut])


def test_trailing_bytes(ckpt):
    with pytest.raises(CheckpointError, match="length"):
        Checkpoint.from_bytes(ckpt.to_bytes() + b"\0")


def test_config_hash_mismatch(ckpt):
    data = bytearray(ckpt.to_bytes())
    data[12] ^= 0xFF
    with pytest.raises(CheckpointError, match="hash"):
        Checkpoint.from_bytes(bytes(data))


def test_expected_config(ckpt):
    data = ckpt.to_bytes()
    Checkpoint.from_bytes(data, expected_config=TrainConfig(seed=3))
    with pytest.raises(CheckpointError, match="different config"):
        Checkpoint.from_bytes(data, expected_config=TrainConfig(seed=4))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        Checkpoint.load(tmp_path / "nope.ckpt")
