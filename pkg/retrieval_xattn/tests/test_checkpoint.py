import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from retrieval_xattn.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from retrieval_xattn.errors import StorageError
from retrieval_xattn.model import ModelConfig, ModelWeights


@pytest.fixture
def weights():
    return ModelWeights.initialize(ModelConfig(d_model=8, n_heads=2, d_ff=16, window=8, vocab_size=16))


def test_round_trip_is_exact(tmp_path, weights):
    path = str(tmp_path / "model.ulmf")
    save_checkpoint(path, weights)
    loaded = load_checkpoint(path)
    assert loaded.config == weights.config
    assert list(loaded.params) == list(weights.params)
    for name in weights.params:
        assert_array_equal(loaded[name], weights[name])
        assert loaded[name].dtype == np.float32


def test_header_layout(tmp_path, weights):
    path = tmp_path / "model.ulmf"
    save_checkpoint(str(path), weights)
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    assert struct.unpack_from("<I", raw, 4) == (1,)


def test_missing_file(tmp_path):
    with pytest.raises(StorageError):
        load_checkpoint(str(tmp_path / "absent.ulmf"))


def test_bad_magic(tmp_path):
    path = tmp_path / "junk.ulmf"
    path.write_bytes(b"NOPE" + b"\0" * 16)
    with pytest.raises(StorageError, match="bad magic"):
        load_checkpoint(str(path))


def test_truncated_tensor(tmp_path, weights):
    path = tmp_path / "model.ulmf"
    save_checkpoint(str(path), weights)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(StorageError, match="truncated"):
        load_checkpoint(str(path))


def test_unwritable_destination(tmp_path, weights):
    with pytest.raises(StorageError):
        save_checkpoint(str(tmp_path / "missing-dir" / "model.ulmf"), weights)


def test_failed_replace_leaves_no_temp_file(tmp_path, weights):
    target = tmp_path / "model.ulmf"
    target.mkdir()
    with pytest.raises(StorageError):
        save_checkpoint(str(target), weights)
    assert not (tmp_path / "model.ulmf.tmp").exists()
    assert target.is_dir()
