import struct

import numpy as np
import pytest

from pointhr.config import PRESETS
from pointhr.model import build_model, count_params
from pointhr.weights import (WeightFormatError, WeightStore, init_weights, load_weights,
                             save_weights, tensor_rng)

T = PRESETS["T"]


def test_init_is_deterministic_and_complete():
    a, b = init_weights(T, 7), init_weights(T, 7)
    assert a == b
    assert list(a) == build_model(T).names()
    assert a.num_elements == count_params(T)
    assert init_weights(T, 8) != a


def test_tensor_stream_independent_of_other_tensors():
    # per-name streams: changing the decoder does not disturb encoder weights
    a = init_weights(T, 3)
    b = init_weights(T.replace(decoder="sum"), 3)
    shared = [n for n in a if n in b]
    assert "stage3.module2.branch3.block1.embed.w" in shared
    assert all(np.array_equal(a[n], b[n]) for n in shared)
    assert tensor_rng(3, "x").random() != tensor_rng(3, "y").random()


def test_store_is_immutable():
    store = init_weights(T, 0)
    with pytest.raises(ValueError):
        store["head.fc1.w"][0, 0] = 1.0
    with pytest.raises(ValueError):
        store.replace({"head.fc1.b": np.zeros(3)})


def test_roundtrip_bitwise(tmp_path):
    store = init_weights(T, 11)
    path = tmp_path / "w.phrw"
    save_weights(store, path)
    assert load_weights(path) == store


def test_empty_store_roundtrip(tmp_path):
    path = tmp_path / "empty.phrw"
    save_weights(WeightStore({}), path)
    assert len(load_weights(path)) == 0
    assert path.read_bytes() == b"PHRW" + struct.pack("<II", 1, 0)


def _small(tmp_path):
    path = tmp_path / "s.phrw"
    save_weights(WeightStore({"a.w": np.arange(6.0).reshape(2, 3), "a.b": np.ones(3)}), path)
    return path


def test_truncated_file(tmp_path):
    path = _small(tmp_path)
    data = path.read_bytes()
    for cut in (2, 10, len(data) - 1):
        path.write_bytes(data[:cut])
        with pytest.raises(WeightFormatError, match="unexpected end of file"):
            load_weights(path)


def test_count_mismatch_detected(tmp_path):
    path = _small(tmp_path)
    data = bytearray(path.read_bytes())
    data[8:12] = struct.pack("<I", 1)
    path.write_bytes(bytes(data))
    with pytest.raises(WeightFormatError, match="header count"):
        load_weights(path)
    data[8:12] = struct.pack("<I", 3)
    path.write_bytes(bytes(data))
    with pytest.raises(WeightFormatError, match="unexpected end of file"):
        load_weights(path)


def test_bad_magic_and_version(tmp_path):
    path = _small(tmp_path)
    data = path.read_bytes()
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(WeightFormatError, match="magic"):
        load_weights(path)
    path.write_bytes(data[:4] + struct.pack("<I", 9) + data[8:])
    with pytest.raises(WeightFormatError, match="version"):
        load_weights(path)
