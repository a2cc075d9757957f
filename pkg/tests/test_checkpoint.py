import json
import struct

import numpy as np
import pytest

from coarl.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    CheckpointError,
    load_container,
    load_model,
    save_container,
    save_model,
)
from coarl.model import Seq2SeqModel, forward

from conftest import tiny_config


class TestContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        tensors = {"b": np.arange(6.0).reshape(2, 3), "a": np.array([np.pi, -0.0, 1e-300])}
        save_container(tmp_path / "x.carl", "model", {"k": 1}, tensors, {"step": 3})
        c = load_container(tmp_path / "x.carl")
        assert c.kind == "model" and c.config == {"k": 1} and c.meta == {"step": 3}
        for k, v in tensors.items():
            assert c.tensors[k].tobytes() == v.tobytes()

    def test_layout(self, tmp_path):
        save_container(tmp_path / "x.carl", "lora", {}, {"t": np.ones(2)})
        raw = (tmp_path / "x.carl").read_bytes()
        magic, version, hlen = struct.unpack_from("<4sIQ", raw)
        assert magic == MAGIC and version == FORMAT_VERSION
        header = json.loads(raw[16 : 16 + hlen])
        assert header["tensors"]["t"] == {"offset": 0, "shape": [2]}
        assert raw[16 + hlen :] == np.ones(2, dtype="<f8").tobytes()

    def test_save_load_save_is_byte_stable(self, tmp_path):
        save_container(tmp_path / "a.carl", "model", {"z": [1, 2]}, {"y": np.ones(3), "x": np.zeros((2, 2))})
        c = load_container(tmp_path / "a.carl")
        save_container(tmp_path / "b.carl", c.kind, c.config, c.tensors, c.meta)
        assert (tmp_path / "a.carl").read_bytes() == (tmp_path / "b.carl").read_bytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.carl").write_bytes(b"NOPE" + b"\0" * 20)
        with pytest.raises(CheckpointError, match="magic"):
            load_container(tmp_path / "x.carl")

    def test_version_mismatch(self, tmp_path):
        (tmp_path / "x.carl").write_bytes(struct.pack("<4sIQ", MAGIC, 99, 2) + b"{}")
        with pytest.raises(CheckpointError, match="version"):
            load_container(tmp_path / "x.carl")

    @pytest.mark.parametrize("cut", [3, 20, -1])
    def test_truncation(self, tmp_path, cut):
        save_container(tmp_path / "x.carl", "model", {}, {"t": np.ones(4)})
        raw = (tmp_path / "x.carl").read_bytes()
        (tmp_path / "y.carl").write_bytes(raw[:cut])
        with pytest.raises(CheckpointError, match="truncated"):
            load_container(tmp_path / "y.carl")

    def test_wrong_kind(self, tmp_path):
        save_container(tmp_path / "x.carl", "lora", {}, {})
        with pytest.raises(CheckpointError, match="kind"):
            load_container(tmp_path / "x.carl", expect_kind="model")

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_container(tmp_path / "absent.carl")


class TestModelCheckpoint:
    def test_model_round_trip_logits_identical(self, tmp_path):
        m = Seq2SeqModel(tiny_config(), seed=4)
        save_model(tmp_path / "m.carl", m, extra={"adam.m.embed": np.ones(1)})
        loaded = load_model(tmp_path / "m.carl")
        assert loaded.param_hash() == m.param_hash()
        assert list(loaded.params) == list(m.params)
        a, b = forward(m, [1, 2], [3]).data, forward(loaded, [1, 2], [3]).data
        assert a.tobytes() == b.tobytes()
