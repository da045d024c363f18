"""Checkpoint format: bitwise round trips and refusal of bad files."""

import numpy as np
import pytest

from lalign.checkpoint import (
    CheckpointError,
    describe_checkpoint,
    load_checkpoint,
    params_checksum,
    save_checkpoint,
)


@pytest.fixture
def tensors(rng):
    return {
        "model.w": rng.normal(size=(3, 4)).astype(np.float32),
        "model.b": rng.normal(size=(4,)).astype(np.float64),
        "labels": rng.integers(0, 100, size=(2, 2)).astype(np.uint16),
        "counts": np.array([1, 2, 3], dtype=np.int64),
        "flags": np.array([0, 1], dtype=np.uint8),
        "empty": np.zeros((0, 5), dtype=np.float32),
    }


class TestRoundTrip:
    def test_bitwise_equality(self, tmp_path, tensors):
        path = tmp_path / "state.laln"
        meta = {"stage": "maskembed", "epochs_done": 3, "rng": {"s": 1}}
        save_checkpoint(path, "fp123", meta, tensors)
        ckpt = load_checkpoint(path)
        assert ckpt.fingerprint == "fp123"
        assert ckpt.meta == meta
        assert set(ckpt.tensors) == set(tensors)
        for name, arr in tensors.items():
            assert ckpt.tensors[name].dtype == arr.dtype
            assert np.array_equal(ckpt.tensors[name], arr)
            assert ckpt.tensors[name].tobytes() == arr.tobytes()

    def test_checksum_stable_across_round_trip(self, tmp_path, tensors):
        path = tmp_path / "state.laln"
        save_checkpoint(path, "fp", {}, tensors)
        assert params_checksum(load_checkpoint(path).tensors) == params_checksum(tensors)

    def test_save_deterministic(self, tmp_path, tensors):
        save_checkpoint(tmp_path / "a.laln", "fp", {"k": 1}, tensors)
        save_checkpoint(tmp_path / "b.laln", "fp", {"k": 1}, tensors)
        assert (tmp_path / "a.laln").read_bytes() == (tmp_path / "b.laln").read_bytes()

    def test_float64_survives(self, tmp_path):
        arr = np.array([np.pi, np.e, 1.0 / 3.0], dtype=np.float64)
        save_checkpoint(tmp_path / "c.laln", "fp", {}, {"x": arr})
        assert load_checkpoint(tmp_path / "c.laln").tensors["x"].tobytes() == arr.tobytes()


class TestRefusals:
    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.laln"
        path.write_bytes(b"XXXX" + b"\x00" * 32)
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_bad_version(self, tmp_path, tensors):
        path = tmp_path / "v.laln"
        save_checkpoint(path, "fp", {}, tensors)
        blob = bytearray(path.read_bytes())
        blob[4] = 99
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path, tensors):
        path = tmp_path / "t.laln"
        save_checkpoint(path, "fp", {}, tensors)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 9])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_garbage(self, tmp_path, tensors):
        path = tmp_path / "g.laln"
        save_checkpoint(path, "fp", {}, tensors)
        path.write_bytes(path.read_bytes() + b"\x00")
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(path)

    def test_unsupported_dtype(self, tmp_path):
        with pytest.raises(CheckpointError, match="dtype"):
            save_checkpoint(tmp_path / "d.laln", "fp", {},
                            {"x": np.zeros(2, dtype=np.complex64)})


class TestChecksum:
    def test_detects_single_bit_change(self, rng):
        arr = rng.normal(size=8).astype(np.float32)
        a = params_checksum({"w": arr})
        arr2 = arr.copy()
        arr2[3] = np.nextafter(arr2[3], np.inf)
        assert a != params_checksum({"w": arr2})

    def test_order_independent(self, rng):
        a = rng.normal(size=3)
        b = rng.normal(size=3)
        assert params_checksum({"a": a, "b": b}) == params_checksum({"b": b, "a": a})


class TestDescribe:
    def test_lists_all_tensors(self, tmp_path, tensors):
        path = tmp_path / "d.laln"
        save_checkpoint(path, "fp", {}, tensors)
        rows = describe_checkpoint(path)
        assert {r["name"] for r in rows} == set(tensors)
        by_name = {r["name"]: r for r in rows}
        assert by_name["model.w"]["shape"] == [3, 4]
