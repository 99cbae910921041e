"""Checkpoint format: bit-exact round-trips, CRC detection, and error
taxonomy for malformed files."""

import struct

import numpy as np
import pytest

from mmrag.checkpoint import (CheckpointManifest, bytes_to_ids, ids_to_bytes,
                              load_manifest, save_manifest)
from mmrag.errors import CorruptionError, FormatError


def sample_manifest():
    rng = np.random.default_rng(0)
    return CheckpointManifest(
        stage="retriever", seed=7, config_hash="abc123",
        arrays={
            "enc.w": rng.normal(size=(4, 3)),
            "enc.b": rng.normal(size=(3,)),
            "ids": ids_to_bytes(["k000", "k001"]),
            "steps": np.arange(5, dtype=np.int64),
        })


class TestRoundTrip:
    def test_save_load_save_byte_identical(self, tmp_path):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_manifest(p1, sample_manifest())
        loaded = load_manifest(p1)
        save_manifest(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_metadata_round_trips(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_manifest(path, sample_manifest())
        loaded = load_manifest(path)
        assert loaded.stage == "retriever"
        assert loaded.seed == 7
        assert loaded.config_hash == "abc123"
        assert bytes_to_ids(loaded.array("ids")) == ["k000", "k001"]
        assert np.array_equal(loaded.array("steps"), np.arange(5))

    def test_floats_stored_single_precision(self, tmp_path):
        path = tmp_path / "f.ckpt"
        m = sample_manifest()
        save_manifest(path, m)
        loaded = load_manifest(path)
        assert loaded.array("enc.w").dtype == np.float32
        assert np.allclose(loaded.array("enc.w"),
                           m.arrays["enc.w"].astype(np.float32),
                           atol=0, rtol=0)

    def test_expected_size_from_parameter_census(self, tmp_path):
        path = tmp_path / "s.ckpt"
        m = sample_manifest()
        save_manifest(path, m)
        n_floats = sum(a.size for n, a in m.arrays.items()
                       if a.dtype.kind == "f")
        payload = 4 * n_floats \
            + m.arrays["ids"].size \
            + 8 * m.arrays["steps"].size
        size = path.stat().st_size
        # header + names overhead is small and bounded
        assert payload < size < payload + 400


class TestCorruption:
    def test_flipped_payload_byte_detected(self, tmp_path):
        path = tmp_path / "c.ckpt"
        save_manifest(path, sample_manifest())
        blob = bytearray(path.read_bytes())
        blob[-20] ^= 0xFF  # inside the last payload
        path.write_bytes(bytes(blob))
        with pytest.raises(CorruptionError):
            load_manifest(path)

    def test_truncation_detected(self, tmp_path):
        path = tmp_path / "t.ckpt"
        save_manifest(path, sample_manifest())
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) - 7])
        with pytest.raises(CorruptionError):
            load_manifest(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        save_manifest(path, sample_manifest())
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_manifest(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "v.ckpt"
        save_manifest(path, sample_manifest())
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_manifest(path)

    def test_unknown_stage_rejected_on_save(self, tmp_path):
        m = sample_manifest()
        m.stage = "warp"
        with pytest.raises(FormatError):
            save_manifest(tmp_path / "w.ckpt", m)
