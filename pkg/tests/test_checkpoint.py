import struct
import zlib

import numpy as np
import pytest

from icnet.checkpoint import (
    MAGIC,
    decode,
    encode,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from icnet.errors import (
    CheckpointCRCError,
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    ConfigHashMismatchError,
)
from icnet.model import IcnetConfig, build_model

TINY = dict(widths=(4, 4, 6, 6, 6), high_widths=(2, 3, 4), cff_channels=4, num_classes=3, pyramid_bins=(1, 2))


@pytest.fixture
def model():
    m = build_model(IcnetConfig(**TINY, seed=2))
    m.forward_heads(np.random.default_rng(0).random((2, 3, 64, 64)), train=True)  # non-trivial BN stats
    return m


class TestFormat:
    def test_header_layout(self):
        buf = encode({"w": np.arange(6, dtype=np.float32).reshape(2, 3)}, iteration=5, config_hash="00ff")
        assert buf[:4] == MAGIC
        assert struct.unpack_from("<II", buf, 4) == (1, 3)
        (n,) = struct.unpack_from("<H", buf, 12)
        assert buf[14 : 14 + n] == b"w"
        assert struct.unpack_from("<BB2I", buf, 15) == (0, 2, 2, 3)
        assert np.frombuffer(buf, "<f4", 6, 25).tolist() == list(range(6))
        assert struct.unpack_from("<I", buf, len(buf) - 4)[0] == zlib.crc32(buf[:-4])

    def test_round_trip_tensors(self, rng):
        t = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(5).astype(np.float32), "s": np.float64(2.5)}
        ck = decode(encode(t, iteration=12, config_hash="0123456789abcdef"))
        assert ck.iteration == 12 and ck.config_hash == "0123456789abcdef"
        for k, v in t.items():
            assert ck.tensors[k].dtype == np.asarray(v).dtype
            np.testing.assert_array_equal(ck.tensors[k], v)

    def test_unsupported_dtype(self):
        with pytest.raises(CheckpointError, match="dtype"):
            encode({"i": np.arange(3)})


class TestModelRoundTrip:
    def test_bitwise(self, model, tmp_path):
        path = save_checkpoint(model, tmp_path / "m.ckpt", iteration=7)
        fresh = build_model(IcnetConfig(**TINY, seed=99))
        ck = load_checkpoint(fresh, path)
        assert ck.iteration == 7
        for (na, a), (nb, b) in zip(model.named_params(), fresh.named_params()):
            assert na == nb
            np.testing.assert_array_equal(a.data, b.data)
        for (na, a), (nb, b) in zip(model.named_buffers(), fresh.named_buffers()):
            np.testing.assert_array_equal(a, b)
        x = np.random.default_rng(1).random((1, 3, 64, 64))
        np.testing.assert_array_equal(model.forward_heads(x)[4], fresh.forward_heads(x)[4])

    def test_save_is_deterministic(self, model, tmp_path):
        save_checkpoint(model, tmp_path / "a")
        save_checkpoint(model, tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


class TestCorruption:
    def test_flipped_payload_byte(self, model, tmp_path):
        path = save_checkpoint(model, tmp_path / "m.ckpt")
        data = bytearray(path.read_bytes())
        data[len(data) - 8] ^= 0x01  # inside the last tensor payload
        path.write_bytes(bytes(data))
        fresh = build_model(IcnetConfig(**TINY, seed=99))
        before = {n: p.data.copy() for n, p in fresh.named_params()}
        with pytest.raises(CheckpointCRCError):
            load_checkpoint(fresh, path)
        # nothing partially loaded
        assert all(np.array_equal(before[n], p.data) for n, p in fresh.named_params())

    def test_any_payload_byte(self, model, tmp_path):
        # flip one byte of every conv weight payload in turn
        buf = bytearray(save_checkpoint(model, tmp_path / "m.ckpt").read_bytes())
        for off in range(len(buf) - 200, len(buf) - 4, 17):
            bad = bytearray(buf)
            bad[off] ^= 0x80
            with pytest.raises((CheckpointCRCError, CheckpointTruncatedError, CheckpointError)):
                decode(bytes(bad))

    def test_bad_magic(self, model, tmp_path):
        path = save_checkpoint(model, tmp_path / "m.ckpt")
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(CheckpointMagicError):
            read_checkpoint(path)

    def test_bad_version(self, model, tmp_path):
        path = save_checkpoint(model, tmp_path / "m.ckpt")
        data = bytearray(path.read_bytes())
        data[4:8] = struct.pack("<I", 2)
        path.write_bytes(bytes(data))
        with pytest.raises(CheckpointMagicError, match="version"):
            read_checkpoint(path)

    @pytest.mark.parametrize("keep", [10, 100, -5])
    def test_truncated(self, model, tmp_path, keep):
        path = save_checkpoint(model, tmp_path / "m.ckpt")
        path.write_bytes(path.read_bytes()[:keep])
        with pytest.raises(CheckpointTruncatedError):
            read_checkpoint(path)

    def test_errors_are_distinct(self):
        kinds = {CheckpointCRCError, CheckpointMagicError, CheckpointTruncatedError, ConfigHashMismatchError}
        assert len(kinds) == 4
        assert all(issubclass(k, CheckpointError) for k in kinds)


class TestConfigHash:
    def test_mismatch_lists_both(self, model, tmp_path):
        path = save_checkpoint(model, tmp_path / "m.ckpt")
        other = build_model(IcnetConfig(**{**TINY, "cff_channels": 6}))
        with pytest.raises(ConfigHashMismatchError) as exc:
            load_checkpoint(other, path)
        assert model.config.digest() in str(exc.value)
        assert other.config.digest() in str(exc.value)

    def test_hash_stored(self, model, tmp_path):
        path = save_checkpoint(model, tmp_path / "m.ckpt")
        assert read_checkpoint(path).config_hash == model.config.digest()
