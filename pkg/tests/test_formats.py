import struct
import zlib

import numpy as np
import pytest

from vimkit import formats, train
from vimkit.checkpoint import Checkpoint, checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint
from vimkit.errors import ChecksumError, FormatError, MagicError, TruncatedError, VersionError
from vimkit.prior import PriorConfig, TokenGrid
from vimkit.train import TrainConfig


class TestTensorFormat:
    @pytest.mark.parametrize("dtype", [np.float32, np.float64])
    @pytest.mark.parametrize("shape", [(), (0,), (3,), (2, 3, 4)])
    def test_round_trip(self, rng, dtype, shape):
        x = rng.normal(size=shape).astype(dtype)
        back = formats.tensor_from_bytes(formats.tensor_to_bytes(x))
        assert back.dtype == np.dtype(dtype) and back.shape == shape
        np.testing.assert_array_equal(back, x)

    def test_layout(self):
        buf = formats.tensor_to_bytes(np.array([[1.0, 2.0]], dtype=np.float32))
        assert buf[:4] == b"VIMT"
        assert buf[4:7] == bytes([1, 0, 2])
        assert struct.unpack("<II", buf[7:15]) == (1, 2)
        assert np.frombuffer(buf[15:], "<f4").tolist() == [1.0, 2.0]

    def test_errors(self):
        buf = formats.tensor_to_bytes(np.ones(3))
        with pytest.raises(MagicError):
            formats.tensor_from_bytes(b"XIMT" + buf[4:])
        with pytest.raises(VersionError):
            formats.tensor_from_bytes(buf[:4] + b"\x02" + buf[5:])
        with pytest.raises(TruncatedError):
            formats.tensor_from_bytes(buf[:-1])
        with pytest.raises(FormatError):
            formats.tensor_from_bytes(buf + b"\x00")
        with pytest.raises(FormatError):
            formats.tensor_to_bytes(np.ones(2, dtype=np.int32))

    def test_file(self, tmp_path, rng):
        x = rng.normal(size=(4, 2))
        formats.write_tensor(tmp_path / "x.vimt", x)
        np.testing.assert_array_equal(formats.read_tensor(tmp_path / "x.vimt"), x)


class TestGridFormat:
    def test_round_trip_labelled(self, rng):
        g = TokenGrid(3, 5, rng.integers(0, 300, 15), 7)
        back, K = formats.grid_from_bytes(formats.grid_to_bytes(g, 300))
        assert K == 300 and back.class_label == 7 and (back.height, back.width) == (3, 5)
        np.testing.assert_array_equal(back.indices, g.indices)

    def test_round_trip_unlabelled(self):
        g = TokenGrid(1, 2, [65535, 0])
        back, K = formats.grid_from_bytes(formats.grid_to_bytes(g, 65536))
        assert back.class_label is None
        np.testing.assert_array_equal(back.indices, [65535, 0])

    def test_errors(self):
        buf = formats.grid_to_bytes(TokenGrid(2, 2, [0, 1, 2, 3]), 4)
        with pytest.raises(MagicError):
            formats.grid_from_bytes(b"VIMT" + buf[4:])
        with pytest.raises(VersionError):
            formats.grid_from_bytes(buf[:4] + b"\x09" + buf[5:])
        with pytest.raises(TruncatedError):
            formats.grid_from_bytes(buf[:-2])
        with pytest.raises(FormatError):
            formats.grid_from_bytes(buf + b"\x00\x00")
        with pytest.raises(FormatError):
            formats.grid_to_bytes(TokenGrid(1, 1, [0]), 70000)
        bad_k = buf[:5] + struct.pack("<I", 3) + buf[9:]
        with pytest.raises(Exception):
            formats.grid_from_bytes(bad_k)


def _small_state():
    cfg = PriorConfig(blocks=1, heads=2, d_model=8, d_hidden=16, K=8, grid_h=2, grid_w=2, num_classes=2)
    tc = TrainConfig.stage2(steps=3, batch_size=2)
    ids = np.random.default_rng(0).integers(0, 8, (6, 4))
    return train.train_stage2(ids, np.zeros(6, dtype=int), cfg, tc)


class TestCheckpoint:
    def test_round_trip(self, rng):
        ck = Checkpoint({"a": "1", "b.c": "x y"}, {"w": rng.normal(size=(2, 3)), "s": np.float32(3.0) * np.ones(())},
                        {"bit_generator": "PCG64", "state": {"state": 5, "inc": 7}}, step=42)
        back = checkpoint_from_bytes(checkpoint_to_bytes(ck))
        assert back.config == ck.config and back.step == 42 and back.rng_state == ck.rng_state
        for k in ck.tensors:
            np.testing.assert_array_equal(back.tensors[k], ck.tensors[k])
            assert back.tensors[k].dtype == ck.tensors[k].dtype

    def test_save_load_save_identical(self, tmp_path):
        state = _small_state()
        save_checkpoint(tmp_path / "a.vimc", train.to_checkpoint(state))
        save_checkpoint(tmp_path / "b.vimc", load_checkpoint(tmp_path / "a.vimc"))
        assert (tmp_path / "a.vimc").read_bytes() == (tmp_path / "b.vimc").read_bytes()
        assert not (tmp_path / "a.vimc.tmp").exists()

    def test_state_round_trip(self, tmp_path):
        state = _small_state()
        save_checkpoint(tmp_path / "a.vimc", train.to_checkpoint(state))
        back = train.load_state(tmp_path / "a.vimc")
        assert back.step == state.step and back.model_config == state.model_config
        assert back.train_config == state.train_config and back.opt.t == state.opt.t
        for k in state.params:
            np.testing.assert_array_equal(back.params[k].data, state.params[k].data)
            np.testing.assert_array_equal(back.opt.m[k], state.opt.m[k])
        assert back.rng.random() == state.rng.random()

    def test_errors(self):
        buf = checkpoint_to_bytes(Checkpoint({"k": "v"}, {"w": np.ones(2)}, {}, 1))
        with pytest.raises(MagicError):
            checkpoint_from_bytes(b"VIMQ" + buf[4:])
        with pytest.raises(VersionError):
            checkpoint_from_bytes(buf[:4] + b"\x07" + buf[5:])
        with pytest.raises(TruncatedError):
            checkpoint_from_bytes(buf[:len(buf) // 2])
        flipped = bytearray(buf)
        flipped[12] ^= 0xFF
        with pytest.raises(ChecksumError):
            checkpoint_from_bytes(bytes(flipped))

    def test_crc_covers_preceding_bytes(self):
        buf = checkpoint_to_bytes(Checkpoint({}, {}, {}, 0))
        assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(buf[:-4])
