import struct

import numpy as np
import pytest

from prefixvlm import checkpoint as C
from prefixvlm.model import VLModel
from prefixvlm.training import model_checkpoint, model_from_checkpoint

from conftest import tiny_config


@pytest.fixture
def ckpt():
    rng = np.random.default_rng(0)
    return C.Checkpoint(
        {"model": {"a": 1}, "step": 3},
        {"w": rng.standard_normal((3, 4)).astype(np.float32), "d": rng.standard_normal(5), "i": np.arange(6).reshape(2, 3), "s": np.float32(2.5) * np.ones(())},
    )


def test_roundtrip_bit_exact(ckpt, tmp_path):
    C.save_checkpoint(tmp_path / "c.bin", ckpt)
    back = C.load_checkpoint(tmp_path / "c.bin")
    assert back.meta == ckpt.meta
    for k, v in ckpt.tensors.items():
        assert back.tensors[k].dtype == v.dtype and back.tensors[k].shape == v.shape
        assert back.tensors[k].tobytes() == v.tobytes()
    assert C.encode(back) == C.encode(ckpt)


def test_every_truncation_detected(ckpt):
    buf = C.encode(ckpt)
    for n in range(len(buf)):
        with pytest.raises(C.CheckpointError) as e:
            C.decode(buf[:n])
        assert isinstance(e.value, (C.TruncatedError, C.BadMagicError))


def test_bit_flip_detected(ckpt):
    buf = bytearray(C.encode(ckpt))
    buf[40] ^= 0x10
    with pytest.raises(C.IntegrityError):
        C.decode(bytes(buf))


def test_bad_magic_and_version(ckpt):
    buf = C.encode(ckpt)
    with pytest.raises(C.BadMagicError):
        C.decode(b"XXXX" + buf[4:])
    with pytest.raises(C.VersionError):
        C.decode(buf[:4] + struct.pack("<I", 99) + buf[8:])


def test_unsupported_dtype():
    with pytest.raises(C.CheckpointError):
        C.encode(C.Checkpoint({}, {"x": np.zeros(2, np.int8)}))


def test_restore_rejects_mismatch():
    m = VLModel(tiny_config(), seed=0)
    t = {k: p.data for k, p in m.params.items()}
    with pytest.raises(C.UnknownTensorError):
        C.restore_params(m.params, {**t, "extra": np.zeros(1)})
    with pytest.raises(C.UnknownTensorError):
        C.restore_params(m.params, {k: v for k, v in t.items() if k != "embed.token"})
    with pytest.raises(C.ShapeError):
        C.restore_params(m.params, {**t, "embed.token": np.zeros((2, 2), np.float32)})
    missing = C.restore_params(m.params, {"embed.token": t["embed.token"]}, allow_partial=True)
    assert "embed.token" not in missing and len(missing) == len(t) - 1


def test_model_checkpoint_roundtrip_with_head(tmp_path):
    m = VLModel(tiny_config(), seed=3)
    m.add_head("vqa", 5, seed=1)
    C.save_checkpoint(tmp_path / "m.ckpt", model_checkpoint(m))
    m2 = model_from_checkpoint(C.load_checkpoint(tmp_path / "m.ckpt"))
    assert m2.cfg == m.cfg and set(m2.params) == set(m.params)
    assert all(m2[k].data.tobytes() == m[k].data.tobytes() for k in m.params)
