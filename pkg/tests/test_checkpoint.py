import struct

import numpy as np
import pytest

from hybrid_asr import checkpoint
from hybrid_asr.errors import CheckpointError


def test_round_trip_bit_identical(tmp_path, rng):
    tensors = {
        "a": rng.standard_normal((3, 4)).astype(np.float32),
        "b.c": rng.standard_normal(5),
        "scalar": np.array(2.5),
        "empty": np.zeros((0, 3), dtype=np.float32),
        "ünï": np.ones(1),
    }
    path = tmp_path / "x.lsf"
    checkpoint.save(path, tensors)
    back = checkpoint.load(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype
        assert back[k].tobytes() == tensors[k].tobytes()


def test_exact_byte_layout():
    buf = checkpoint.dumps({"w": np.array([1.0, 2.0], dtype=np.float32)})
    expected = (b"LSF1" + struct.pack("<Q", 1) + struct.pack("<Q", 1) + b"w"
                + struct.pack("<Q", 1) + struct.pack("<Q", 2) + b"\x00"
                + np.array([1.0, 2.0], "<f4").tobytes())
    assert buf == expected


@pytest.mark.parametrize("cut", [3, 10, 20, -1])
def test_truncated(cut):
    buf = checkpoint.dumps({"w": np.arange(4.0)})
    with pytest.raises(CheckpointError):
        checkpoint.loads(buf[:cut])


def test_bad_magic_and_trailing_bytes():
    buf = checkpoint.dumps({"w": np.arange(4.0)})
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.loads(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError, match="trailing"):
        checkpoint.loads(buf + b"\x00")


def test_require_lists_all_missing():
    with pytest.raises(CheckpointError) as info:
        checkpoint.require({"a": np.zeros(1)}, ["a", "b", "c"])
    assert info.value.missing == ("b", "c")
