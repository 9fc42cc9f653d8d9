import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from convitac import tensorfile
from convitac.errors import FormatError, LoadError


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(width=32, allow_nan=True, allow_infinity=True)))
def test_round_trip_is_bit_exact(arr):
    out = tensorfile.decode(tensorfile.encode(arr))
    assert out.shape == arr.shape
    assert out.tobytes() == arr.astype("<f4").tobytes()


def test_layout():
    blob = tensorfile.encode(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    assert blob[:4] == b"CVT1"
    assert blob[4] == 0 and blob[5] == 2
    assert struct.unpack_from("<2I", blob, 6) == (1, 3)
    assert struct.unpack_from("<3f", blob, 14) == (1.0, 2.0, 3.0)
    assert len(blob) == 14 + 12


def test_bad_magic_names_source():
    with pytest.raises(FormatError, match="weights.cvt"):
        tensorfile.decode(b"XXXX" + bytes(10), "weights.cvt")


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.cvt"
    tensorfile.save_tensor(path, np.ones((4, 4), dtype=np.float32))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError, match="t.cvt"):
        tensorfile.load_tensor(path)


def test_unknown_dtype():
    with pytest.raises(FormatError, match="dtype"):
        tensorfile.decode(b"CVT1" + bytes([7, 0]) + bytes(4))


def test_missing_file(tmp_path):
    with pytest.raises(LoadError):
        tensorfile.load_tensor(tmp_path / "absent.cvt")


def test_metadata_round_trip(tmp_path):
    meta = {"dim": 64, "frozen": True, "fusion": "concat", "lr": 0.0003}
    tensorfile.write_metadata(tmp_path / "metadata.txt", meta)
    assert (tmp_path / "metadata.txt").read_text().splitlines()[1] == "frozen=true"
    back = tensorfile.read_metadata(tmp_path / "metadata.txt")
    assert back == {"dim": "64", "frozen": "true", "fusion": "concat", "lr": "0.0003"}


def test_malformed_metadata(tmp_path):
    (tmp_path / "metadata.txt").write_text("dim=64\nnot a pair\n")
    with pytest.raises(FormatError, match=":2"):
        tensorfile.read_metadata(tmp_path / "metadata.txt")


def test_state_directory_nests_names(tmp_path):
    state = {"blocks.0.fc1.weight": np.ones((2, 2), np.float32), "cec/head0_wq": np.zeros(3, np.float32)}
    tensorfile.save_state(tmp_path, state)
    assert (tmp_path / "cec" / "head0_wq.cvt").exists()
    back = tensorfile.load_state(tmp_path, list(state))
    for k in state:
        assert back[k].tobytes() == state[k].tobytes()
