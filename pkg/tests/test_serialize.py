import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lrtrack.serialize import CheckpointError, dumps, load, loads, save


def test_layout_of_a_single_record():
    blob = dumps({"w": np.array([[1.0, 2.0]])})
    assert blob == b"CTK1" + struct.pack("<I", 1) + b"w" + struct.pack("<II", 1, 2) + struct.pack("<2d", 1.0, 2.0)


@given(
    st.dictionaries(
        st.text(min_size=1, max_size=12),
        arrays(np.float64, st.tuples(st.integers(0, 4), st.integers(0, 4)), elements=st.floats(allow_nan=True)),
        max_size=4,
    )
)
def test_round_trip_is_bit_exact(params):
    back = loads(dumps(params))
    assert list(back) == list(params)
    for k in params:
        assert back[k].shape == params[k].shape
        assert back[k].tobytes() == np.ascontiguousarray(params[k]).tobytes()


def test_file_round_trip(tmp_path):
    p = {"a": np.arange(6.0).reshape(2, 3), "b": np.full((1, 1), -0.0)}
    save(tmp_path / "m.ctk", p)
    back = load(tmp_path / "m.ctk")
    assert all(np.array_equal(back[k], p[k]) for k in p)
    assert np.signbit(back["b"][0, 0])


def test_bad_magic_and_truncation():
    with pytest.raises(CheckpointError):
        loads(b"XXXX")
    blob = dumps({"w": np.ones((3, 3))})
    with pytest.raises(CheckpointError):
        loads(blob[:-8])
    with pytest.raises(CheckpointError):
        loads(blob[:6])


def test_non_matrix_rejected():
    with pytest.raises(CheckpointError):
        dumps({"v": np.ones(3)})
