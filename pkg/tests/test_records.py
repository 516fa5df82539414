import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from oagdefense import records


def test_round_trip_with_meta(tmp_path):
    arrs = {"w": np.arange(6.0).reshape(2, 3), "b": np.array(-0.5), "v": np.zeros((0, 4))}
    records.save(tmp_path / "r.oagr", arrs, {"arch": [1, 2], "name": "x"})
    back, meta = records.load(tmp_path / "r.oagr")
    assert meta == {"arch": [1, 2], "name": "x"}
    assert list(back) == ["w", "b", "v"]
    for k in arrs:
        np.testing.assert_array_equal(back[k], arrs[k])
        assert back[k].shape == arrs[k].shape


def test_header_layout():
    blob = records.dumps({"a": np.array([1.5])}, {"k": 1})
    meta = b'{"k": 1}'
    assert blob[:4] == b"OAGR"
    assert struct.unpack_from("<II", blob, 4) == (1, len(meta))
    pos = 12 + len(meta)
    assert struct.unpack_from("<I", blob, pos) == (1,)
    assert struct.unpack_from("<H", blob, pos + 4) == (1,)
    assert blob[pos + 6:pos + 7] == b"a"
    assert struct.unpack_from("<IQ", blob, pos + 7) == (1, 1)
    assert struct.unpack_from("<d", blob, pos + 19) == (1.5,)
    assert len(blob) == pos + 27


def test_bad_magic_and_version():
    with pytest.raises(ValueError):
        records.loads(b"NOPE" + bytes(12))
    blob = bytearray(records.dumps({}))
    blob[4] = 9
    with pytest.raises(ValueError):
        records.loads(bytes(blob))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(allow_nan=False, width=64)))
def test_bit_exact(arr):
    back, _ = records.loads(records.dumps({"x": arr}))
    assert back["x"].tobytes() == np.ascontiguousarray(arr, dtype="<f8").tobytes()
