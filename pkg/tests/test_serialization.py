import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from wavenilm.serialization import (DATASET_MAGIC, MODEL_MAGIC, FormatError, decode_meta, encode_meta,
                                    from_bytes, to_bytes)


def test_layout_header():
    raw = to_bytes(MODEL_MAGIC, {"b": "2", "a": "1"}, {"w": np.array([1.5], dtype="<f4")})
    assert raw[:8] == MODEL_MAGIC
    version, meta_len = struct.unpack("<HI", raw[8:14])
    assert version == 1
    assert raw[14:14 + meta_len] == b"a=1\nb=2\n"
    (n,) = struct.unpack("<I", raw[14 + meta_len:18 + meta_len])
    assert n == 1
    assert raw.endswith(np.float32(1.5).tobytes())


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float32, np.float64, np.int64]),
                  hnp.array_shapes(min_dims=0, max_dims=3, max_side=5)))
def test_round_trip_bit_exact(arr):
    meta, arrays = from_bytes(to_bytes(DATASET_MAGIC, {"k": "v=w"}, {"x": arr}), DATASET_MAGIC)
    assert meta == {"k": "v=w"}
    back = arrays["x"]
    assert back.shape == arr.shape and back.dtype == arr.dtype
    assert back.tobytes() == np.ascontiguousarray(arr).tobytes()


def test_bad_magic():
    raw = to_bytes(MODEL_MAGIC, {}, {})
    with pytest.raises(FormatError, match="magic"):
        from_bytes(raw, DATASET_MAGIC)


def test_truncated_and_trailing():
    raw = to_bytes(MODEL_MAGIC, {"a": "1"}, {"w": np.zeros(4)})
    with pytest.raises(FormatError):
        from_bytes(raw[:-3], MODEL_MAGIC)
    with pytest.raises(FormatError):
        from_bytes(raw + b"\0", MODEL_MAGIC)


def test_bad_version():
    raw = bytearray(to_bytes(MODEL_MAGIC, {}, {}))
    raw[8:10] = struct.pack("<H", 99)
    with pytest.raises(FormatError, match="version"):
        from_bytes(bytes(raw), MODEL_MAGIC)


def test_meta_rejects_newlines():
    with pytest.raises(ValueError):
        encode_meta({"a": "x\ny"})


def test_meta_round_trip():
    meta = {"model.family": "wavenet", "x": "", "z": "a=b"}
    assert decode_meta(encode_meta(meta)) == meta


def test_unsupported_dtype():
    with pytest.raises((ValueError, TypeError)):
        to_bytes(MODEL_MAGIC, {}, {"c": np.zeros(2, dtype=np.complex64)})
