import struct
from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spars import formats
from spars.errors import FormatError, ParameterError

dims3 = st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))


@settings(max_examples=40, deadline=None)
@given(dims3.flatmap(lambda d: arrays(np.float32, d, elements=st.floats(0, 1, width=32))))
def test_volume_round_trip_bit_exact(tmp_path_factory, vol):
    path = tmp_path_factory.mktemp("v") / "a.spv"
    formats.write_volume(path, vol)
    back = formats.read_volume(path)
    assert back.shape == vol.shape and back.tobytes() == vol.tobytes()


@settings(max_examples=40, deadline=None)
@given(dims3.flatmap(lambda d: arrays(np.uint8, d, elements=st.integers(0, 2))))
def test_mask_round_trip_bit_exact(tmp_path_factory, mask):
    path = tmp_path_factory.mktemp("m") / "a.spm"
    formats.write_mask(path, mask)
    back = formats.read_mask(path)
    assert back.dtype == np.uint8 and np.array_equal(back, mask)


@settings(max_examples=25, deadline=None)
@given(dims3.flatmap(lambda d: arrays(np.float32, d, elements=st.floats(0, 50, width=32))))
def test_probability_map_round_trip(tmp_path_factory, pmap):
    path = tmp_path_factory.mktemp("p") / "a.spp"
    formats.write_probability_map(path, pmap)
    assert formats.read_probability_map(path).tobytes() == pmap.tobytes()


def test_payload_is_x_fastest():
    vol = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    buf = formats._encode_grid(formats.VOLUME_MAGIC, vol)
    assert buf[:4] == b"SPV1"
    assert struct.unpack_from("<3I", buf, 4) == (2, 3, 4)
    first = np.frombuffer(buf, "<f4", count=3, offset=16)
    np.testing.assert_array_equal(first, [vol[0, 0, 0], vol[1, 0, 0], vol[0, 1, 0]])


def test_bad_magic_reports_offset_zero(tmp_path):
    path = tmp_path / "x.spv"
    path.write_bytes(b"XXXX" + struct.pack("<3I", 1, 1, 1) + b"\0" * 4)
    with pytest.raises(FormatError) as exc:
        formats.read_volume(path)
    assert exc.value.offset == 0


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.spv"
    path.write_bytes(b"SPV1" + struct.pack("<3I", 2, 2, 2) + b"\0" * (7 * 4))
    with pytest.raises(FormatError) as exc:
        formats.read_volume(path)
    assert "truncated" in str(exc.value) and exc.value.offset == 16 + 28


def test_truncated_header(tmp_path):
    path = tmp_path / "h.spm"
    path.write_bytes(b"SPM1" + b"\1\0")
    with pytest.raises(FormatError, match="header"):
        formats.read_mask(path)


def test_dim_overflow(tmp_path):
    path = tmp_path / "o.spv"
    path.write_bytes(b"SPV1" + struct.pack("<3I", 2 ** 16, 2 ** 16, 2))
    with pytest.raises(FormatError, match="overflow") as exc:
        formats.read_volume(path)
    assert exc.value.offset == 4


def test_zero_dim_and_trailing_bytes(tmp_path):
    path = tmp_path / "z.spv"
    path.write_bytes(b"SPV1" + struct.pack("<3I", 0, 1, 1))
    with pytest.raises(FormatError, match="zero"):
        formats.read_volume(path)
    path.write_bytes(b"SPV1" + struct.pack("<3I", 1, 1, 1) + b"\0" * 8)
    with pytest.raises(FormatError, match="trailing"):
        formats.read_volume(path)


def test_wrong_magic_for_kind(tmp_path):
    path = tmp_path / "m.spm"
    formats.write_mask(path, np.zeros((2, 2, 2), np.uint8))
    with pytest.raises(FormatError):
        formats.read_volume(path)


def test_mask_out_of_range_rejected():
    with pytest.raises(ParameterError):
        formats.write_mask("/nonexistent/never.spm", np.full((1, 1, 1), 300))


def test_weights_round_trip(tmp_path):
    r = np.random.default_rng(0)
    w = OrderedDict([("conv0.weight", r.normal(size=(8, 1, 3, 3, 3)).astype(np.float32)),
                     ("fc0.bias", r.normal(size=5).astype(np.float32)),
                     ("scalar", np.array(1.5, np.float32))])
    path = tmp_path / "w.spw"
    formats.write_weights(path, w)
    back = formats.read_weights(path)
    assert list(back) == list(w)
    for k in w:
        assert back[k].shape == w[k].shape and back[k].tobytes() == w[k].tobytes()
    assert formats.encode_weights(back) == path.read_bytes()


def test_weights_errors():
    good = formats.encode_weights(OrderedDict(a=np.ones(3, np.float32)))
    with pytest.raises(FormatError) as exc:
        formats.decode_weights(b"SPV1" + good[4:])
    assert exc.value.offset == 0
    with pytest.raises(FormatError, match="truncated"):
        formats.decode_weights(good[:-1])
    with pytest.raises(FormatError, match="trailing"):
        formats.decode_weights(good + b"\0")
