import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gesta.errors import FormatError
from gesta.formats import (
    read_tractogram,
    read_volume,
    tractogram_from_bytes,
    tractogram_to_bytes,
    write_tractogram,
    write_volume,
)
from gesta.geometry import Tractogram
from gesta.volume import PeakField, VolumeGrid, scaling_affine

f32 = st.floats(-1e4, 1e4, allow_nan=False, width=32)
streamline = st.integers(1, 30).flatmap(lambda n: arrays(np.float32, (n, 3), elements=f32))


@given(st.lists(streamline, max_size=8), st.booleans())
def test_tractogram_round_trip(sl, labelled):
    labels = np.arange(len(sl)) % 3 + 1 if labelled else None
    names = {1: "arc", 2: "straight"} if labelled else {}
    t = Tractogram([s.astype(float) for s in sl], labels, label_names=names)
    back = tractogram_from_bytes(tractogram_to_bytes(t))
    assert len(back) == len(t)
    for a, b in zip(t.streamlines, back.streamlines):
        np.testing.assert_array_equal(a, b)
    if labelled:
        np.testing.assert_array_equal(back.labels, labels)
        assert back.label_names == names
    else:
        assert back.labels is None


def test_tractogram_byte_layout():
    t = Tractogram([np.array([[1, 2, 3], [4, 5, 6]], float)], np.array([7]), label_names={7: "x"})
    buf = tractogram_to_bytes(t)
    magic, version, count, label_off = struct.unpack_from("<4sIII", buf)
    assert (magic, version, count) == (b"STRB", 1, 1)
    assert struct.unpack_from("<I", buf, 16)[0] == 2
    np.testing.assert_array_equal(np.frombuffer(buf, "<f4", 6, 20), [1, 2, 3, 4, 5, 6])
    assert label_off == 44
    assert struct.unpack_from("<I", buf, 44)[0] == 7
    (tlen,) = struct.unpack_from("<I", buf, 48)
    assert json.loads(buf[52 : 52 + tlen]) == {"7": "x"}
    assert len(buf) == 52 + tlen


def test_tractogram_errors_report_offsets():
    good = tractogram_to_bytes(Tractogram([np.zeros((4, 3))]))
    with pytest.raises(FormatError, match="magic"):
        tractogram_from_bytes(b"XXXX" + good[4:])
    with pytest.raises(FormatError, match="version"):
        tractogram_from_bytes(good[:4] + struct.pack("<I", 2) + good[8:])
    with pytest.raises(FormatError, match="offset 20"):
        tractogram_from_bytes(good[:-1])
    with pytest.raises(FormatError, match="trailing"):
        tractogram_from_bytes(good + b"\0")
    with pytest.raises(FormatError, match="header"):
        tractogram_from_bytes(b"STR")


def test_tractogram_file_round_trip(tmp_path):
    t = Tractogram([np.eye(3), np.ones((5, 3))], np.array([1, 2]))
    write_tractogram(tmp_path / "t.strb", t)
    back = read_tractogram(tmp_path / "t.strb")
    np.testing.assert_array_equal(back.streamlines[1], t.streamlines[1])


def test_binary_volume_round_trip_x_fastest(tmp_path):
    data = np.zeros((3, 4, 5), bool)
    data[1, 0, 0] = True
    data[2, 3, 4] = True
    vol = VolumeGrid(data, scaling_affine(2.5, (1, 2, 3)))
    write_volume(tmp_path / "m.json", vol)
    raw = (tmp_path / "m.raw").read_bytes()
    assert len(raw) == 60
    # x-fastest: (1,0,0) is byte 1, (2,3,4) is byte 2 + 3*3 + 4*12
    assert raw[1] == 1 and raw[2 + 9 + 48] == 1 and sum(raw) == 2
    back = read_volume(tmp_path / "m.json")
    assert back.data.dtype == bool
    np.testing.assert_array_equal(back.data, data)
    np.testing.assert_array_equal(back.affine, vol.affine)
    meta = json.loads((tmp_path / "m.json").read_text())
    assert meta["dtype"] == "u8" and meta["channels"] == 1 and meta["voxel_size"] == [2.5] * 3


def test_peak_field_round_trip(tmp_path):
    peaks = np.random.default_rng(0).normal(size=(2, 3, 4, 5, 3)).astype(np.float32).astype(float)
    write_volume(tmp_path / "p.json", PeakField(peaks, np.eye(4)))
    back = read_volume(tmp_path / "p.json")
    assert isinstance(back, PeakField)
    np.testing.assert_array_equal(back.peaks, peaks)
    assert json.loads((tmp_path / "p.json").read_text())["channels"] == 15


def test_float_volume_round_trip(tmp_path):
    data = np.linspace(0, 1, 24).reshape(2, 3, 4).astype(np.float32)
    write_volume(tmp_path / "f.json", VolumeGrid(data, np.eye(4)))
    np.testing.assert_array_equal(read_volume(tmp_path / "f.json").data, data)


def test_volume_size_mismatch(tmp_path):
    write_volume(tmp_path / "m.json", VolumeGrid(np.ones((2, 2, 2), bool), np.eye(4)))
    (tmp_path / "m.raw").write_bytes(b"\1" * 7)
    with pytest.raises(FormatError, match="payload"):
        read_volume(tmp_path / "m.json")
    (tmp_path / "m.json").write_text("{}")
    with pytest.raises(FormatError, match="sidecar"):
        read_volume(tmp_path / "m.json")
