"""Binary tractogram and volume files.

Tractogram (``.strb``), all little-endian::

    b"STRB" | version u32 = 1 | count u32 | label offset u32 (0 = no labels)
    count x (n_vertices u32, n_vertices x 3 float32)
    [labels: count x u32 | name-table length u32 | name-table JSON (utf-8)]

Volume: a JSON sidecar holding ``dims``, ``voxel_size``, ``affine`` (4x4,
row-major, float64), ``dtype`` (``u8`` or ``f32``), ``channels`` and the name
of a raw payload file written in x-fastest order with channels innermost.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import Tractogram
from .volume import N_PEAKS, PeakField, VolumeGrid

TRACTOGRAM_MAGIC = b"STRB"
TRACTOGRAM_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_U32 = struct.Struct("<I")


def tractogram_to_bytes(t: Tractogram) -> bytes:
    parts = []
    body = bytearray()
    for s in t.streamlines:
        s = np.asarray(s, dtype="<f4")
        body += _U32.pack(len(s))
        body += np.ascontiguousarray(s).tobytes()
    label_offset = 0
    tail = b""
    if t.labels is not None:
        label_offset = _HEADER.size + len(body)
        names = {str(k): v for k, v in sorted(t.label_names.items())}
        table = json.dumps(names, sort_keys=True).encode("utf-8")
        tail = (
            np.asarray(t.labels, dtype="<u4").tobytes() + _U32.pack(len(table)) + table
        )
    parts.append(
        _HEADER.pack(TRACTOGRAM_MAGIC, TRACTOGRAM_VERSION, len(t.streamlines), label_offset)
    )
    parts.append(bytes(body))
    parts.append(tail)
    return b"".join(parts)


def tractogram_from_bytes(buf: bytes, space_tag: str = "world_mm") -> Tractogram:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, count, label_offset = _HEADER.unpack_from(buf, 0)
    if magic != TRACTOGRAM_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != TRACTOGRAM_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    pos = _HEADER.size
    streamlines = []
    for _ in range(count):
        if pos + 4 > len(buf):
            raise FormatError("truncated vertex count", pos)
        (n,) = _U32.unpack_from(buf, pos)
        pos += 4
        nbytes = n * 12
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated streamline payload ({n} vertices)", pos)
        s = np.frombuffer(buf, dtype="<f4", count=n * 3, offset=pos).reshape(n, 3)
        streamlines.append(s.astype(np.float64))
        pos += nbytes
    labels = None
    names = {}
    if label_offset:
        if label_offset != pos:
            raise FormatError(f"label offset {label_offset} does not follow payload", pos)
        end = pos + 4 * count
        if end + 4 > len(buf):
            raise FormatError("truncated label block", pos)
        labels = np.frombuffer(buf, dtype="<u4", count=count, offset=pos).astype(np.int64)
        (tlen,) = _U32.unpack_from(buf, end)
        pos = end + 4
        if pos + tlen > len(buf):
            raise FormatError("truncated label name table", pos)
        try:
            raw = json.loads(buf[pos : pos + tlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt label name table: {exc}", pos) from exc
        names = {int(k): v for k, v in raw.items()}
        pos += tlen
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes", pos)
    return Tractogram(streamlines, labels, space_tag, names)


def write_tractogram(path, t: Tractogram):
    Path(path).write_bytes(tractogram_to_bytes(t))


def read_tractogram(path) -> Tractogram:
    return tractogram_from_bytes(Path(path).read_bytes())


_DTYPES = {"u8": np.dtype("<u1"), "f32": np.dtype("<f4")}


def _payload_path(sidecar: Path) -> Path:
    return sidecar.with_suffix(".raw")


def write_volume(path, vol):
    """Write a :class:`VolumeGrid` or :class:`PeakField` as sidecar + raw payload.

    ``path`` names the JSON sidecar; the payload goes next to it with a
    ``.raw`` suffix.
    """
    path = Path(path)
    if isinstance(vol, PeakField):
        data = vol.peaks.reshape(vol.dims + (N_PEAKS * 3,)).astype("<f4")
        dtype, channels = "f32", N_PEAKS * 3
    else:
        if vol.data.dtype == bool or vol.is_binary and vol.data.dtype.kind in "iub":
            data, dtype = vol.data.astype("<u1"), "u8"
        else:
            data, dtype = vol.data.astype("<f4"), "f32"
        channels = 1
        data = data[..., None]
    raw_path = _payload_path(path)
    meta = {
        "dims": list(vol.dims),
        "voxel_size": [float(v) for v in vol.voxel_size],
        "affine": [[float(v) for v in row] for row in vol.affine],
        "dtype": dtype,
        "channels": channels,
        "payload": raw_path.name,
    }
    # x-fastest: Fortran order over the spatial axes, channels innermost
    payload = np.ascontiguousarray(np.transpose(data, (2, 1, 0, 3))).tobytes()
    raw_path.write_bytes(payload)
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_volume(path):
    path = Path(path)
    try:
        meta = json.loads(path.read_text())
        dims = tuple(int(d) for d in meta["dims"])
        affine = np.asarray(meta["affine"], dtype=np.float64)
        dtype = _DTYPES[meta["dtype"]]
        channels = int(meta["channels"])
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"bad volume sidecar {path}: {exc}") from exc
    raw = (path.parent / meta.get("payload", _payload_path(path).name)).read_bytes()
    expected = int(np.prod(dims)) * channels * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"payload is {len(raw)} bytes, dims/channels imply {expected}",
            min(len(raw), expected),
        )
    arr = np.frombuffer(raw, dtype=dtype).reshape(dims[2], dims[1], dims[0], channels)
    arr = np.transpose(arr, (2, 1, 0, 3))
    if channels == N_PEAKS * 3:
        return PeakField(arr.reshape(dims + (N_PEAKS, 3)).astype(np.float64), affine)
    if channels != 1:
        raise FormatError(f"unsupported channel count {channels}")
    data = arr[..., 0]
    data = data.astype(bool) if dtype == _DTYPES["u8"] else data.astype(np.float32)
    return VolumeGrid(np.ascontiguousarray(data), affine)
