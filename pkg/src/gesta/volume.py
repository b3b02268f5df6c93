"""Voxel lattices: masks, peak fields, morphology and segment traversal.

Voxel ``(i, j, k)`` is centred at ``affine @ (i, j, k, 1)`` and owns the
half-open cell ``[i - 0.5, i + 0.5)`` along each axis in voxel coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import GeometryMismatchError

N_PEAKS = 5


def scaling_affine(voxel_size=1.0, origin=(0.0, 0.0, 0.0)) -> np.ndarray:
    vs = np.broadcast_to(np.asarray(voxel_size, dtype=np.float64), (3,))
    aff = np.eye(4)
    aff[:3, :3] = np.diag(vs)
    aff[:3, 3] = origin
    return aff


class _Grid:
    affine: np.ndarray

    def _init_affine(self):
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.affine.shape != (4, 4):
            raise GeometryMismatchError(f"affine must be 4x4, got {self.affine.shape}")
        if abs(np.linalg.det(self.affine[:3, :3])) < 1e-12:
            raise GeometryMismatchError("affine is not invertible")
        self._inv = np.linalg.inv(self.affine)

    @property
    def dims(self) -> tuple[int, int, int]:
        raise NotImplementedError

    @property
    def voxel_size(self) -> np.ndarray:
        return np.linalg.norm(self.affine[:3, :3], axis=0)

    @property
    def voxel_volume(self) -> float:
        return float(abs(np.linalg.det(self.affine[:3, :3])))

    def world_to_voxel(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self._inv[:3, :3].T + self._inv[:3, 3]

    def voxel_to_world(self, coords) -> np.ndarray:
        c = np.asarray(coords, dtype=np.float64)
        return c @ self.affine[:3, :3].T + self.affine[:3, 3]

    def voxel_index(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Integer voxel indices of ``points`` and an in-bounds flag."""
        idx = np.floor(self.world_to_voxel(points) + 0.5).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=-1)
        return idx, inside

    def same_geometry(self, other: "_Grid") -> bool:
        return tuple(self.dims) == tuple(other.dims) and np.allclose(
            self.affine, other.affine, rtol=0, atol=1e-9
        )

    def check_same_geometry(self, other: "_Grid"):
        if not self.same_geometry(other):
            raise GeometryMismatchError(
                f"grid mismatch: dims {self.dims} vs {other.dims}"
            )


@dataclass
class VolumeGrid(_Grid):
    """Scalar or binary volume with a voxel-to-world affine."""

    data: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise GeometryMismatchError(f"bad volume shape {self.data.shape}")
        self._init_affine()

    @classmethod
    def empty_like(cls, grid: _Grid, dtype=bool) -> "VolumeGrid":
        return cls(np.zeros(grid.dims, dtype=dtype), grid.affine.copy())

    @property
    def dims(self):
        return tuple(self.data.shape)

    @property
    def is_binary(self) -> bool:
        if self.data.dtype == bool:
            return True
        return bool(np.isin(self.data, (0, 1)).all())

    def as_bool(self) -> np.ndarray:
        if not self.is_binary:
            raise TypeError("mask payload is not binary")
        return self.data.astype(bool)

    def contains(self, points) -> np.ndarray:
        """Membership of world points; out-of-bounds points are outside."""
        idx, inside = self.voxel_index(points)
        out = np.zeros(inside.shape, dtype=bool)
        sel = idx[inside]
        out[inside] = self.data[sel[:, 0], sel[:, 1], sel[:, 2]] != 0
        return out

    def with_data(self, data) -> "VolumeGrid":
        return VolumeGrid(data, self.affine.copy())

    def count(self) -> int:
        return int(np.count_nonzero(self.data))


@dataclass
class PeakField(_Grid):
    """Up to five axial fibre directions per voxel, shape ``(nx, ny, nz, 5, 3)``.

    Peak magnitude carries amplitude; an absent peak is the zero vector.
    """

    peaks: np.ndarray
    affine: np.ndarray

    def __post_init__(self):
        self.peaks = np.asarray(self.peaks, dtype=np.float64)
        if self.peaks.ndim != 5 or self.peaks.shape[3:] != (N_PEAKS, 3):
            raise GeometryMismatchError(
                f"peak array must be (nx, ny, nz, {N_PEAKS}, 3), got {self.peaks.shape}"
            )
        self._init_affine()

    @property
    def dims(self):
        return tuple(self.peaks.shape[:3])

    def flipped(self) -> "PeakField":
        return PeakField(-self.peaks, self.affine.copy())


def interpolate_peaks(field: PeakField, points, chunk: int = 20000) -> np.ndarray:
    """Trilinear interpolation of axial peaks at world ``points``.

    Returns ``(..., 5, 3)``. For each point the highest-weight corner holding
    any peak serves as reference; every other corner contributes, per
    reference slot, its best-aligned peak flipped into the reference
    hemisphere. Points outside the grid get five zero vectors.
    """
    pts = np.asarray(points, dtype=np.float64)
    flat = pts.reshape(-1, 3)
    out = np.zeros((len(flat), N_PEAKS, 3))
    for lo in range(0, len(flat), chunk):
        out[lo : lo + chunk] = _interp_chunk(field, flat[lo : lo + chunk])
    return out.reshape(pts.shape[:-1] + (N_PEAKS, 3))


_CORNERS = np.array(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.int64
)


def _interp_chunk(field: PeakField, pts: np.ndarray) -> np.ndarray:
    dims = np.asarray(field.dims)
    c = field.world_to_voxel(pts)
    inside = np.all((c >= -0.5) & (c < dims - 0.5), axis=1)
    res = np.zeros((len(pts), N_PEAKS, 3))
    if not inside.any():
        return res
    c = c[inside]
    base = np.floor(c).astype(np.int64)
    frac = c - base
    idx = base[:, None, :] + _CORNERS[None, :, :]
    # corners beyond the lattice edge reuse the edge voxel
    idx = np.clip(idx, 0, dims - 1)
    w = np.prod(np.where(_CORNERS[None] == 1, frac[:, None, :], 1 - frac[:, None, :]), axis=2)
    vecs = field.peaks[idx[..., 0], idx[..., 1], idx[..., 2]]  # (P, 8, 5, 3)

    has_peak = np.any(vecs != 0, axis=(2, 3)) & (w > 0)
    if not has_peak.any():
        return res
    ref_corner = np.argmax(np.where(has_peak, w, -1.0), axis=1)
    ref = vecs[np.arange(len(c)), ref_corner]  # (P, 5, 3)

    unit = vecs / np.maximum(np.linalg.norm(vecs, axis=-1, keepdims=True), 1e-300)
    ref_unit = unit[np.arange(len(c)), ref_corner]
    dots = np.einsum("pjd,pcsd->pcjs", ref_unit, unit)  # cosines (P, 8, ref slot, corner slot)
    best = np.argmax(np.abs(dots), axis=3)
    # the reference corner keeps its own slot order
    best[np.arange(len(c)), ref_corner] = np.arange(N_PEAKS)
    best_dot = np.take_along_axis(dots, best[..., None], axis=3)[..., 0]
    sign = np.where(best_dot < 0, -1.0, 1.0)
    matched = np.take_along_axis(vecs, best[..., None].repeat(3, axis=-1), axis=2)
    acc = np.einsum("pc,pcj,pcjd->pjd", w, sign, matched)
    ref_present = np.any(ref != 0, axis=2)
    acc[~ref_present] = 0.0
    # all-zero rows stay exactly zero
    res[inside] = acc
    return res




def _structure(connectivity: int):
    return ndimage.generate_binary_structure(3, connectivity)


def dilate(mask: VolumeGrid, iterations: int = 1, connectivity: int = 1) -> VolumeGrid:
    data = mask.as_bool()
    if iterations <= 0:
        return mask.with_data(data.copy())
    out = ndimage.binary_dilation(
        data, structure=_structure(connectivity), iterations=iterations, border_value=0
    )
    return mask.with_data(out)


def erode(mask: VolumeGrid, iterations: int = 1, connectivity: int = 1) -> VolumeGrid:
    """Binary erosion; voxels beyond the lattice count as background."""
    data = mask.as_bool()
    if iterations <= 0:
        return mask.with_data(data.copy())
    out = ndimage.binary_erosion(
        data, structure=_structure(connectivity), iterations=iterations, border_value=0
    )
    return mask.with_data(out)


def _segment_cells(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cells crossed by segments ``a[i] -> b[i]`` given in shifted voxel coords.

    Coordinates are shifted so that the cell index is ``floor``. All plane
    crossings of each segment are collected, sorted along the segment, and the
    cell of every sub-interval midpoint is recorded together with the cells of
    both endpoints.
    """
    n = len(a)
    seg_ids = [np.arange(n), np.arange(n)]
    ts = [np.zeros(n), np.ones(n)]
    d = b - a
    for ax in range(3):
        lo = np.minimum(a[:, ax], b[:, ax])
        hi = np.maximum(a[:, ax], b[:, ax])
        first = np.floor(lo).astype(np.int64) + 1
        last = np.ceil(hi).astype(np.int64) - 1
        counts = np.maximum(last - first + 1, 0)
        if counts.sum() == 0:
            continue
        sid = np.repeat(np.arange(n), counts)
        offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        planes = first[sid] + offs
        ts.append((planes - a[sid, ax]) / d[sid, ax])
        seg_ids.append(sid)
    sid = np.concatenate(seg_ids)
    t = np.concatenate(ts)
    order = np.lexsort((t, sid))
    sid, t = sid[order], t[order]
    same = (sid[1:] == sid[:-1]) & (t[1:] > t[:-1])
    tm = 0.5 * (t[1:] + t[:-1])[same]
    ms = sid[1:][same]
    mids = a[ms] + tm[:, None] * d[ms]
    cells = np.floor(np.concatenate([mids, a, b])).astype(np.int64)
    return cells


def traversal_mask(streamlines, grid: _Grid, chunk_segments: int = 200000) -> np.ndarray:
    """Boolean volume of every voxel crossed by any segment of ``streamlines``."""
    out = np.zeros(grid.dims, dtype=bool)
    dims = np.asarray(grid.dims)
    batch_a, batch_b, pending = [], [], 0

    def flush():
        if not batch_a:
            return
        a = grid.world_to_voxel(np.concatenate(batch_a)) + 0.5
        b = grid.world_to_voxel(np.concatenate(batch_b)) + 0.5
        cells = _segment_cells(a, b)
        ok = np.all((cells >= 0) & (cells < dims), axis=1)
        cells = cells[ok]
        out[cells[:, 0], cells[:, 1], cells[:, 2]] = True
        batch_a.clear()
        batch_b.clear()

    for s in streamlines:
        s = np.asarray(s, dtype=np.float64)
        if len(s) == 1:
            s = np.vstack([s, s])
        batch_a.append(s[:-1])
        batch_b.append(s[1:])
        pending += len(s) - 1
        if pending >= chunk_segments:
            flush()
            pending = 0
    flush()
    return out


def voxels_traversed(s, grid: _Grid) -> set[tuple[int, int, int]]:
    """Exact set of in-bounds voxel indices crossed by streamline ``s``."""
    m = traversal_mask([s], grid)
    return {tuple(int(v) for v in ijk) for ijk in np.argwhere(m)}
