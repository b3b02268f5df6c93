"""Streamline containers and polyline geometry.

A streamline is an ``(n, 3)`` float array of vertices in millimetres. The
functions here never mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidStreamlineError

N_VERTICES = 256
_COLLINEAR_EPS = 1e-12


def as_streamline(points) -> np.ndarray:
    """Validate and convert ``points`` to an ``(n, 3)`` float64 array."""
    s = np.asarray(points, dtype=np.float64)
    if s.ndim != 2 or s.shape[1] != 3:
        raise InvalidStreamlineError(f"expected (n, 3) vertices, got shape {s.shape}")
    if len(s) < 2:
        raise InvalidStreamlineError(f"streamline needs >= 2 vertices, got {len(s)}")
    if not np.all(np.isfinite(s)):
        raise InvalidStreamlineError("streamline has non-finite coordinates")
    return s


@dataclass
class Tractogram:
    """A list of streamlines with optional integer bundle labels."""

    streamlines: list = field(default_factory=list)
    labels: np.ndarray | None = None
    space_tag: str = "world_mm"
    label_names: dict = field(default_factory=dict)

    def __post_init__(self):
        self.streamlines = [np.asarray(s, dtype=np.float64) for s in self.streamlines]
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if len(self.labels) != len(self.streamlines):
                raise ValueError(
                    f"{len(self.labels)} labels for {len(self.streamlines)} streamlines"
                )

    def __len__(self):
        return len(self.streamlines)

    def bundle_ids(self) -> list[int]:
        if self.labels is None:
            return [0] if self.streamlines else []
        return sorted(int(b) for b in np.unique(self.labels))

    def bundle(self, bundle_id: int) -> "Tractogram":
        if self.labels is None:
            idx = range(len(self)) if bundle_id == 0 else []
        else:
            idx = np.flatnonzero(self.labels == bundle_id)
        return self.subset(idx)

    def subset(self, indices) -> "Tractogram":
        indices = list(indices)
        labels = None if self.labels is None else self.labels[indices]
        return Tractogram(
            [self.streamlines[i] for i in indices],
            labels,
            self.space_tag,
            dict(self.label_names),
        )

    @classmethod
    def concatenate(cls, parts: list["Tractogram"], space_tag=None) -> "Tractogram":
        parts = [p for p in parts if p is not None]
        streamlines = [s for p in parts for s in p.streamlines]
        labelled = [p for p in parts if len(p)]
        if labelled and all(p.labels is not None for p in labelled):
            labels = np.concatenate([p.labels for p in labelled])
        else:
            labels = None
        names = {}
        for p in parts:
            names.update(p.label_names)
        tag = space_tag or (parts[0].space_tag if parts else "world_mm")
        return cls(streamlines, labels, tag, names)


def segment_lengths(s: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.diff(s, axis=0), axis=1)


def length(s) -> float:
    """Sum of Euclidean segment lengths in mm."""
    s = np.asarray(s, dtype=np.float64)
    return float(segment_lengths(s).sum())


def resample(s, n: int = N_VERTICES) -> np.ndarray:
    """Resample to ``n`` vertices equally spaced in arc length along ``s``.

    Interpolation is linear along the cumulative chord length, so every output
    vertex lies on the input polyline and the endpoints are kept exactly.
    """
    s = as_streamline(s)
    if n < 2:
        raise ValueError(f"n must be >= 2, got {n}")
    seg = segment_lengths(s)
    total = seg.sum()
    if not total > 0:
        raise InvalidStreamlineError("cannot resample a zero-length streamline")
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    targets = np.linspace(0.0, total, n)
    out = np.empty((n, 3))
    for d in range(3):
        out[:, d] = np.interp(targets, arc, s[:, d])
    out[0] = s[0]
    out[-1] = s[-1]
    return out


def local_orientations(s) -> np.ndarray:
    """Unit direction of every segment; zero-length segments are NaN rows."""
    s = np.asarray(s, dtype=np.float64)
    d = np.diff(s, axis=0)
    norms = np.linalg.norm(d, axis=1)
    out = np.full_like(d, np.nan)
    ok = norms > 0
    out[ok] = d[ok] / norms[ok, None]
    return out


def winding(s) -> float:
    """Total unsigned turning angle in degrees.

    Zero-length segments are dropped before measuring the angles, so a
    duplicated vertex neither adds nor hides a turn.
    """
    dirs = local_orientations(s)
    dirs = dirs[~np.isnan(dirs[:, 0])]
    if len(dirs) < 2:
        return 0.0
    dot = np.einsum("ij,ij->i", dirs[:-1], dirs[1:])
    sin = np.linalg.norm(np.cross(dirs[:-1], dirs[1:]), axis=1)
    # collinear up to unit-vector rounding counts as no turn
    sin[sin < _COLLINEAR_EPS] = 0.0
    return float(np.degrees(np.arctan2(sin, dot)).sum())


def longest_true_run(flags: np.ndarray) -> tuple[int, int]:
    """Return ``(start, stop)`` of the first longest run of True values."""
    flags = np.asarray(flags, dtype=bool)
    if not flags.any():
        return 0, 0
    padded = np.concatenate([[False], flags, [False]]).astype(np.int8)
    edges = np.diff(padded)
    starts = np.flatnonzero(edges == 1)
    stops = np.flatnonzero(edges == -1)
    best = int(np.argmax(stops - starts))
    return int(starts[best]), int(stops[best])


def trim_to_mask(s, mask) -> np.ndarray | None:
    """Keep the longest contiguous run of vertices inside ``mask``.

    ``mask`` is any object with a ``contains(points) -> bool array`` method
    (normally a binary :class:`~gesta.volume.VolumeGrid`). Returns ``None``
    when fewer than two vertices survive.
    """
    s = np.asarray(s, dtype=np.float64)
    start, stop = longest_true_run(mask.contains(s))
    if stop - start < 2:
        return None
    if start == 0 and stop == len(s):
        return s
    return s[start:stop]
