"""Synthetic Fiber-Cup-like phantom on a 64 x 64 x 3 grid of 3 mm voxels.

Ground-truth streamlines are smooth jittered offsets of parametric bundle
centrelines. Masks are rasterised from the streamlines and the peak field is
built by clustering the streamline tangents found in each voxel, so every
piece of the dataset is consistent by construction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import SpecError
from .geometry import N_VERTICES, Tractogram, resample
from .volume import (
    N_PEAKS,
    PeakField,
    VolumeGrid,
    dilate,
    scaling_affine,
    traversal_mask,
)

log = logging.getLogger(__name__)


@dataclass
class BundleSpec:
    """A bundle centreline.

    ``kind`` is one of ``line`` (``points``: 2 xy pairs), ``bezier``
    (``points``: 3 xy control points), ``arc`` (``center``, ``radius``,
    ``angles`` in degrees) or ``u`` (``center``, ``radius``, ``arm``: a lower
    half circle with vertical arms of length ``arm`` pointing up).
    """

    name: str
    kind: str
    points: list = field(default_factory=list)
    center: list = field(default_factory=list)
    radius: float = 0.0
    angles: list = field(default_factory=list)
    arm: float = 0.0


def default_bundles() -> list[BundleSpec]:
    return [
        BundleSpec("straight", "line", points=[[25, 25], [165, 25]]),
        BundleSpec("arc", "arc", center=[145, 140], radius=40, angles=[25, 155]),
        BundleSpec("u_shape", "u", center=[60, 152], radius=24, arm=26),
        BundleSpec("cross_a", "line", points=[[108, 72], [178, 142]]),
        BundleSpec("cross_b", "line", points=[[108, 142], [178, 72]]),
        BundleSpec("kiss_upper", "bezier", points=[[20, 112], [55, 64], [90, 112]]),
        BundleSpec("kiss_lower", "bezier", points=[[20, 62], [55, 110], [90, 62]]),
    ]


@dataclass
class PhantomSpec:
    dims: tuple = (64, 64, 3)
    voxel_size: float = 3.0
    bundles: list = field(default_factory=default_bundles)
    streamlines_per_bundle: int = 1000
    jitter_std: float = 2.0
    bundle_radius: float = 6.0
    z_jitter_std: float = 1.5
    seed: int = 1234

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.bundles = [b if isinstance(b, BundleSpec) else BundleSpec(**b) for b in self.bundles]

    def validate(self):
        problems = []
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            problems.append(f"dims must be three positive integers, got {self.dims}")
        if not self.voxel_size > 0:
            problems.append("voxel_size must be positive")
        if len(self.bundles) < 2:
            problems.append("at least 2 bundles are required")
        if self.streamlines_per_bundle < 2:
            problems.append("streamlines_per_bundle must be >= 2")
        if not 0 <= self.jitter_std < self.bundle_radius:
            problems.append("jitter_std must be non-negative and below bundle_radius")
        if self.z_jitter_std < 0:
            problems.append("z_jitter_std must be non-negative")
        kinds = {"line", "bezier", "arc", "u"}
        for b in self.bundles:
            if b.kind not in kinds:
                problems.append(f"bundle {b.name!r}: unknown kind {b.kind!r}")
        if problems:
            raise SpecError(problems)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)


@dataclass
class PhantomDataset:
    tractogram: Tractogram
    wm: VolumeGrid
    gm: VolumeGrid
    brain: VolumeGrid
    gt_masks: dict
    peaks: PeakField
    spec: PhantomSpec


def centerline(b: BundleSpec, n: int = 1024) -> np.ndarray:
    """Dense 2D centreline ``(n, 2)`` for a bundle description."""
    t = np.linspace(0.0, 1.0, n)
    if b.kind == "line":
        p0, p1 = np.asarray(b.points, dtype=float)
        return p0 + t[:, None] * (p1 - p0)
    if b.kind == "bezier":
        p0, p1, p2 = np.asarray(b.points, dtype=float)
        return (
            ((1 - t) ** 2)[:, None] * p0
            + (2 * (1 - t) * t)[:, None] * p1
            + (t**2)[:, None] * p2
        )
    c = np.asarray(b.center, dtype=float)
    if b.kind == "arc":
        a = np.radians(b.angles[0] + t * (b.angles[1] - b.angles[0]))
        return c + b.radius * np.stack([np.cos(a), np.sin(a)], axis=1)
    if b.kind == "u":
        r, arm = b.radius, b.arm
        total = 2 * arm + math.pi * r
        s = t * total
        out = np.empty((n, 2))
        left = s < arm
        right = s > arm + math.pi * r
        mid = ~left & ~right
        out[left] = np.stack([np.full(left.sum(), c[0] - r), c[1] + arm - s[left]], axis=1)
        ang = math.pi + (s[mid] - arm) / r
        out[mid] = c + r * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        out[right] = np.stack(
            [np.full(right.sum(), c[0] + r), c[1] + (s[right] - arm - math.pi * r)], axis=1
        )
        return out
    raise SpecError(f"bundle {b.name!r}: unknown kind {b.kind!r}")


def _bundle_streamlines(b: BundleSpec, spec: PhantomSpec, rng: np.random.Generator) -> list:
    line2d = centerline(b)
    z0 = (spec.dims[2] - 1) * spec.voxel_size / 2
    base = resample(np.column_stack([line2d, np.full(len(line2d), z0)]), N_VERTICES)
    tangent = np.gradient(base[:, :2], axis=0)
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    t = np.linspace(0.0, 1.0, N_VERTICES)
    modes = np.stack([np.ones_like(t), np.sin(math.pi * t), np.sin(2 * math.pi * t)])
    mode_scale = np.array([1.0, 0.5, 0.35])

    out = []
    for _ in range(spec.streamlines_per_bundle):
        amp = rng.normal(0.0, spec.jitter_std, size=3) * mode_scale
        offset = np.clip(amp @ modes, -spec.bundle_radius, spec.bundle_radius)
        dz = np.clip(rng.normal(0.0, spec.z_jitter_std), -spec.voxel_size, spec.voxel_size)
        s = base.copy()
        s[:, :2] += offset[:, None] * normal
        s[:, 2] += dz
        out.append(resample(s, N_VERTICES))
    return out


def _axial_cluster(dirs: np.ndarray, weights: np.ndarray, leader_deg=20.0, member_deg=30.0,
                   max_candidates=256) -> np.ndarray:
    """Greedy axial clustering; returns up to 5 peaks scaled by group share."""
    peaks = np.zeros((N_PEAKS, 3))
    remaining = np.ones(len(dirs), dtype=bool)
    total = weights.sum()
    cos_lead = math.cos(math.radians(leader_deg))
    cos_member = math.cos(math.radians(member_deg))
    for slot in range(N_PEAKS):
        idx = np.flatnonzero(remaining)
        if len(idx) == 0:
            break
        cand = idx[:: max(1, len(idx) // max_candidates)]
        support = (np.abs(dirs[cand] @ dirs[idx].T) >= cos_lead) @ weights[idx]
        leader = dirs[cand[int(np.argmax(support))]]
        members = idx[np.abs(dirs[idx] @ leader) >= cos_member]
        d, w = dirs[members], weights[members]
        tensor = (d * w[:, None]).T @ d
        _, vecs = np.linalg.eigh(tensor)
        mean = vecs[:, -1]
        if mean @ leader < 0:
            mean = -mean
        peaks[slot] = mean * (w.sum() / total)
        remaining[members] = False
    return peaks


def peaks_from_streamlines(streamlines, grid: VolumeGrid) -> PeakField:
    """Per-voxel clustered tangent directions of the segments whose midpoint lies there."""
    a = np.concatenate([s[:-1] for s in streamlines])
    b = np.concatenate([s[1:] for s in streamlines])
    d = b - a
    seg_len = np.linalg.norm(d, axis=1)
    ok = seg_len > 0
    a, d, seg_len = a[ok], d[ok], seg_len[ok]
    dirs = d / seg_len[:, None]
    idx, inside = grid.voxel_index(a + d / 2)
    idx, dirs, seg_len = idx[inside], dirs[inside], seg_len[inside]
    dims = np.asarray(grid.dims)
    flat = np.ravel_multi_index(idx.T, dims)
    order = np.argsort(flat, kind="stable")
    flat, dirs, seg_len = flat[order], dirs[order], seg_len[order]
    uniq, starts = np.unique(flat, return_index=True)
    stops = np.append(starts[1:], len(flat))
    peaks = np.zeros(tuple(dims) + (N_PEAKS, 3))
    for f, lo, hi in zip(uniq, starts, stops):
        i, j, k = np.unravel_index(f, dims)
        peaks[i, j, k] = _axial_cluster(dirs[lo:hi], seg_len[lo:hi])
    return PeakField(peaks, grid.affine.copy())


def generate(spec: PhantomSpec | None = None) -> PhantomDataset:
    spec = spec or PhantomSpec()
    spec.validate()
    affine = scaling_affine(spec.voxel_size)
    grid = VolumeGrid(np.zeros(spec.dims, dtype=bool), affine)
    lo = -0.5 * spec.voxel_size
    hi = (np.asarray(spec.dims) - 0.5) * spec.voxel_size

    seeds = np.random.SeedSequence(spec.seed).spawn(len(spec.bundles))
    streamlines, labels, names, problems = [], [], {}, []
    for label, (b, ss) in enumerate(zip(spec.bundles, seeds), start=1):
        sl = _bundle_streamlines(b, spec, np.random.default_rng(ss))
        pts = np.concatenate(sl)
        if np.any(pts < lo) or np.any(pts >= hi):
            problems.append(f"bundle {b.name!r} leaves the grid bounds")
            continue
        streamlines += sl
        labels += [label] * len(sl)
        names[label] = b.name
    if problems:
        raise SpecError(problems)

    tract = Tractogram(streamlines, np.asarray(labels), "phantom_mm", names)
    wm = grid.with_data(traversal_mask(streamlines, grid))
    gt = {
        label: grid.with_data(traversal_mask(tract.bundle(label).streamlines, grid))
        for label in names
    }
    endpoints = np.concatenate([np.stack([s[0], s[-1]]) for s in streamlines])
    idx, inside = grid.voxel_index(endpoints)
    gm_data = np.zeros(spec.dims, dtype=bool)
    gm_data[tuple(idx[inside].T)] = True
    gm = dilate(grid.with_data(gm_data), 1)
    brain = dilate(grid.with_data(wm.data | gm.data), 2)
    peaks = peaks_from_streamlines(streamlines, grid)
    return PhantomDataset(tract, wm, gm, brain, gt, peaks, spec)


def subsample_seeds(t: Tractogram, percent: float, seed: int = 0, min_per_bundle: int = 2) -> Tractogram:
    """Uniformly pick ``ceil(percent/100 * count)`` streamlines per bundle.

    Every bundle keeps at least ``min_per_bundle`` streamlines; bundles with
    fewer streamlines than that are dropped with a warning. Each bundle draws
    from its own stream derived from ``seed`` and the bundle id.
    """
    if not 0 < percent <= 100:
        raise ValueError(f"percent must lie in (0, 100], got {percent}")
    keep = []
    labels = t.labels if t.labels is not None else np.zeros(len(t), dtype=np.int64)
    for bundle_id in sorted(int(b) for b in np.unique(labels)):
        idx = np.flatnonzero(labels == bundle_id)
        if len(idx) < min_per_bundle:
            log.warning("bundle %d has %d streamline(s); excluded", bundle_id, len(idx))
            continue
        count = max(min_per_bundle, math.ceil(round(percent / 100 * len(idx), 9)))
        count = min(count, len(idx))
        if count == len(idx):
            keep.extend(idx.tolist())
            continue
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(bundle_id,)))
        keep.extend(np.sort(rng.choice(idx, size=count, replace=False)).tolist())
    return t.subset(sorted(keep))
