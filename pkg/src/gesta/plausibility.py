"""Anatomy / direction / geometry / connectivity acceptance of streamlines.

Candidates are trimmed to the brain mask, then checked in the order
geometry, direction, WM occupancy and, for the connectivity variants, GM
endpoints. ``ADG_B``/``ADGC_B`` use the binary WM rule, ``ADG_R``/``ADGC_R``
the vertex-ratio rule.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .errors import GeometryMismatchError
from .geometry import Tractogram, length, local_orientations, trim_to_mask, winding
from .volume import PeakField, VolumeGrid, dilate, erode, interpolate_peaks

CRITERIA = ("ADG_B", "ADG_R", "ADGC_B", "ADGC_R")
CHECK_ORDER = ("length", "winding", "direction", "wm", "gm")


@dataclass(frozen=True)
class CriteriaConfig:
    length_min: float = 20.0
    length_max: float = 220.0
    winding_max: float = 330.0
    loa_max_angle: float = 30.0
    loa_compliance_ratio: float = 0.75
    wm_mode: str = "binary"
    wm_ratio: float = 0.95
    endpoint_skip: int = 10
    gm_required: bool = False
    mask_dilate_iterations: int = 2
    brain_erode_iterations: int = 2
    erode_brain: bool = True
    connectivity: int = 1
    orientation_lookup: str = "midpoint"

    def __post_init__(self):
        problems = []
        if not self.length_min < self.length_max:
            problems.append("length_min must be below length_max")
        if not 0 < self.wm_ratio <= 1:
            problems.append("wm_ratio must lie in (0, 1]")
        if not 0 < self.loa_compliance_ratio <= 1:
            problems.append("loa_compliance_ratio must lie in (0, 1]")
        for name in ("winding_max", "loa_max_angle"):
            if not 0 < getattr(self, name):
                problems.append(f"{name} must be positive")
        if not self.loa_max_angle <= 180:
            problems.append("loa_max_angle must not exceed 180")
        if self.wm_mode not in ("binary", "ratio"):
            problems.append("wm_mode must be 'binary' or 'ratio'")
        if self.orientation_lookup not in ("midpoint", "vertex"):
            problems.append("orientation_lookup must be 'midpoint' or 'vertex'")
        if self.endpoint_skip < 0:
            problems.append("endpoint_skip must be non-negative")
        if problems:
            raise ValueError("; ".join(problems))

    def for_criterion(self, criterion: str) -> "CriteriaConfig":
        if criterion not in CRITERIA:
            raise ValueError(f"criterion must be one of {CRITERIA}, got {criterion!r}")
        return replace(
            self,
            wm_mode="binary" if criterion.endswith("_B") else "ratio",
            gm_required=criterion.startswith("ADGC"),
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CriteriaConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown criteria fields: {sorted(unknown)}")
        return cls(**d)


# Per-dataset thresholds; only the phantom ("fibercup") skips brain erosion.
PRESETS = {
    "fibercup": CriteriaConfig(winding_max=330, loa_max_angle=30, wm_mode="binary", erode_brain=False),
    "ismrm2015": CriteriaConfig(winding_max=330, loa_max_angle=30, wm_mode="ratio"),
    "hcp": CriteriaConfig(winding_max=340, loa_max_angle=40, wm_mode="ratio"),
    "bilgin": CriteriaConfig(winding_max=360, loa_max_angle=40, wm_mode="ratio"),
}


@dataclass
class Outcome:
    passed: bool
    value: float
    threshold: object
    note: str = ""


@dataclass
class PreparedMasks:
    wm: VolumeGrid
    gm: VolumeGrid
    brain: VolumeGrid


def prepare_masks(wm: VolumeGrid, gm: VolumeGrid, brain: VolumeGrid, cfg: CriteriaConfig) -> PreparedMasks:
    """Dilate WM and GM and (unless disabled) erode the brain mask."""
    wm.check_same_geometry(gm)
    wm.check_same_geometry(brain)
    it, conn = cfg.mask_dilate_iterations, cfg.connectivity
    wm_p = dilate(wm, it, conn)
    gm_p = dilate(gm, it, conn)
    if cfg.erode_brain:
        brain_p = erode(brain, cfg.brain_erode_iterations, conn)
    else:
        brain_p = brain.with_data(brain.as_bool().copy())
    return PreparedMasks(wm_p, gm_p, brain_p)


def check_geometry(s, cfg: CriteriaConfig) -> dict[str, Outcome]:
    ln = length(s)
    wd = winding(s)
    return {
        "length": Outcome(cfg.length_min <= ln <= cfg.length_max, ln, [cfg.length_min, cfg.length_max]),
        "winding": Outcome(wd < cfg.winding_max, wd, cfg.winding_max),
    }


def _min_axial_angles(orient: np.ndarray, peaks: np.ndarray) -> np.ndarray:
    """Smallest axial angle (deg) between each orientation and its peaks.

    ``orient`` is ``(n, 3)`` (NaN rows for zero-length segments), ``peaks``
    ``(n, k, 3)``. Rows without any peak, or with a NaN orientation, are NaN.
    """
    norms = np.linalg.norm(peaks, axis=2)
    present = norms > 0
    unit = np.divide(peaks, norms[..., None], out=np.zeros_like(peaks), where=present[..., None])
    cos = np.abs(np.einsum("nd,nkd->nk", np.nan_to_num(orient), unit))
    cos = np.where(present, np.clip(cos, 0.0, 1.0), -np.inf)
    best = cos.max(axis=1)
    ang = np.degrees(np.arccos(np.clip(best, 0.0, 1.0)))
    masked = ~present.any(axis=1) | np.isnan(orient[:, 0])
    ang[masked] = np.nan
    return ang


def segment_peak_angles(s, peaks: PeakField, lookup: str = "midpoint") -> np.ndarray:
    """Per-segment minimum axial angle to the interpolated peaks (NaN = masked)."""
    s = np.asarray(s, dtype=np.float64)
    orient = local_orientations(s)
    if lookup == "midpoint":
        return _min_axial_angles(orient, interpolate_peaks(peaks, (s[:-1] + s[1:]) / 2))
    at_vertex = interpolate_peaks(peaks, s)
    both = np.concatenate([at_vertex[:-1], at_vertex[1:]], axis=1)
    return _min_axial_angles(orient, both)


def _direction_outcome(angles: np.ndarray, cfg: CriteriaConfig) -> Outcome:
    valid = ~np.isnan(angles)
    n_valid = int(valid.sum())
    if n_valid == 0:
        return Outcome(False, 0.0, cfg.loa_compliance_ratio, "no peak support")
    ratio = float(np.sum(angles[valid] < cfg.loa_max_angle) / n_valid)
    return Outcome(ratio >= cfg.loa_compliance_ratio, ratio, cfg.loa_compliance_ratio)


def check_direction(s, peaks: PeakField, cfg: CriteriaConfig) -> Outcome:
    """Fraction of peak-supported segments aligned within the cone."""
    return _direction_outcome(segment_peak_angles(s, peaks, cfg.orientation_lookup), cfg)


def check_wm(s, wm: VolumeGrid, cfg: CriteriaConfig) -> Outcome:
    """WM occupancy, ignoring ``endpoint_skip`` vertices at each end."""
    s = np.asarray(s, dtype=np.float64)
    skip = cfg.endpoint_skip
    note = ""
    if len(s) <= 2 * skip + 1:
        inner, note = s, "degenerate-length: evaluated without endpoint skip"
    else:
        inner = s[skip : len(s) - skip] if skip else s
    inside = wm.contains(inner)
    ratio = float(inside.mean())
    if cfg.wm_mode == "binary":
        return Outcome(bool(inside.all()), ratio, 1.0, note)
    return Outcome(ratio >= cfg.wm_ratio, ratio, cfg.wm_ratio, note)


def check_gm(s, gm: VolumeGrid) -> Outcome:
    """Both endpoints must lie in the (dilated) GM mask."""
    s = np.asarray(s, dtype=np.float64)
    ends = gm.contains(np.stack([s[0], s[-1]]))
    return Outcome(bool(ends.all()), float(ends.sum()), 2)


@dataclass
class EvaluationReport:
    criterion: str
    records: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.records)

    @property
    def accepted(self) -> int:
        return sum(r["accepted"] for r in self.records)

    @property
    def rejected(self) -> int:
        return self.total - self.accepted

    def rejection_counts(self) -> dict:
        counts = {name: 0 for name in ("trim",) + CHECK_ORDER}
        for r in self.records:
            if r["trimmed_away"]:
                counts["trim"] += 1
            for name, o in r["criteria"].items():
                if not o["passed"]:
                    counts[name] += 1
        return counts

    def summary(self) -> dict:
        return {
            "criterion": self.criterion,
            "total": self.total,
            "accepted": self.accepted,
            "rejected": self.rejected,
            "rejections_by_criterion": self.rejection_counts(),
            "degenerate": sum(bool(r["notes"]) for r in self.records),
        }

    def to_json(self) -> str:
        return json.dumps({"summary": self.summary(), "records": self.records}, indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["index", "label", "accepted", "trimmed_away"]
        for name in CHECK_ORDER:
            header += [f"{name}_pass", f"{name}_value"]
        w.writerow(header)
        for r in self.records:
            row = [r["index"], r["label"], int(r["accepted"]), int(r["trimmed_away"])]
            for name in CHECK_ORDER:
                o = r["criteria"].get(name)
                row += ["" if o is None else int(o["passed"]), "" if o is None else repr(o["value"])]
            w.writerow(row)
        return buf.getvalue()


def _check_one(s, masks: PreparedMasks, peaks: PeakField, cfg: CriteriaConfig, fast: bool):
    results = {}
    notes = []
    for name, o in check_geometry(s, cfg).items():
        results[name] = o
    if fast and not all(o.passed for o in results.values()):
        return results, notes
    results["direction"] = check_direction(s, peaks, cfg)
    if fast and not results["direction"].passed:
        return results, notes
    results["wm"] = check_wm(s, masks.wm, cfg)
    if results["wm"].note:
        notes.append(results["wm"].note)
    if cfg.gm_required and not (fast and not results["wm"].passed):
        results["gm"] = check_gm(s, masks.gm)
    return results, notes


def evaluate(candidates: Tractogram, masks: PreparedMasks, peaks: PeakField, cfg: CriteriaConfig,
             criterion: str = "ADG_B", fast: bool = False):
    """Return ``(accepted tractogram, report)``.

    Accepted streamlines are the trimmed ones, in input order. With
    ``fast=True`` checking stops at the first failed criterion.
    """
    cfg = cfg.for_criterion(criterion)
    if not masks.wm.same_geometry(peaks):
        raise GeometryMismatchError("peak field and masks are on different grids")
    report = EvaluationReport(criterion)
    kept, kept_labels = [], []
    for i, s in enumerate(candidates.streamlines):
        label = None if candidates.labels is None else int(candidates.labels[i])
        trimmed = trim_to_mask(s, masks.brain)
        rec = {"index": i, "label": label, "trimmed_away": trimmed is None, "notes": [], "criteria": {}}
        if trimmed is None:
            rec["accepted"] = False
            report.records.append(rec)
            continue
        results, notes = _check_one(trimmed, masks, peaks, cfg, fast)
        rec["notes"] = notes
        rec["n_vertices"] = len(trimmed)
        rec["criteria"] = {
            name: {"passed": bool(o.passed), "value": float(o.value), "threshold": o.threshold}
            for name, o in results.items()
        }
        required = [n for n in CHECK_ORDER if n != "gm" or cfg.gm_required]
        rec["accepted"] = all(n in results and results[n].passed for n in required)
        report.records.append(rec)
        if rec["accepted"]:
            kept.append(trimmed)
            kept_labels.append(label)
    labels = None if candidates.labels is None else np.asarray(kept_labels, dtype=np.int64)
    accepted = Tractogram(kept, labels, candidates.space_tag, dict(candidates.label_names))
    return accepted, report
