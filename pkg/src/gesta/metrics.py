"""Coverage metrics: bundle overlap (OL) and occupied volume."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass

import numpy as np

from .errors import UndefinedMetricError
from .geometry import Tractogram
from .volume import VolumeGrid, _Grid, traversal_mask

log = logging.getLogger(__name__)


def _streamlines(x) -> list:
    if x is None:
        return []
    return x.streamlines if isinstance(x, Tractogram) else list(x)


def bundle_overlap(streamlines, gt_mask: VolumeGrid) -> float:
    """Fraction of ground-truth voxels crossed by at least one streamline."""
    gt = gt_mask.as_bool()
    n_gt = int(gt.sum())
    if n_gt == 0:
        raise UndefinedMetricError("ground-truth mask is empty")
    hit = traversal_mask(_streamlines(streamlines), gt_mask)
    return float(np.count_nonzero(hit & gt) / n_gt)


def streamline_volume(streamlines, grid: _Grid) -> float:
    """Volume in mm^3 of the union of voxels crossed by the streamlines."""
    hit = traversal_mask(_streamlines(streamlines), grid)
    return float(np.count_nonzero(hit) * grid.voxel_volume)


@dataclass
class BundleScore:
    bundle: int
    name: str
    seed_ol: float
    seed_volume: float
    n_seeds: int
    generated_ol: dict
    generated_only_ol: dict
    generated_volume: dict
    n_generated: dict


def score_bundle(bundle: int, seeds, generated: dict, gt_mask: VolumeGrid, name: str = "") -> BundleScore:
    """Score one bundle; ``generated`` maps criterion name to accepted streamlines."""
    seed_sl = _streamlines(seeds)
    gen_ol, only_ol, gen_vol, n_gen = {}, {}, {}, {}
    for crit, acc in sorted(generated.items()):
        acc_sl = _streamlines(acc)
        gen_ol[crit] = bundle_overlap(seed_sl + acc_sl, gt_mask)
        only_ol[crit] = bundle_overlap(acc_sl, gt_mask)
        gen_vol[crit] = streamline_volume(seed_sl + acc_sl, gt_mask)
        n_gen[crit] = len(acc_sl)
    return BundleScore(
        bundle,
        name,
        bundle_overlap(seed_sl, gt_mask),
        streamline_volume(seed_sl, gt_mask),
        len(seed_sl),
        gen_ol,
        only_ol,
        gen_vol,
        n_gen,
    )


def _mean_std(values) -> tuple[float, float]:
    v = np.asarray(list(values), dtype=float)
    if len(v) == 0:
        return 0.0, 0.0
    return float(v.mean()), float(v.std())


@dataclass
class ExperimentScore:
    """Per-bundle scores for one seed ratio plus across-bundle mean and std."""

    percent: float
    bundles: list

    def criteria(self) -> list[str]:
        return sorted({c for b in self.bundles for c in b.generated_ol})

    def summary(self) -> dict:
        out = {"percent": self.percent, "n_bundles": len(self.bundles)}
        out["seed_ol_mean"], out["seed_ol_std"] = _mean_std(b.seed_ol for b in self.bundles)
        out["seed_volume_mean"], out["seed_volume_std"] = _mean_std(b.seed_volume for b in self.bundles)
        for c in self.criteria():
            vals = [b.generated_ol[c] for b in self.bundles if c in b.generated_ol]
            out[f"{c}_ol_mean"], out[f"{c}_ol_std"] = _mean_std(vals)
            vals = [b.generated_only_ol[c] for b in self.bundles if c in b.generated_only_ol]
            out[f"{c}_only_ol_mean"], out[f"{c}_only_ol_std"] = _mean_std(vals)
            vals = [b.generated_volume[c] for b in self.bundles if c in b.generated_volume]
            out[f"{c}_volume_mean"], out[f"{c}_volume_std"] = _mean_std(vals)
        return out

    def to_dict(self) -> dict:
        return {"summary": self.summary(), "bundles": [asdict(b) for b in self.bundles]}


def score_experiment(seed_sets: dict, generated_sets: dict, gt_masks: dict, percent: float = 100.0,
                     names: dict | None = None) -> ExperimentScore:
    """Score seed and generated sets per bundle, ordered by bundle id.

    ``generated_sets`` maps criterion -> bundle id -> accepted streamlines.
    Bundles without a ground-truth mask are skipped with a warning.
    """
    names = names or {}
    rows = []
    for b in sorted(seed_sets):
        if b not in gt_masks:
            log.warning("no ground-truth mask for bundle %s; skipped", b)
            continue
        gen = {c: per[b] for c, per in generated_sets.items() if b in per}
        rows.append(score_bundle(b, seed_sets[b], gen, gt_masks[b], names.get(b, "")))
    return ExperimentScore(percent, rows)


def table_rows(scores: list[ExperimentScore]) -> list[dict]:
    """One summary row per seed ratio, in input order."""
    return [s.summary() for s in scores]


def to_csv(rows: list[dict]) -> str:
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def to_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True)


def format_table(scores: list[ExperimentScore], criteria=None) -> str:
    """Plain-text table: seed OL and generated OL as ``mean (std)`` per ratio."""
    criteria = criteria or sorted({c for s in scores for c in s.criteria()})
    header = ["P%", "seed OL"] + [f"{c} OL" for c in criteria]
    lines = ["  ".join(f"{h:>14}" for h in header)]
    for s in scores:
        summ = s.summary()
        cells = [f"{s.percent:g}", f"{summ['seed_ol_mean']:.2f} ({summ['seed_ol_std']:.2f})"]
        for c in criteria:
            if f"{c}_ol_mean" in summ:
                cells.append(f"{summ[f'{c}_ol_mean']:.2f} ({summ[f'{c}_ol_std']:.2f})")
            else:
                cells.append("-")
        lines.append("  ".join(f"{x:>14}" for x in cells))
    return "\n".join(lines) + "\n"


def bar_chart_svg(score: ExperimentScore, criterion: str, width: int = 640, height: int = 320) -> str:
    """SVG grouped bars of seed vs generated OL per bundle."""
    pad, top, bottom = 40, 20, 40
    n = max(1, len(score.bundles))
    group = (width - 2 * pad) / n
    bar = group * 0.35
    plot_h = height - top - bottom
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<line x1="{pad}" y1="{top + plot_h}" x2="{width - pad}" y2="{top + plot_h}" stroke="black"/>',
        f'<line x1="{pad}" y1="{top}" x2="{pad}" y2="{top + plot_h}" stroke="black"/>',
    ]
    for tick in (0.0, 0.5, 1.0):
        y = top + plot_h * (1 - tick)
        parts.append(f'<text x="{pad - 6}" y="{y:.1f}" font-size="10" text-anchor="end">{tick:.1f}</text>')
    for i, b in enumerate(score.bundles):
        x0 = pad + i * group + group * 0.15
        for j, (val, color) in enumerate(
            [(b.seed_ol, "#8c8c8c"), (b.generated_ol.get(criterion, 0.0), "#6a3d9a")]
        ):
            h = plot_h * val
            parts.append(
                f'<rect x="{x0 + j * bar:.1f}" y="{top + plot_h - h:.1f}" width="{bar:.1f}" '
                f'height="{h:.1f}" fill="{color}"/>'
            )
        label = b.name or str(b.bundle)
        parts.append(
            f'<text x="{x0 + bar:.1f}" y="{top + plot_h + 14}" font-size="10" '
            f'text-anchor="middle">{label}</text>'
        )
    parts.append(
        f'<text x="{width / 2:.1f}" y="{height - 6}" font-size="11" text-anchor="middle">'
        f"OL at P={score.percent:g}%: seed (grey) vs {criterion} (purple)</text>"
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
