"""Seed-subsampling experiment: subsample, sample, evaluate and score per ratio.

All randomness flows from one master seed. Stage seeds are
``SeedSequence(master, spawn_key=key).generate_state(1)[0]`` with keys
``(0,)`` for autoencoder training, ``(1, P)`` for seed subsampling at ratio
``P`` percent (scaled by 1000 and rounded) and ``(2, P)`` for latent sampling.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .autoencoder import AEModel, TrainingConfig, save_model, train
from .formats import read_tractogram, read_volume, write_tractogram, write_volume
from .geometry import Tractogram
from .metrics import bar_chart_svg, format_table, score_experiment, table_rows, to_csv, to_json
from .phantom import PhantomDataset, PhantomSpec, subsample_seeds
from .plausibility import PRESETS, CriteriaConfig, evaluate, prepare_masks
from .sampler import SamplerConfig, generation_config, sample_bundle

log = logging.getLogger(__name__)


def derive_seed(master: int, *key: int) -> int:
    return int(np.random.SeedSequence(master, spawn_key=key).generate_state(1)[0])


def _ratio_key(percent: float) -> int:
    return int(round(percent * 1000))


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def sha256_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def write_dataset(ds: PhantomDataset, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "tractogram.strb"]
    write_tractogram(paths[0], ds.tractogram)
    for name in ("wm", "gm", "brain", "peaks"):
        p = out / f"{name}.json"
        write_volume(p, getattr(ds, name))
        paths += [p, p.with_suffix(".raw")]
    for b, m in sorted(ds.gt_masks.items()):
        p = out / f"gt_{b}.json"
        write_volume(p, m)
        paths += [p, p.with_suffix(".raw")]
    p = out / "phantom_spec.json"
    p.write_text(json.dumps(ds.spec.to_dict(), indent=2, sort_keys=True) + "\n")
    paths.append(p)
    return paths


def load_gt_masks(paths) -> dict:
    """Ground-truth masks from ``gt_<bundle>.json`` files or directories holding them."""
    files = []
    for p in map(Path, paths):
        files += sorted(p.glob("gt_*.json")) if p.is_dir() else [p]
    masks = {}
    for f in files:
        stem = f.stem
        if not stem.startswith("gt_"):
            raise ValueError(f"ground-truth mask file must be named gt_<bundle>.json: {f}")
        masks[int(stem[3:])] = read_volume(f)
    return masks


def read_dataset(data_dir) -> PhantomDataset:
    d = Path(data_dir)
    spec_path = d / "phantom_spec.json"
    spec = PhantomSpec.from_dict(json.loads(spec_path.read_text())) if spec_path.exists() else None
    return PhantomDataset(
        read_tractogram(d / "tractogram.strb"),
        read_volume(d / "wm.json"),
        read_volume(d / "gm.json"),
        read_volume(d / "brain.json"),
        load_gt_masks([d]),
        read_volume(d / "peaks.json"),
        spec,
    )


@dataclass
class ExperimentConfig:
    percents: tuple = (3, 5, 10, 100)
    criteria: tuple = ("ADG_B", "ADGC_B")
    master_seed: int = 0
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sampler: SamplerConfig = field(default_factory=generation_config)
    plausibility: CriteriaConfig = field(default_factory=lambda: PRESETS["fibercup"])


@dataclass
class ExperimentResult:
    scores: list
    diagnostics: dict
    outputs: list
    timings: dict
    model: AEModel | None = None


def run_experiment(ds: PhantomDataset, cfg: ExperimentConfig, out_dir=None, model: AEModel | None = None):
    """Run every seed ratio in ``cfg.percents``; write outputs when ``out_dir`` is given.

    A failure for one ratio is recorded in the diagnostics and the other
    ratios still run.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    outputs, timings, diagnostics = [], {}, {}

    t0 = time.perf_counter()
    if model is None:
        tcfg = replace(cfg.training, seed=derive_seed(cfg.master_seed, 0) % (2**31))
        model = train(ds.tractogram, tcfg)
        if out is not None:
            save_model(model, out / "model.gaem")
            outputs.append(out / "model.gaem")
    timings["train"] = time.perf_counter() - t0

    masks = prepare_masks(ds.wm, ds.gm, ds.brain, cfg.plausibility)
    names = dict(ds.tractogram.label_names)
    scores = []
    for percent in cfg.percents:
        key = _ratio_key(percent)
        cell = {}
        diagnostics[f"P{percent:g}"] = cell
        t0 = time.perf_counter()
        try:
            seeds = subsample_seeds(ds.tractogram, percent, derive_seed(cfg.master_seed, 1, key))
            scfg = replace(cfg.sampler, seed=derive_seed(cfg.master_seed, 2, key))
            candidates, sdiag = sample_bundle(model, seeds, scfg)
            cell["sampler"] = sdiag
            generated, reports = {}, {}
            for crit in cfg.criteria:
                accepted, report = evaluate(candidates, masks, ds.peaks, cfg.plausibility, crit)
                reports[crit] = report
                generated[crit] = {b: accepted.bundle(b) for b in seeds.bundle_ids()}
                cell[f"evaluation_{crit}"] = report.summary()
            seed_sets = {b: seeds.bundle(b) for b in seeds.bundle_ids()}
            score = score_experiment(seed_sets, generated, ds.gt_masks, percent, names)
            scores.append(score)
            if out is not None:
                cdir = out / f"P{percent:g}"
                cdir.mkdir(exist_ok=True)
                files = {
                    "seeds.strb": seeds,
                    "candidates.strb": candidates,
                }
                for name, t in files.items():
                    write_tractogram(cdir / name, t)
                    outputs.append(cdir / name)
                for crit, report in reports.items():
                    accepted = Tractogram.concatenate(
                        [generated[crit][b] for b in sorted(generated[crit])]
                    )
                    write_tractogram(cdir / f"accepted_{crit}.strb", accepted)
                    (cdir / f"report_{crit}.json").write_text(report.to_json() + "\n")
                    outputs += [cdir / f"accepted_{crit}.strb", cdir / f"report_{crit}.json"]
                (cdir / "sampler.json").write_text(to_json(sdiag) + "\n")
                (cdir / "scores.json").write_text(to_json(score.to_dict()) + "\n")
                outputs += [cdir / "sampler.json", cdir / "scores.json"]
                for crit in cfg.criteria:
                    (cdir / f"ol_{crit}.svg").write_text(bar_chart_svg(score, crit))
                    outputs.append(cdir / f"ol_{crit}.svg")
        except Exception as exc:  # noqa: BLE001 - one ratio must not abort the others
            log.exception("seed ratio %g%% failed", percent)
            cell["error"] = f"{type(exc).__name__}: {exc}"
        timings[f"P{percent:g}"] = time.perf_counter() - t0

    if out is not None:
        rows = table_rows(scores)
        (out / "table.csv").write_text(to_csv(rows))
        (out / "table.json").write_text(to_json(rows) + "\n")
        (out / "table.txt").write_text(format_table(scores, list(cfg.criteria)))
        (out / "diagnostics.json").write_text(to_json(diagnostics) + "\n")
        outputs += [out / n for n in ("table.csv", "table.json", "table.txt", "diagnostics.json")]
    return ExperimentResult(scores, diagnostics, outputs, timings, model)


def write_manifest(path, inputs: dict, outputs, configs: dict, seeds: dict, timings: dict):
    """Record inputs, config hashes, seeds, timings and content hashes of outputs."""
    path = Path(path)
    base = path.parent
    manifest = {
        "version": __version__,
        "inputs": {k: {"path": str(v), "sha256": sha256_file(v)} for k, v in sorted(inputs.items())},
        "configs": {k: {"value": v, "sha256": sha256_json(v)} for k, v in sorted(configs.items())},
        "seeds": seeds,
        "timings_s": {k: round(v, 3) for k, v in timings.items()},
        "outputs": {
            str(Path(p).resolve().relative_to(base.resolve())): sha256_file(p)
            for p in sorted(set(map(Path, outputs)))
        },
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest

