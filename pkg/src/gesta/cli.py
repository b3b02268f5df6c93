"""Command-line entry point: ``gesta <subcommand>``."""

from __future__ import annotations

import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import click

from .errors import GestaError, SpecError
from .sampler import GENERATION_DEFAULTS

log = logging.getLogger("gesta")


def _set_threads(n: int):
    import torch

    torch.set_num_threads(n)
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(n)
    except ImportError:  # pragma: no cover
        pass


def _load_json(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _fail(ctx, exc: Exception):
    if (ctx.find_root().obj or {}).get("json_errors"):
        payload = {"error": type(exc).__name__, "message": str(exc)}
        if isinstance(exc, SpecError):
            payload["problems"] = exc.problems
        click.echo(json.dumps(payload), err=True)
    else:
        click.echo(f"error: {exc}", err=True)
    ctx.exit(1)


class _Command(click.Command):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except (GestaError, ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
            _fail(ctx, exc)


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.ClickException as exc:
            if not (ctx.obj or {}).get("json_errors"):
                raise
            payload = {"error": type(exc).__name__, "message": exc.format_message()}
            click.echo(json.dumps(payload), err=True)
            ctx.exit(exc.exit_code)


@click.group(cls=_Group)
@click.option("--threads", type=click.IntRange(min=1), default=1, envvar="GESTA_THREADS",
              show_default=True, show_envvar=True, help="Worker threads; 1 is bit-reproducible.")
@click.option("--json-errors", is_flag=True, help="Print errors as JSON on stderr.")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, threads, json_errors, verbose):
    """Generate streamlines by sampling an autoencoder latent space."""
    logging.basicConfig(
        level=logging.WARNING - 10 * min(verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    ctx.obj = {"threads": threads, "json_errors": json_errors}
    _set_threads(threads)


@main.command(cls=_Command)
@click.option("--spec", "spec_path", type=click.Path(dir_okay=False), help="Phantom spec JSON.")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None, help="Override the phantom spec's rng seed.")
def phantom(spec_path, out_dir, seed):
    """Write a synthetic phantom dataset."""
    from .phantom import PhantomSpec, generate
    from .pipeline import write_dataset, write_manifest

    spec = PhantomSpec.from_dict(_load_json(spec_path))
    if seed is not None:
        spec.seed = seed
    spec.validate()
    t0 = time.perf_counter()
    ds = generate(spec)
    outputs = write_dataset(ds, out_dir)
    inputs = {"spec": spec_path} if spec_path else {}
    write_manifest(Path(out_dir) / "manifest.json", inputs, outputs,
                   {"phantom": spec.to_dict()}, {"phantom": spec.seed},
                   {"phantom": time.perf_counter() - t0})
    click.echo(f"{len(ds.tractogram)} streamlines in {len(ds.gt_masks)} bundles -> {out_dir}")


@main.command(cls=_Command)
@click.option("--tractogram", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--out-model", required=True, type=click.Path(dir_okay=False))
@click.option("--resume-from", type=click.Path(exists=True, dir_okay=False),
              help="Start from an existing model's weights instead of a fresh network.")
def train(tractogram, config_path, out_model, resume_from):
    """Train the streamline autoencoder."""
    from .autoencoder import TrainingConfig, load_model, save_model
    from .autoencoder import train as train_model
    from .formats import read_tractogram

    cfg = TrainingConfig(**_load_json(config_path))
    t = read_tractogram(tractogram)
    net = load_model(resume_from).net if resume_from else None
    model = train_model(t, cfg, net)
    save_model(model, out_model)
    best = min(h["val_mse"] for h in model.history)
    click.echo(f"trained {len(model.history)} epochs, best validation MSE {best:.3e} -> {out_model}")


@main.command(cls=_Command)
@click.option("--model", "model_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--seeds", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--per-bundle", type=int, default=2000, show_default=True)
@click.option("--bandwidth", type=float, default=GENERATION_DEFAULTS["bandwidth_factor"], show_default=True)
@click.option("--bandwidth-mode", type=click.Choice(["absolute", "silverman"]),
              default=GENERATION_DEFAULTS["bandwidth_mode"], show_default=True)
@click.option("--rng-seed", type=int, default=0, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Sampler config JSON; explicit flags override it.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--report", type=click.Path(dir_okay=False), help="Sampler diagnostics JSON.")
@click.pass_context
def sample(ctx, model_path, seeds, per_bundle, bandwidth, bandwidth_mode, rng_seed, config_path, out, report):
    """Sample candidate streamlines around each seed bundle."""
    from .autoencoder import load_model
    from .formats import read_tractogram, write_tractogram
    from .sampler import SamplerConfig, sample_bundle

    raw = _load_json(config_path)
    src = ctx.get_parameter_source
    flags = {
        "n_samples": ("per_bundle", per_bundle),
        "bandwidth_factor": ("bandwidth", bandwidth),
        "bandwidth_mode": ("bandwidth_mode", bandwidth_mode),
        "seed": ("rng_seed", rng_seed),
    }
    for field_name, (param, value) in flags.items():
        if field_name not in raw or src(param) != click.core.ParameterSource.DEFAULT:
            raw[field_name] = value
    cfg = SamplerConfig(**raw)
    candidates, diag = sample_bundle(load_model(model_path), read_tractogram(seeds), cfg)
    write_tractogram(out, candidates)
    if report:
        Path(report).write_text(json.dumps(diag, indent=1, sort_keys=True) + "\n")
    for d in diag:
        if d["status"] != "ok":
            click.echo(f"warning: bundle {d['bundle']} {d['status']}: {d.get('error', '')}", err=True)
    click.echo(f"{len(candidates)} candidates -> {out}")


@main.command(cls=_Command)
@click.option("--candidates", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--wm", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--gm", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--brain", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--peaks", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--criteria", "criteria_path", type=click.Path(exists=True, dir_okay=False),
              help="Threshold JSON; defaults to the --preset values.")
@click.option("--preset", type=click.Choice(["fibercup", "ismrm2015", "hcp", "bilgin"]),
              default="fibercup", show_default=True)
@click.option("--criterion", type=click.Choice(["ADG_B", "ADG_R", "ADGC_B", "ADGC_R"]),
              default="ADG_B", show_default=True)
@click.option("--fast", is_flag=True, help="Stop checking a streamline at its first failure.")
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@click.option("--report", type=click.Path(dir_okay=False))
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False))
def evaluate(candidates, wm, gm, brain, peaks, criteria_path, preset, criterion, fast, out, report, csv_path):
    """Keep the plausible candidates."""
    from dataclasses import replace

    from .formats import read_tractogram, read_volume, write_tractogram
    from .plausibility import PRESETS, CriteriaConfig, prepare_masks
    from .plausibility import evaluate as run_eval

    cfg = PRESETS[preset]
    if criteria_path:
        cfg = replace(cfg, **CriteriaConfig.from_dict({**asdict(cfg), **_load_json(criteria_path)}).to_dict())
    masks = prepare_masks(read_volume(wm), read_volume(gm), read_volume(brain), cfg)
    accepted, rep = run_eval(read_tractogram(candidates), masks, read_volume(peaks), cfg, criterion, fast)
    write_tractogram(out, accepted)
    if report:
        Path(report).write_text(rep.to_json() + "\n")
    if csv_path:
        Path(csv_path).write_text(rep.to_csv())
    click.echo(f"{rep.accepted}/{rep.total} accepted under {criterion} -> {out}")


@main.command(cls=_Command)
@click.option("--tractograms", "tractograms", multiple=True, required=True, metavar="[NAME=]PATH",
              help="Repeatable. The first is the seed set; each further one is a generated set "
                   "named by NAME or its file stem.")
@click.option("--gt-masks", multiple=True, required=True, type=click.Path(exists=True),
              help="gt_<bundle>.json files or directories holding them.")
@click.option("--percent", type=float, default=100.0, show_default=True)
@click.option("--generated-only", is_flag=True, help="Table uses generated streamlines without seeds.")
@click.option("--out", required=True, type=click.Path(dir_okay=False),
              help="Output prefix; writes .csv, .json and one .svg per generated set.")
def score(tractograms, gt_masks, percent, generated_only, out):
    """Bundle overlap and volume of seed vs generated streamlines."""
    from .formats import read_tractogram
    from .metrics import bar_chart_svg, score_experiment, to_csv, to_json
    from .pipeline import load_gt_masks

    def split(item):
        name, sep, path = item.partition("=")
        return (name, path) if sep else (Path(item).stem, item)

    seeds = read_tractogram(split(tractograms[0])[1])
    masks = load_gt_masks(gt_masks)
    gen = {}
    for item in tractograms[1:]:
        name, path = split(item)
        t = read_tractogram(path)
        gen[name] = {b: t.bundle(b) for b in t.bundle_ids()}
    # bundles absent from the seed set still get a row
    seed_sets = {b: seeds.bundle(b) for b in sorted(masks)}
    result = score_experiment(seed_sets, gen, masks, percent, seeds.label_names)
    summary = result.summary()
    rows = []
    for b in result.bundles:
        row = {"bundle": b.bundle, "name": b.name, "seed_ol": b.seed_ol, "seed_volume": b.seed_volume}
        for c in sorted(b.generated_ol):
            row[f"{c}_ol"] = b.generated_only_ol[c] if generated_only else b.generated_ol[c]
            row[f"{c}_volume"] = b.generated_volume[c]
        rows.append(row)
    key = "{}_only_ol_{}" if generated_only else "{}_ol_{}"
    for stat in ("mean", "std"):
        row = {"bundle": stat, "seed_ol": summary[f"seed_ol_{stat}"],
               "seed_volume": summary[f"seed_volume_{stat}"]}
        for c in result.criteria():
            row[f"{c}_ol"] = summary[key.format(c, stat)]
            row[f"{c}_volume"] = summary[f"{c}_volume_{stat}"]
        rows.append(row)
    prefix = Path(out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    prefix.with_suffix(".csv").write_text(to_csv(rows))
    prefix.with_suffix(".json").write_text(to_json({"rows": rows, **result.to_dict()}) + "\n")
    for c in result.criteria():
        Path(f"{prefix}_{c}.svg").write_text(bar_chart_svg(result, c))
    click.echo(f"seed OL {summary['seed_ol_mean']:.3f} over {len(result.bundles)} bundle(s) -> {prefix}.csv")


def _parse_percents(value: str) -> tuple:
    out = []
    for part in value.split(","):
        p = float(part)
        out.append(int(p) if p.is_integer() else p)
    return tuple(out)


@main.command(cls=_Command)
@click.option("--spec", "spec_path", type=click.Path(exists=True, dir_okay=False),
              help="Phantom spec JSON (generated on the fly).")
@click.option("--dataset", type=click.Path(exists=True, file_okay=False),
              help="Directory written by the phantom subcommand.")
@click.option("--P", "percents", default="3,5,10,100", show_default=True)
@click.option("--criterion", "criteria", default="ADG_B,ADGC_B", show_default=True,
              help="Comma-separated criteria.")
@click.option("--model", "model_path", type=click.Path(exists=True, dir_okay=False),
              help="Use this model instead of training one.")
@click.option("--train-config", type=click.Path(exists=True, dir_okay=False))
@click.option("--sampler-config", type=click.Path(exists=True, dir_okay=False))
@click.option("--criteria-config", type=click.Path(exists=True, dir_okay=False))
@click.option("--per-bundle", type=int, default=None, help="Override sampler n_samples.")
@click.option("--bandwidth", type=float, default=None, help="Override sampler bandwidth factor.")
@click.option("--bandwidth-mode", type=click.Choice(["absolute", "silverman"]), default=None,
              help="Override sampler bandwidth mode.")
@click.option("--rng-seed", type=int, default=0, show_default=True)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
def pipeline(spec_path, dataset, percents, criteria, model_path, train_config, sampler_config,
             criteria_config, per_bundle, bandwidth, bandwidth_mode, rng_seed, out_dir):
    """Run subsample -> sample -> evaluate -> score for every seed ratio."""
    from dataclasses import replace

    from .autoencoder import TrainingConfig, load_model
    from .metrics import format_table
    from .phantom import PhantomSpec, generate
    from .pipeline import ExperimentConfig, read_dataset, run_experiment, write_dataset, write_manifest
    from .plausibility import CRITERIA, PRESETS, CriteriaConfig
    from .sampler import generation_config

    if bool(spec_path) == bool(dataset):
        raise ValueError("give exactly one of --spec or --dataset")
    crits = tuple(c.strip() for c in criteria.split(",") if c.strip())
    bad = [c for c in crits if c not in CRITERIA]
    if bad:
        raise ValueError(f"unknown criteria {bad}; choose from {CRITERIA}")
    scfg = generation_config(**_load_json(sampler_config))
    if per_bundle is not None:
        scfg = replace(scfg, n_samples=per_bundle)
    if bandwidth is not None:
        scfg = replace(scfg, bandwidth_factor=bandwidth)
    if bandwidth_mode is not None:
        scfg = replace(scfg, bandwidth_mode=bandwidth_mode)
    pcfg = PRESETS["fibercup"]
    if criteria_config:
        pcfg = CriteriaConfig.from_dict({**asdict(pcfg), **_load_json(criteria_config)})
    cfg = ExperimentConfig(
        percents=_parse_percents(percents),
        criteria=crits,
        master_seed=rng_seed,
        training=TrainingConfig(**_load_json(train_config)),
        sampler=scfg,
        plausibility=pcfg,
    )
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    timings = {}
    t0 = time.perf_counter()
    inputs = {}
    if spec_path:
        spec = PhantomSpec.from_dict(_load_json(spec_path))
        ds = generate(spec)
        outputs = write_dataset(ds, out / "dataset")
        inputs["spec"] = spec_path
    else:
        ds = read_dataset(dataset)
        outputs = []
        inputs["tractogram"] = Path(dataset) / "tractogram.strb"
    timings["dataset"] = time.perf_counter() - t0
    model = None
    if model_path:
        model = load_model(model_path)
        inputs["model"] = model_path
    result = run_experiment(ds, cfg, out, model)
    timings.update(result.timings)
    outputs += result.outputs
    for key, cfg_path in (("train_config", train_config), ("sampler_config", sampler_config),
                          ("criteria_config", criteria_config)):
        if cfg_path:
            inputs[key] = cfg_path
    configs = {
        "training": asdict(cfg.training),
        "sampler": asdict(cfg.sampler),
        "plausibility": asdict(cfg.plausibility),
        "percents": list(cfg.percents),
        "criteria": list(cfg.criteria),
    }
    write_manifest(out / "manifest.json", inputs, outputs, configs, {"master": rng_seed}, timings)
    click.echo(format_table(result.scores, list(crits)), nl=False)
    failed = [k for k, v in result.diagnostics.items() if "error" in v]
    if failed:
        click.echo(f"warning: failed cells: {failed}", err=True)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
