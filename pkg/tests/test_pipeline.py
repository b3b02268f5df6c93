import json

import numpy as np
import pytest

from gesta.autoencoder import TrainingConfig, train
from gesta.phantom import PhantomSpec, generate
from gesta.pipeline import (
    ExperimentConfig,
    derive_seed,
    read_dataset,
    run_experiment,
    sha256_file,
    write_dataset,
    write_manifest,
)
from gesta.sampler import SamplerConfig


@pytest.fixture(scope="module")
def tiny():
    ds = generate(PhantomSpec(streamlines_per_bundle=16, seed=2))
    model = train(ds.tractogram, TrainingConfig(epochs=1, batch_size=64))
    return ds, model


def test_derive_seed_is_stable_and_keyed():
    assert derive_seed(0, 1, 3000) == derive_seed(0, 1, 3000)
    assert len({derive_seed(0, 0), derive_seed(0, 1, 3000), derive_seed(0, 2, 3000), derive_seed(1, 0)}) == 4
    # frozen so that outputs stay comparable across releases
    assert derive_seed(0, 0) == int(np.random.SeedSequence(0, spawn_key=(0,)).generate_state(1)[0])


def test_dataset_round_trip(tiny, tmp_path):
    ds, _ = tiny
    write_dataset(ds, tmp_path)
    back = read_dataset(tmp_path)
    assert len(back.tractogram) == len(ds.tractogram)
    np.testing.assert_array_equal(back.wm.data, ds.wm.data)
    np.testing.assert_allclose(back.peaks.peaks, ds.peaks.peaks, atol=1e-6)
    assert sorted(back.gt_masks) == sorted(ds.gt_masks)
    assert back.spec.to_dict() == ds.spec.to_dict()


def test_manifest_lists_hashes(tmp_path):
    (tmp_path / "a.txt").write_text("x")
    (tmp_path / "in.txt").write_text("y")
    m = write_manifest(tmp_path / "manifest.json", {"src": tmp_path / "in.txt"}, [tmp_path / "a.txt"],
                       {"cfg": {"k": 1}}, {"master": 0}, {"stage": 0.5})
    assert m["outputs"] == {"a.txt": sha256_file(tmp_path / "a.txt")}
    assert m["inputs"]["src"]["sha256"] == sha256_file(tmp_path / "in.txt")
    assert json.loads((tmp_path / "manifest.json").read_text())["configs"]["cfg"]["value"] == {"k": 1}


def test_run_experiment_scores_every_ratio(tiny, tmp_path):
    ds, model = tiny
    cfg = ExperimentConfig(percents=(25, 100), criteria=("ADG_B", "ADGC_B"),
                           sampler=SamplerConfig(n_samples=3, probe_draws=300))
    res = run_experiment(ds, cfg, tmp_path, model)
    assert [s.percent for s in res.scores] == [25, 100]
    full = res.scores[1].summary()
    assert full["seed_ol_mean"] == 1.0
    for crit in cfg.criteria:
        assert full[f"{crit}_ol_mean"] == 1.0
    assert (tmp_path / "P25" / "accepted_ADGC_B.strb").exists()
    assert (tmp_path / "table.txt").read_text().count("\n") == 3


def test_failed_ratio_does_not_abort_others(tiny, monkeypatch):
    import gesta.pipeline as pl

    ds, model = tiny
    real = pl.subsample_seeds

    def flaky(t, percent, seed):
        if percent == 50:
            raise RuntimeError("boom")
        return real(t, percent, seed)

    monkeypatch.setattr(pl, "subsample_seeds", flaky)
    cfg = ExperimentConfig(percents=(50, 100), criteria=("ADG_B",), sampler=SamplerConfig(n_samples=2, probe_draws=100))
    res = run_experiment(ds, cfg, None, model)
    assert "boom" in res.diagnostics["P50"]["error"]
    assert [s.percent for s in res.scores] == [100]
