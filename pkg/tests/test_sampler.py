import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from gesta.errors import EnvelopeFailureError, InsufficientSeedsError, SamplerStalledError
from gesta.sampler import (
    GaussianProposal,
    SamplerConfig,
    estimate_k,
    fit_parzen,
    fit_proposal,
    generation_config,
    rejection_sample,
    sample_bundle,
    sample_latents,
    silverman_bandwidth,
)

SEEDS_2D = np.array([[0.0, 0.0], [1.5, 0.5], [-1.0, 2.0], [0.5, -1.5], [2.5, 2.0]])


def mixture_oracle(seeds, h, n, rng):
    """Direct sampling: pick a seed uniformly, add isotropic N(0, h^2)."""
    pick = rng.integers(0, len(seeds), n)
    return seeds[pick] + h * rng.standard_normal((n, seeds.shape[1]))


def test_parzen_matches_scipy_mixture():
    p = fit_parzen(SEEDS_2D, 0.7)
    z = np.random.default_rng(1).normal(size=(30, 2)) * 2
    ref = np.mean(
        [stats.multivariate_normal(mean=c, cov=0.49 * np.eye(2)).pdf(z) for c in SEEDS_2D], axis=0
    )
    np.testing.assert_allclose(p.pdf(z), ref, rtol=1e-10)


def test_parzen_integrates_to_one_in_1d():
    p = fit_parzen(np.array([[0.0], [3.0], [3.5]]), 0.4)
    x = np.linspace(-6, 10, 20001)[:, None]
    assert np.trapezoid(p.pdf(x), x[:, 0]) == pytest.approx(1.0, abs=1e-8)


def test_parzen_log_pdf_far_from_seeds_is_finite():
    p = fit_parzen(SEEDS_2D, 0.1)
    assert np.isfinite(p.log_pdf(np.array([[1e3, -1e3]]))).all()


def test_proposal_matches_scipy():
    q = fit_proposal(SEEDS_2D, 1.5, 1.0)
    var = 1.5 * (SEEDS_2D.var(axis=0, ddof=1) + 1.0)
    np.testing.assert_allclose(q.variance, var)
    z = np.random.default_rng(2).normal(size=(10, 2))
    ref = stats.multivariate_normal(mean=SEEDS_2D.mean(0), cov=np.diag(var)).logpdf(z)
    np.testing.assert_allclose(q.log_pdf(z), ref, rtol=1e-12)


def test_proposal_variance_floor():
    same = np.array([[1.0, 2.0], [1.0, 2.0]])
    q = fit_proposal(same, 1.5, 0.0)
    np.testing.assert_array_equal(q.variance, [1e-6, 1e-6])


def test_silverman_formula():
    z = np.random.default_rng(3).normal(size=(40, 4))
    sigma = z.std(axis=0, ddof=1).mean()
    assert silverman_bandwidth(z) == pytest.approx(sigma * (4 / 6) ** (1 / 8) * 40 ** (-1 / 8))
    p = fit_parzen(z, 2.0, "silverman")
    assert p.bandwidth == pytest.approx(2 * silverman_bandwidth(z))


def test_k_bounds_grid_maximum_of_ratio():
    cfg = SamplerConfig()
    p = fit_parzen(SEEDS_2D, 1.0)
    q = fit_proposal(SEEDS_2D, 1.5, 1.0)
    k = estimate_k(p, q, cfg)
    g = np.linspace(-8, 10, 401)
    grid = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
    grid_max = float(np.exp(p.log_pdf(grid) - q.log_pdf(grid)).max())
    assert grid_max <= k <= 1.2 * grid_max * 1.01


def test_rejection_matches_mixture_oracle():
    h = 0.8
    p = fit_parzen(SEEDS_2D, h)
    q = fit_proposal(SEEDS_2D, 1.5, h)
    k = estimate_k(p, q, SamplerConfig(bandwidth_factor=h))
    z, diag = rejection_sample(p, q, k, 8000, seed=5)
    ref = mixture_oracle(SEEDS_2D, h, 8000, np.random.default_rng(6))
    for d in range(2):
        assert stats.ks_2samp(z[:, d], ref[:, d]).statistic < 0.035
    assert diag["envelope_violations"] == 0
    assert diag["n_accepted"] == 8000


def test_prefix_stability_across_n():
    p = fit_parzen(SEEDS_2D, 1.0)
    q = fit_proposal(SEEDS_2D, 1.5, 1.0)
    a, _ = rejection_sample(p, q, 3.0, 50, seed=9)
    b, _ = rejection_sample(p, q, 3.0, 20, seed=9, block=7)
    np.testing.assert_array_equal(a[:20], b)


@given(st.integers(0, 2**31 - 1))
def test_sampling_is_deterministic(seed):
    cfg = SamplerConfig(n_samples=30, seed=seed, probe_draws=200)
    a, da = sample_latents(SEEDS_2D, cfg, bundle_key=3)
    b, db = sample_latents(SEEDS_2D, cfg, bundle_key=3)
    np.testing.assert_array_equal(a, b)
    assert da == db


def test_bundles_get_independent_streams():
    cfg = SamplerConfig(n_samples=10, probe_draws=200)
    a, _ = sample_latents(SEEDS_2D, cfg, bundle_key=1)
    b, _ = sample_latents(SEEDS_2D, cfg, bundle_key=2)
    assert not np.array_equal(a, b)


def test_underestimated_k_logs_violations():
    p = fit_parzen(SEEDS_2D, 1.0)
    q = fit_proposal(SEEDS_2D, 1.5, 1.0)
    _, diag = rejection_sample(p, q, 0.2, 500, seed=1)
    assert diag["envelope_violations"] > 0


def test_stall_raises_with_partial_results():
    p = fit_parzen(SEEDS_2D, 1.0)
    q = fit_proposal(SEEDS_2D, 1.5, 1.0)
    with pytest.raises(SamplerStalledError) as exc:
        rejection_sample(p, q, 1e6, 20, seed=1, max_attempts=3)
    assert exc.value.stats["n_requested"] == 20
    assert len(exc.value.accepted) == exc.value.stats["n_accepted"] < 20


def test_stalled_bundle_keeps_partial_candidates():
    from gesta.autoencoder import AEModel, StreamlineAE
    from gesta.geometry import Tractogram

    rng = np.random.default_rng(3)
    line = np.linspace([0.0, 0.0, 0.0], [50.0, 0.0, 0.0], 256)
    sls = [line + rng.normal(0, 1.0, 3) for _ in range(8)]
    seeds = Tractogram(sls, np.array([1] * 4 + [2] * 4))
    model = AEModel(StreamlineAE(), np.array([25.0, 0.0, 0.0]), np.full(3, 30.0))
    cfg = SamplerConfig(n_samples=40, max_attempts=2, probe_draws=200, bandwidth_factor=0.05)
    cands, diag = sample_bundle(model, seeds, cfg)
    assert [d["status"] for d in diag] == ["stalled", "stalled"]
    for d in diag:
        assert len(cands.bundle(d["bundle"])) == d["n_accepted"] < 40


def test_generation_config_overrides_defaults():
    cfg = generation_config(n_samples=5)
    assert (cfg.bandwidth_mode, cfg.bandwidth_factor, cfg.n_samples) == ("silverman", 7.0, 5)
    assert generation_config(bandwidth_mode="absolute").bandwidth_mode == "absolute"


def test_single_seed_rejected():
    with pytest.raises(InsufficientSeedsError):
        fit_parzen(np.zeros((1, 4)))
    with pytest.raises(InsufficientSeedsError):
        fit_proposal(np.zeros((1, 4)))


def test_envelope_failure_on_degenerate_proposal():
    p = fit_parzen(SEEDS_2D, 1.0)
    q = GaussianProposal(np.array([1e4, 1e4]), np.array([1e-6, 1e-6]))
    with pytest.raises(EnvelopeFailureError):
        estimate_k(p, q, SamplerConfig(probe_draws=10))


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(n_samples=0)
    with pytest.raises(ValueError):
        SamplerConfig(bandwidth_mode="scott")


def test_high_dimensional_k_scales_with_inflation():
    # equal-variance limit: p/q peaks near inflation^(d/2)
    z = np.random.default_rng(0).normal(scale=0.01, size=(50, 32))
    p = fit_parzen(z, 1.0)
    q = fit_proposal(z, 1.5, 1.0)
    k = estimate_k(p, q, SamplerConfig())
    assert 1.5 ** 16 * 1.2 * 0.9 < k < 1.5 ** 16 * 1.2 * 1.1
    assert math.isfinite(k)
