import numpy as np
import pytest

from gesta.errors import SpecError
from gesta.geometry import N_VERTICES, Tractogram, length
from gesta.phantom import BundleSpec, PhantomSpec, centerline, generate, subsample_seeds
from gesta.plausibility import PRESETS, check_direction, check_geometry


@pytest.fixture(scope="module")
def small():
    return generate(PhantomSpec(streamlines_per_bundle=40, seed=7))


def test_default_spec_has_seven_bundles(small):
    assert sorted(small.tractogram.label_names) == list(range(1, 8))
    assert len(small.tractogram) == 7 * 40
    assert all(len(s) == N_VERTICES for s in small.tractogram.streamlines)


def test_masks_share_grid_and_nest(small):
    for m in (small.gm, small.brain, small.peaks, *small.gt_masks.values()):
        assert m.same_geometry(small.wm)
    wm, brain = small.wm.data, small.brain.data
    assert not (wm & ~brain).any()
    union = np.zeros_like(wm)
    for g in small.gt_masks.values():
        union |= g.data
    np.testing.assert_array_equal(union, wm)


def test_ground_truth_streamlines_are_plausible(small):
    cfg = PRESETS["fibercup"]
    for s in small.tractogram.streamlines[::5]:
        geo = check_geometry(s, cfg)
        assert geo["length"].passed and geo["winding"].passed
        assert check_direction(s, small.peaks, cfg).passed


def test_generation_is_deterministic():
    a = generate(PhantomSpec(streamlines_per_bundle=5, seed=3))
    b = generate(PhantomSpec(streamlines_per_bundle=5, seed=3))
    for x, y in zip(a.tractogram.streamlines, b.tractogram.streamlines):
        np.testing.assert_array_equal(x, y)
    np.testing.assert_array_equal(a.peaks.peaks, b.peaks.peaks)


def test_spec_errors_listed_together():
    spec = PhantomSpec(dims=(0, 64, 3), voxel_size=-1, streamlines_per_bundle=1)
    with pytest.raises(SpecError) as exc:
        spec.validate()
    assert len(exc.value.problems) == 3


def test_out_of_bounds_bundle_named():
    spec = PhantomSpec(streamlines_per_bundle=3)
    spec.bundles[0] = BundleSpec("far", "line", points=[[25, 25], [400, 25]])
    with pytest.raises(SpecError, match="far"):
        generate(spec)


def test_spec_dict_round_trip():
    spec = PhantomSpec(seed=9)
    assert PhantomSpec.from_dict(spec.to_dict()).to_dict() == spec.to_dict()


def test_centerlines_have_expected_lengths():
    arc = BundleSpec("a", "arc", center=[0, 0], radius=40, angles=[25, 155])
    c = centerline(arc, 4096)
    assert length(np.c_[c, np.zeros(len(c))]) == pytest.approx(40 * np.radians(130), rel=1e-3)


def test_subsample_counts_and_minimum(small):
    t = small.tractogram
    sub = subsample_seeds(t, 3, seed=1)
    # ceil(0.03 * 40) = 2 per bundle
    assert len(sub) == 14
    assert len(subsample_seeds(t, 10, seed=1)) == 7 * 4
    assert len(subsample_seeds(t, 100, seed=1)) == len(t)
    with pytest.raises(ValueError):
        subsample_seeds(t, 0)


def test_subsample_is_seeded(small):
    t = small.tractogram
    a = subsample_seeds(t, 10, seed=4)
    b = subsample_seeds(t, 10, seed=4)
    c = subsample_seeds(t, 10, seed=5)
    assert [s.tobytes() for s in a.streamlines] == [s.tobytes() for s in b.streamlines]
    assert [s.tobytes() for s in a.streamlines] != [s.tobytes() for s in c.streamlines]


def test_subsample_drops_tiny_bundles():
    t = Tractogram([np.eye(3)] * 5, np.array([1, 1, 1, 1, 2]))
    assert subsample_seeds(t, 50, min_per_bundle=2).bundle_ids() == [1]
