import math
import threading

import numpy as np
import pytest

from saliex import explainer as ex
from saliex.errors import ConfigError, ContractError, ExplanationError


def cfg(**kw):
    base = dict(patch_size=4, window_margin=2, patch_stride=2, num_samples=3, seed=7)
    base.update(kw)
    return ex.ExplainConfig(**base)


class CountingPredictor:
    def __init__(self, fn):
        self.fn = fn
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, image):
        with self._lock:
            self.calls += 1
        return self.fn(image)


def test_splitmix64_reference_values():
    # reference outputs of SplitMix64 seeded with 0 (Vigna's splitmix64.c)
    rng = ex.SplitMix64(0)
    assert [rng.next() for _ in range(3)] == [
        0xE220A8397B1DCDAF,
        0x6E789E6AA1B965F4,
        0x06C45D188009454F,
    ]


def test_below_range():
    rng = ex.SplitMix64(42)
    draws = [rng.below(5) for _ in range(500)]
    assert set(draws) == {0, 1, 2, 3, 4}


class TestPatches:
    def test_grid_8x8(self):
        grid = ex.enumerate_patches(8, 8, cfg(patch_size=4, patch_stride=2))
        assert len(grid) == 9
        assert sorted({r[0] for r in grid.rects}) == [0, 2, 4]

    def test_clamped_last_row(self):
        grid = ex.enumerate_patches(9, 8, cfg(patch_size=4, patch_stride=2))
        assert sorted({r[0] for r in grid.rects}) == [0, 2, 4, 5]
        assert grid.coverage().min() >= 1

    def test_single_patch(self):
        assert len(ex.enumerate_patches(6, 6, cfg(patch_size=6))) == 1

    def test_unit_patches(self):
        grid = ex.enumerate_patches(5, 7, cfg(patch_size=1, patch_stride=1))
        assert len(grid) == 35
        assert np.all(grid.coverage() == 1)

    def test_patch_too_big(self):
        with pytest.raises(ConfigError):
            ex.enumerate_patches(4, 8, cfg(patch_size=5))


class TestSampling:
    def test_interior_candidate_count(self):
        assert len(ex.candidate_offsets((20, 20, 16, 16), 64, 64, 4)) == 80

    def test_corner_candidates_in_bounds(self):
        cands = ex.candidate_offsets((0, 0, 4, 4), 8, 8, 2)
        assert len(cands) == 3 * 3 - 1
        assert all(dy >= 0 and dx >= 0 for dy, dx in cands)

    def test_locality_and_source(self):
        rng = np.random.default_rng(0)
        image = rng.normal(size=(3, 12, 12))
        rect = (4, 5, 4, 4)
        samples = ex.sample_conditional(image, rect, cfg(num_samples=5), ex.SplitMix64(3))
        assert len(samples) == 5
        inside = np.zeros((12, 12), bool)
        inside[4:8, 5:9] = True
        for s in samples:
            np.testing.assert_array_equal(s[:, ~inside], image[:, ~inside])
            patch = s[:, 4:8, 5:9]
            hits = [
                (dy, dx)
                for dy, dx in ex.candidate_offsets(rect, 12, 12, 2)
                if np.array_equal(patch, image[:, 4 + dy : 8 + dy, 5 + dx : 9 + dx])
            ]
            assert hits

    def test_deterministic(self):
        image = np.random.default_rng(1).normal(size=(10, 10))
        a = ex.sample_conditional(image, (2, 2, 4, 4), cfg(), ex.patch_rng(5, 3))
        b = ex.sample_conditional(image, (2, 2, 4, 4), cfg(), ex.patch_rng(5, 3))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_no_neighbourhood(self):
        with pytest.raises(ExplanationError):
            ex.sample_conditional(np.zeros((4, 4)), (0, 0, 4, 4), cfg(), ex.SplitMix64(0))


class TestGenerator:
    def test_constant(self):
        images = [np.zeros((3, 5, 5))] * 3
        np.testing.assert_array_equal(ex.gen_prediction(ex.constant_predictor(0.5), images), 0.5)

    def test_single_sample(self):
        img = np.random.default_rng(2).normal(size=(3, 8, 8))
        np.testing.assert_array_equal(ex.gen_prediction(ex.contrast_predictor, [img]), ex.contrast_predictor(img))

    def test_mean_of_two(self):
        values = iter([0.2, 0.6])
        pred = lambda im: np.full((2, 2), next(values))  # noqa: E731
        out = ex.gen_prediction(pred, [np.zeros((2, 2)), np.zeros((2, 2))])
        np.testing.assert_allclose(out, 0.4, rtol=1e-15)

    def test_out_of_range_predictor(self):
        with pytest.raises(ContractError):
            ex.gen_prediction(lambda im: np.ones((2, 2)), [np.zeros((2, 2))])


class TestFse:
    def test_zero_when_equal(self):
        m = np.random.default_rng(3).random((4, 4)) * 0.9 + 0.05
        assert np.all(ex.fse_patch(m, m) == 0)

    def test_values(self):
        assert math.isclose(ex.fse_patch([[0.8]], [[0.5]])[0, 0], math.log(4), rel_tol=1e-12)
        assert math.isclose(ex.fse_patch([[0.5]], [[0.8]])[0, 0], -1.386294, rel_tol=1e-6)

    def test_antisymmetry(self):
        rng = np.random.default_rng(4)
        a, b = rng.random((6, 6)), rng.random((6, 6))
        np.testing.assert_array_equal(ex.fse_patch(a, b), -ex.fse_patch(b, a))

    def test_clamped(self):
        assert np.isfinite(ex.fse_patch([[1.0]], [[0.0]])).all()


class TestAggregate:
    def test_zero(self):
        grid = ex.enumerate_patches(8, 8, cfg())
        m = ex.aggregate([np.zeros((8, 8))] * len(grid), grid, 8, 8)
        assert np.all(m.values == 0) and m.coverage.min() >= 1

    def test_single_patch_uniform(self):
        grid = ex.enumerate_patches(6, 6, cfg(patch_size=6))
        m = ex.aggregate([np.full((6, 6), 1.25)], grid, 6, 6)
        assert np.all(m.values == 1.25)

    def test_two_overlapping(self):
        grid = ex.PatchGrid(4, 4, 4, ((0, 0, 4, 4), (0, 0, 4, 4)))
        m = ex.aggregate([np.full((4, 4), 1.0), np.full((4, 4), 2.0)], grid, 4, 4)
        assert np.all(m.values == 1.5) and np.all(m.coverage == 2)


class TestExplain:
    def test_constant_predictor_null(self):
        img = np.random.default_rng(5).normal(size=(3, 16, 16))
        m = ex.explain(ex.constant_predictor(0.3), img, cfg())
        assert np.all(m.values == 0)
        assert ex.fse_stats(m) == ex.FseStats(0.0, 0.0, 0.0, 0, 0)

    def test_call_budget(self):
        img = np.random.default_rng(6).normal(size=(3, 16, 12))
        pred = CountingPredictor(ex.contrast_predictor)
        c = cfg(num_samples=4)
        ex.explain(pred, img, c)
        assert pred.calls == 1 + len(ex.enumerate_patches(16, 12, c)) * 4

    def test_worker_invariance(self):
        img = np.random.default_rng(7).normal(size=(3, 20, 20))
        a = ex.explain(ex.contrast_predictor, img, cfg(parallel_workers=1))
        b = ex.explain(ex.contrast_predictor, img, cfg(parallel_workers=8))
        np.testing.assert_array_equal(a.values, b.values)

    def test_seed_changes_result(self):
        img = np.random.default_rng(8).normal(size=(3, 20, 20))
        a = ex.explain(ex.contrast_predictor, img, cfg(seed=1))
        b = ex.explain(ex.contrast_predictor, img, cfg(seed=2))
        assert not np.array_equal(a.values, b.values)

    def test_salient_reduce(self):
        img = np.random.default_rng(9).normal(size=(3, 16, 16))
        m = ex.explain(ex.contrast_predictor, img, cfg(reduce="salient"))
        assert np.isfinite(m.values).all()

    def test_csv_round_trip(self):
        img = np.random.default_rng(10).normal(size=(3, 8, 8))
        m = ex.explain(ex.contrast_predictor, img, cfg())
        back = np.array([[float(v) for v in ln.split(",")] for ln in m.to_csv().splitlines()])
        np.testing.assert_array_equal(back, m.values)


class TestStats:
    def test_symmetric(self):
        s = ex.fse_stats(np.array([1.0, -1.0, 1.0, -1.0]))
        assert (s.mean, s.std_pos, s.std_neg, s.n_pos, s.n_neg) == (0.0, 0.0, 0.0, 2, 2)

    def test_positive_only(self):
        s = ex.fse_stats(np.array([1.0, 3.0]))
        assert (s.mean, s.std_pos, s.std_neg) == (2.0, 1.0, 0.0)


def test_presets():
    assert ex.PRESETS["paper"].window == 24 and ex.PRESETS["paper"].num_samples == 5
    assert ex.PRESETS["desk"].window == 8


def test_invalid_config():
    with pytest.raises(ConfigError):
        ex.ExplainConfig(patch_size=0)
    with pytest.raises(ConfigError):
        ex.ExplainConfig.from_dict({"patchsize": 3})


class TestContrastPredictorReduce:
    """The contrast predictor's logit is affine in the pixels, so the global-mean
    reduce cancels for any single imputation away from the border."""

    def test_global_mean_cancels(self):
        img = np.random.default_rng(11).uniform(-0.5, 0.5, size=(3, 32, 32))
        c = cfg(num_samples=1)
        enc = ex.contrast_predictor(img)
        for m in (40, 55, 70):
            rect = ex.enumerate_patches(32, 32, c).rects[m]
            (imputed,) = ex.sample_conditional(img, rect, c, ex.patch_rng(0, m))
            fse = ex.fse_patch(enc, ex.gen_prediction(ex.contrast_predictor, [imputed]))
            assert np.abs(fse).max() > 1e-3
            assert abs(fse.mean()) < 1e-12

    def test_salient_reduce_separates_object(self):
        from scipy import ndimage

        from saliex import dataio

        from helpers import bright_square

        for seed in range(3):
            img, mask = bright_square(seed)
            m = ex.explain(ex.contrast_predictor, dataio.to_tensor(img).data, cfg(seed=seed, reduce="salient"))
            ring = ndimage.binary_dilation(mask, np.ones((9, 9), bool)) & ~mask
            assert m.values[mask].mean() > 0 > m.values[ring].mean()
