import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from t2pose import gmm
from t2pose import tensor as tn
from t2pose.gmm import GmmError, GmmParams


def random_params(rng, K=6, spread=2.0):
    w = rng.dirichlet(np.ones(K))
    return GmmParams(w, rng.uniform(-spread, spread, (K, 2)), rng.uniform(0.3, 1.5, (K, 2)))


def scipy_log_density(p: GmmParams, x):
    comps = [np.log(w) + stats.multivariate_normal(m, np.diag(s**2)).logpdf(x)
             for w, m, s in zip(p.weights, p.means, p.scales)]
    return np.logaddexp.reduce(np.stack(comps), axis=0)


def cell_masses(p: GmmParams, xe, ye):
    """Exact mass of each grid cell from per-axis normal CDFs."""
    out = np.zeros((len(xe) - 1, len(ye) - 1))
    for w, m, s in zip(p.weights, p.means, p.scales):
        px = np.diff(stats.norm.cdf(xe, m[0], s[0]))
        py = np.diff(stats.norm.cdf(ye, m[1], s[1]))
        out += w * np.outer(px, py)
    return out


class TestFromRaw:
    def test_all_zero(self):
        p = gmm.from_raw(np.zeros(10), K=2)
        np.testing.assert_allclose(p.weights, [0.5, 0.5])
        np.testing.assert_array_equal(p.means, np.zeros((2, 2)))
        np.testing.assert_allclose(p.scales, math.log(2) + 1e-3)
        assert p.scales[0, 0] == pytest.approx(0.6941, abs=1e-4)

    def test_logit_algebra(self):
        raw = np.zeros(10)
        raw[0] = math.log(3)
        np.testing.assert_allclose(gmm.from_raw(raw, K=2).weights, [0.75, 0.25])

    def test_layout(self):
        raw = np.arange(10, dtype=float)
        p = gmm.from_raw(raw, K=2)
        np.testing.assert_array_equal(p.means, [[2, 3], [4, 5]])

    def test_wrong_length(self):
        with pytest.raises(GmmError):
            gmm.from_raw(np.zeros(11), K=2)
        with pytest.raises(GmmError):
            gmm.from_raw(np.zeros(12))

    def test_batched(self):
        p = gmm.from_raw(np.zeros((4, 7, 30)))
        assert p.batch_shape == (4, 7) and p.K == 6 and p.means.shape == (4, 7, 6, 2)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 8), st.integers(0, 2**32 - 1), st.floats(0.1, 40))
    def test_invariants(self, K, seed, scale):
        raw = np.random.default_rng(seed).normal(0, scale, 5 * K)
        p = gmm.from_raw(raw, K)
        assert np.all(p.weights >= 0) and abs(p.weights.sum() - 1) < 1e-6
        assert np.all(p.scales >= gmm.SCALE_FLOOR)


class TestLogDensity:
    def test_standard_normal_at_mean(self):
        p = GmmParams([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
        assert p.log_density(np.zeros(2)) == pytest.approx(-1.837877, abs=1e-6)

    def test_duplicate_components(self):
        one = GmmParams([1.0], [[0.3, -1.0]], [[0.5, 2.0]])
        two = GmmParams([0.5, 0.5], [[0.3, -1.0]] * 2, [[0.5, 2.0]] * 2)
        x = np.random.default_rng(0).normal(size=(20, 2))
        np.testing.assert_allclose(two.log_density(x), one.log_density(x), rtol=1e-12)

    def test_matches_scipy(self):
        rng = np.random.default_rng(1)
        p = random_params(rng)
        x = rng.normal(0, 3, (200, 2))
        np.testing.assert_allclose(p.log_density(x), scipy_log_density(p, x), rtol=1e-10)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        p = random_params(rng)
        perm = rng.permutation(p.K)
        q = GmmParams(p.weights[perm], p.means[perm], p.scales[perm])
        x = rng.normal(size=(50, 2))
        np.testing.assert_allclose(p.log_density(x), q.log_density(x), rtol=1e-12)

    def test_far_tail_finite(self):
        p = GmmParams([0.5, 0.5], [[0, 0], [1, 1]], [[0.01, 0.01], [0.01, 0.01]])
        assert np.isfinite(p.log_density(np.array([0.2, 0.2])))  # 20 sigma out
        assert np.isfinite(p.log_density(np.array([50.0, -50.0])))

    def test_quadrature_normalization(self):
        # independent trapezoid rule on a 2001^2 grid over [-10, 10]^2
        xs = np.linspace(-10, 10, 2001)
        gx, gy = np.meshgrid(xs, xs, indexing="ij")
        pts = np.stack([gx, gy], -1)
        for seed in range(3):
            p = random_params(np.random.default_rng(seed))
            dens = np.exp(p.log_density(pts))
            total = np.trapezoid(np.trapezoid(dens, xs, axis=1), xs)
            assert abs(total - 1) < 1e-3

    def test_batched_points(self):
        p = gmm.from_raw(np.random.default_rng(3).normal(size=(5, 30)))
        x = np.random.default_rng(4).normal(size=(5, 2))
        batched = p.log_density(x)
        single = [p[i].log_density(x[i]) for i in range(5)]
        np.testing.assert_allclose(batched, single, rtol=1e-12)

    def test_1d_mixture(self):
        p = gmm.gmm1d([0.7, 0.3], [-2.0, 3.0], [1.0, 1.0])
        x = np.linspace(-5, 5, 11)
        ref = np.log(0.7 * stats.norm.pdf(x, -2, 1) + 0.3 * stats.norm.pdf(x, 3, 1))
        np.testing.assert_allclose(p.log_density(x), ref, rtol=1e-12)
        np.testing.assert_allclose(p.cdf(x), 0.7 * stats.norm.cdf(x, -2) + 0.3 * stats.norm.cdf(x, 3))

    def test_invalid_params(self):
        with pytest.raises(GmmError):
            GmmParams([0.5, 0.6], [[0, 0]] * 2, [[1, 1]] * 2)
        with pytest.raises(GmmError):
            GmmParams([1.0], [[0, 0]], [[0.0, 1.0]])
        with pytest.raises(GmmError):
            GmmParams([1.0], [[0, 0]], [[1.0, 1.0], [1.0, 1.0]])


class TestScore:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        p = random_params(rng)
        x = rng.normal(size=(10, 2))
        h = 1e-6
        fd = np.stack([(p.log_density(x + h * e) - p.log_density(x - h * e)) / (2 * h) for e in np.eye(2)], -1)
        np.testing.assert_allclose(p.score(x), fd, rtol=1e-5, atol=1e-7)


class TestSample:
    def test_tight_component_mean(self):
        p = GmmParams([1.0], [[0.4, 0.6]], [[1e-3, 1e-3]])
        s = p.sample(np.random.default_rng(0), 10_000)
        assert np.all(np.abs(s.mean(0) - [0.4, 0.6]) < 3 * 1e-3 / 100)

    def test_zero_weight_never_selected(self):
        p = GmmParams([1.0, 0.0], [[0.0, 0.0], [100.0, 100.0]], [[1.0, 1.0]] * 2)
        s = p.sample(np.random.default_rng(0), 10_000)
        assert np.all(s < 50)

    def test_reproducible(self):
        p = random_params(np.random.default_rng(0))
        a = p.sample(np.random.default_rng(9), 100)
        b = p.sample(np.random.default_rng(9), 100)
        np.testing.assert_array_equal(a, b)

    def test_shapes(self):
        p = gmm.from_raw(np.zeros((3, 30)))
        assert p.sample(np.random.default_rng(0)).shape == (3, 2)
        assert p.sample(np.random.default_rng(0), 7).shape == (7, 3, 2)
        assert gmm.gmm1d([1.0], [0.0], [1.0]).sample(np.random.default_rng(0), 5).shape == (5,)

    def test_histogram_chi_square(self):
        rng = np.random.default_rng(11)
        p = random_params(rng, K=3, spread=1.0)
        s = p.sample(np.random.default_rng(12), 100_000)
        edges = np.linspace(-3, 3, 21)
        counts, _, _ = np.histogram2d(s[:, 0], s[:, 1], bins=[edges, edges])
        expected = cell_masses(p, edges, edges) * len(s)
        keep = expected >= 5
        obs = np.append(counts[keep], len(s) - counts[keep].sum())
        exp = np.append(expected[keep], len(s) - expected[keep].sum())
        assert stats.chisquare(obs, exp).pvalue > 0.01


class TestGradients:
    def test_random_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            rep = gmm.nll_grad_check(rng.normal(0, 1, 30), rng.normal(0, 1, 2))
            assert rep.passed, rep.max_rel_error

    def test_single_component_closed_form(self):
        raw = np.array([0.3, 0.2, -0.4, 0.5, -0.1])
        x = np.array([1.0, 0.5])
        rep = gmm.nll_grad_check(raw, x)
        pre = raw[3:5]
        sig = np.logaddexp(0, pre) + 1e-3
        d = x - raw[1:3]
        expected = np.concatenate([[0.0], -d / sig**2, (1 / sig - d**2 / sig**3) / (1 + np.exp(-pre))])
        np.testing.assert_allclose(rep.analytic, expected, rtol=1e-9, atol=1e-12)

    def test_tensor_path_matches_numpy(self):
        rng = np.random.default_rng(3)
        raw = rng.normal(size=(4, 5, 30))
        x = rng.uniform(0, 1, (4, 5, 2))
        tape = gmm.log_density_tensor(tn.Tensor(raw), x, 6).data
        np.testing.assert_allclose(tape, gmm.from_raw(raw).log_density(x), rtol=1e-10)

    def test_tail_point_finite_gradient(self):
        raw = np.zeros(30)
        raw[18:] = -8.0  # scales near the floor
        rep = gmm.nll_grad_check(raw, np.array([0.05, 0.05]))
        assert np.all(np.isfinite(rep.analytic))
