import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from umset import datagen
from umset.datagen import CompositionError, LabeledPool
from umset.transition import PriorSpec


def rng(seed=0):
    return np.random.default_rng(seed)


class TestSamplePriors:
    def test_two_distinct_in_range(self):
        pis = datagen.sample_priors(2, 0.1, 0.9, rng())
        assert len(pis) == 2 and pis[0] != pis[1]
        assert np.all((pis >= 0.1) & (pis <= 0.9))

    def test_mean_over_seeds(self):
        means = [datagen.sample_priors(50, 0.1, 0.9, rng(s)).mean() for s in range(10)]
        assert abs(np.mean(means) - 0.5) < 0.1

    def test_degenerate_range(self):
        with pytest.raises(ValueError):
            datagen.sample_priors(3, 0.5, 0.5, rng())

    def test_reproducible(self):
        assert np.array_equal(datagen.sample_priors(5, 0.1, 0.9, rng(4)), datagen.sample_priors(5, 0.1, 0.9, rng(4)))


class TestGaussianPool:
    def test_posterior_on_hyperplane_is_prior(self):
        x = np.array([[0.0, 1.3], [0.0, -2.0]])
        assert np.allclose(datagen.gaussian_posterior(x, 2.0, 0.3), 0.3)

    def test_posterior_matches_density_ratio(self):
        pool = datagen.make_gaussian_pool(500, 3, 1.5, 0.4, rng(1))
        mu = np.array([0.75, 0, 0])

        def density(x, mean):
            return np.exp(-0.5 * np.sum((x - mean) ** 2, axis=1)) / (2 * math.pi) ** 1.5

        num = 0.4 * density(pool.features, mu)
        expected = num / (num + 0.6 * density(pool.features, -mu))
        assert np.max(np.abs(pool.true_posterior - expected)) < 1e-12

    def test_bayes_error(self):
        # Phi(-1)
        assert datagen.gaussian_bayes_error(2.0, 0.5) == pytest.approx(0.15865525393145707, abs=1e-12)

    def test_bayes_error_by_quadrature(self):
        from scipy import integrate
        from scipy.stats import norm

        def integrand(x):
            return min(0.7 * norm.pdf(x, 1, 1), 0.3 * norm.pdf(x, -1, 1))

        expected, _ = integrate.quad(integrand, -12, 12, points=[0.0, -math.log(7 / 3) / 2], limit=200)
        assert datagen.gaussian_bayes_error(2.0, 0.7) == pytest.approx(expected, abs=1e-8)

    def test_positive_fraction(self):
        pool = datagen.make_gaussian_pool(10000, 2, 2.0, 0.7, rng(2))
        assert abs(pool.positive_fraction - 0.7) < 0.02

    def test_labels(self):
        pool = datagen.make_gaussian_pool(100, 2, 2.0, 0.5, rng())
        assert set(np.unique(pool.labels)) <= {-1, 1}
        assert pool.features.shape == (100, 2)


def pool_with(n_pos, n_neg):
    labels = np.array([1] * n_pos + [-1] * n_neg)
    features = np.arange(n_pos + n_neg, dtype=float)[:, None]
    return LabeledPool(features, labels)


class TestBuildUsets:
    def test_exact_composition(self):
        spec = PriorSpec([0.3, 0.0], [0.5, 0.5], 0.5)
        coll = datagen.build_usets(pool_with(50, 50), spec, [10, 10], rng())
        assert coll.set_sizes == [10, 10]
        assert np.sum(coll.hidden_labels[0] == 1) == 3
        assert np.all(coll.hidden_labels[1] == -1)

    def test_total_size(self):
        pis = datagen.sample_priors(50, 0.1, 0.9, rng())
        spec = PriorSpec.from_sizes(pis, [1200] * 50, 0.5)
        coll = datagen.build_usets(pool_with(60000, 60000), spec, [1200] * 50, rng())
        assert coll.n_tr == 60000

    def test_disjoint_when_possible(self):
        spec = PriorSpec([0.8, 0.2], [0.5, 0.5], 0.5)
        coll = datagen.build_usets(pool_with(20, 20), spec, [20, 20], rng())
        ids = np.concatenate([s[:, 0] for s in coll.sets])
        assert len(np.unique(ids)) == 40

    def test_falls_back_to_overlap(self, caplog):
        spec = PriorSpec([0.8, 0.6], [0.5, 0.5], 0.5)
        coll = datagen.build_usets(pool_with(10, 10), spec, [10, 10], rng())
        assert "share examples" in caplog.text
        assert [int(np.sum(h == 1)) for h in coll.hidden_labels] == [8, 6]

    def test_insufficient_pool(self):
        spec = PriorSpec([0.99, 0.1], [0.5, 0.5], 0.5)
        with pytest.raises(CompositionError):
            datagen.build_usets(pool_with(50, 500), spec, [100, 100], rng())

    def test_stacked_labels(self):
        spec = PriorSpec([0.5, 0.0], [0.5, 0.5], 0.5)
        coll = datagen.build_usets(pool_with(10, 10), spec, [4, 6], rng())
        x, ybar = coll.stacked()
        assert x.shape == (10, 1)
        assert list(ybar) == [0] * 4 + [1] * 6

    @given(st.integers(1, 60), st.floats(0, 1))
    def test_fraction_within_one_over_n(self, n, pi):
        spec = PriorSpec([pi, 1 - pi if abs(1 - 2 * pi) > 0 else 0.0], [0.5, 0.5], 0.5)
        coll = datagen.build_usets(pool_with(60, 60), spec, [n, n], rng())
        frac = np.mean(coll.hidden_labels[0] == 1)
        assert abs(frac - pi) <= 1 / n


class TestPartitionSizes:
    def test_uniform(self):
        assert datagen.partition_sizes("uniform", 10, 60000, rng()) == [6000] * 10

    def test_tau_shift(self):
        sizes = datagen.partition_sizes("tau_shift", 10, 60000, rng(), tau=0.2)
        assert sorted(sizes) == [1200] * 5 + [6000] * 5

    def test_tau_shift_odd_m(self):
        sizes = datagen.partition_sizes("tau_shift", 5, 1000, rng(), tau=0.5)
        assert sorted(sizes) == [100] * 3 + [200] * 2

    def test_tau_empty_rejected(self):
        with pytest.raises(ValueError):
            datagen.partition_sizes("tau_shift", 10, 20, rng(), tau=0.1)

    def test_random(self):
        sizes = datagen.partition_sizes("random", 4, 100, rng())
        assert len(sizes) == 4 and sum(sizes) == 100 and min(sizes) > 0

    @given(st.integers(2, 30), st.integers(0, 1000), st.integers(0, 2**31))
    def test_sums(self, m, extra, seed):
        n_tr = m + extra
        assert sum(datagen.partition_sizes("uniform", m, n_tr, rng(seed))) <= n_tr
        sizes = datagen.partition_sizes("random", m, n_tr, rng(seed))
        assert sum(sizes) == n_tr and min(sizes) >= 1


class TestPerturb:
    def test_zero_noise_is_identity(self):
        pis = np.array([0.1, 0.5, 0.93])
        assert np.array_equal(datagen.perturb_priors(pis, 0.0, rng()), pis)

    def test_clipped(self):
        out = datagen.perturb_priors([0.95] * 20, 0.1, rng())
        assert set(np.round(out, 12)) == {0.85, 1.0}

    def test_two_outcomes(self):
        out = datagen.perturb_priors([0.5] * 50, 0.2, rng())
        assert set(np.round(out, 12)) == {0.3, 0.7}

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=20), st.floats(0, 2))
    def test_stays_in_unit_interval(self, pis, eps):
        out = datagen.perturb_priors(pis, eps, rng())
        assert np.all((out >= 0) & (out <= 1))


class TestBinarize:
    def test_even_digits(self):
        out = datagen.binarize_labels([4, 7], datagen.POSITIVE_CLASSES["mnist"])
        assert list(out) == [1, -1]

    def test_empty_positive_set(self):
        assert list(datagen.binarize_labels([0, 1, 2], [])) == [-1, -1, -1]
