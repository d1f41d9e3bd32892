"""Acceptance suite: algebraic properties at their stated tolerances plus
scaled-down training experiments on a 2-D Gaussian problem.

Every test prints one PASS/FAIL line; ``pytest -v`` repeats them in an
"acceptance criteria" section at the end of the run.
"""
import math
import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from umset import harness, oracles
from umset.datagen import gaussian_bayes_error
from umset.harness import ExperimentConfig
from umset.transition import compute_coefficients, transition_derivative, transition_matrix

SEEDS = (0, 1, 2)
GAUSSIAN = {"kind": "gaussian", "dim": 2, "mean_sep": 2.0}


def desk_config(**overrides):
    base = dict(m=4, priors=(0.9, 0.7, 0.3, 0.1), n_tr=20000, epochs=100, seeds=SEEDS, pi_d=0.5,
                dataset=dict(GAUSSIAN))
    base.update(overrides)
    return ExperimentConfig(**base)


def as_list(check, *args, **kwargs):
    result = check(*args, **kwargs)
    return list(result) if isinstance(result, (list, tuple)) else [result]


def errors(result):
    assert result.n_ok == len(result.records), [r.message for r in result.records]
    return np.array([r.test_error for r in result.records])


@pytest.fixture(scope="module")
def umssc_half():
    return harness.run_experiment(desk_config())


@pytest.fixture(scope="module")
def umssc_half_noisy():
    return harness.run_experiment(desk_config(epsilon=0.2))


@pytest.fixture(scope="module")
def shifted_pair():
    return {method: harness.run_experiment(desk_config(method=method, pi_d=0.7))
            for method in ("umssc", "mmc_u2b")}


def test_c01_bayes_equivalence(report_criterion):
    (res,) = as_list(oracles.check_bayes_equivalence, n_domains=200)
    ok = res.passed and res.measured < 1e-10 and res.seconds < 10
    report_criterion(1, "surrogate posterior equals T(eta) on discrete domains", ok,
                     "max abs err %.2e (tol 1e-10), %.2fs" % (res.measured, res.seconds))
    assert ok


def test_c02_injectivity(report_criterion):
    (res,) = as_list(oracles.check_injectivity, n_specs=1000, n_pairs=100)
    ok = res.passed and res.measured > 1e-12 and res.seconds < 10
    report_criterion(2, "T is injective", ok,
                     "min sup-norm gap %.2e (> 1e-12), %.2fs" % (res.measured, res.seconds))
    assert ok


def test_c03_lipschitz(report_criterion):
    (res,) = as_list(oracles.check_lipschitz, n_specs=1000, n_grid=10_000)
    ok = res.passed and res.seconds < 30
    report_criterion(3, "grid slopes never exceed 2/alpha^2", ok, "%s, %.2fs" % (res.detail, res.seconds))
    assert ok


def test_c04_output_range(report_criterion):
    (res,) = as_list(oracles.check_output_range)
    ok = res.passed and res.measured < 1e-12
    report_criterion(4, "endpoints b/d and (a+b)/(c+d); m=50 max endpoint in [0.01, 0.1]", ok,
                     "endpoint err %.2e, %s" % (res.measured, res.detail))
    assert ok


def test_c05_gradients(report_criterion):
    (res,) = as_list(oracles.check_gradients, n_cases=50)
    ok = res.passed and res.measured < 1e-4 and res.seconds < 60
    report_criterion(5, "analytic vs central-difference gradients", ok,
                     "max rel err %.2e (tol 1e-4), %.2fs" % (res.measured, res.seconds))
    assert ok


def test_c06_unbiasedness(report_criterion):
    unbiased, witness = oracles.check_unbiasedness(n_scorers=20)
    ok = unbiased.passed and unbiased.measured < 1e-10 and witness.passed and witness.measured > 1e-3
    report_criterion(6, "U2 estimator unbiased, balanced variant biased at pi_d=0.8", ok,
                     "|E[U2]-R| %.2e (tol 1e-10); max |E[U2-b]-R| %.3f (> 1e-3)"
                     % (unbiased.measured, witness.measured))
    assert ok


def test_c07_consistency_desk_scale(umssc_half, report_criterion):
    bayes = gaussian_bayes_error(2.0, 0.5)
    errs = errors(umssc_half)
    hits = int(np.sum(errs <= bayes + 0.02))
    seconds = sum(r.wall_seconds for r in umssc_half.records)
    ok = hits >= 2 and seconds < 300
    report_criterion(7, "U^m-SSC within Bayes + 0.02", ok,
                     "errors %s vs Bayes %.4f; %d/3 seeds within; %.0fs" % (np.round(errs, 4), bayes, hits, seconds))
    assert ok


def test_c08_noisy_priors_degrade(umssc_half, umssc_half_noisy, report_criterion):
    clean, noisy = errors(umssc_half).mean(), errors(umssc_half_noisy).mean()
    ok = noisy > clean
    report_criterion(8, "mean error at eps=0.2 exceeds eps=0 (pi_d=0.5)", ok,
                     "eps=0.2 %.4f vs eps=0 %.4f" % (noisy, clean))
    assert ok


def test_c09_shifted_class_prior(shifted_pair, report_criterion):
    ours, theirs = errors(shifted_pair["umssc"]), errors(shifted_pair["mmc_u2b"])
    wins = int(np.sum(ours <= theirs))
    ok = wins >= 2 and ours.mean() <= theirs.mean()
    report_criterion(9, "U^m-SSC beats MMC-U2-b at pi_d=0.7", ok,
                     "U^m-SSC %s (mean %.4f) vs MMC-U2-b %s (mean %.4f); %d/3 seeds"
                     % (np.round(ours, 4), ours.mean(), np.round(theirs, 4), theirs.mean(), wins))
    assert ok


def _mnist_files(root):
    names = {"train_images": "train-images-idx3-ubyte", "train_labels": "train-labels-idx1-ubyte",
             "test_images": "t10k-images-idx3-ubyte", "test_labels": "t10k-labels-idx1-ubyte"}
    found = {}
    for key, stem in names.items():
        for candidate in (stem, stem + ".gz"):
            path = os.path.join(root, candidate)
            if os.path.exists(path):
                found[key] = path
                break
    return found if len(found) == 4 else None


@pytest.mark.slow
def test_c10_mnist(report_criterion):
    root = os.environ.get("UMSET_MNIST_DIR")
    files = _mnist_files(root) if root else None
    if files is None:
        report_criterion(10, "MNIST m=10 test error <= 6%", None, "skipped: set UMSET_MNIST_DIR to the IDX files")
        pytest.skip("MNIST IDX files not supplied (UMSET_MNIST_DIR)")
    cfg = ExperimentConfig(m=10, n_tr=60000, epochs=50, seeds=SEEDS, n_test=10000, learning_rate=1e-4,
                           hidden=(300, 300), dataset={"kind": "idx", "name": "mnist", **files})
    result = harness.run_experiment(cfg)
    errs = errors(result)
    seconds = sum(r.wall_seconds for r in result.records)
    ok = errs.mean() <= 0.06 and seconds < 1800
    report_criterion(10, "MNIST m=10 test error <= 6%", ok,
                     "errors %s, mean %.4f, %.0fs" % (np.round(errs, 4), errs.mean(), seconds))
    assert ok


def test_c11_determinism(umssc_half, shifted_pair, report_criterion):
    def strip(results):
        return [{k: v for k, v in r.to_dict().items() if k != "seconds"} for r in results]

    checks = [
        lambda: oracles.check_bayes_equivalence(n_domains=200),
        lambda: oracles.check_injectivity(n_specs=200),
        lambda: oracles.check_lipschitz(n_specs=100),
        oracles.check_output_range,
        lambda: oracles.check_gradients(n_cases=10),
        lambda: oracles.check_unbiasedness(n_scorers=20),
    ]
    oracle_same = all(strip(as_list(c)) == strip(as_list(c)) for c in checks)
    # rerun two trials in a fresh worker process and compare bit for bit
    cases = [(desk_config(), 1, umssc_half.records[1], umssc_half.params[1]),
             (desk_config(method="mmc_u2b", pi_d=0.7), 2,
              shifted_pair["mmc_u2b"].records[2], shifted_pair["mmc_u2b"].params[2])]
    with ProcessPoolExecutor(max_workers=1) as pool:
        reruns = list(pool.map(harness.run_trial, [c[0] for c in cases], [c[1] for c in cases]))
    trial_same = all(
        rec.deterministic_dict() == again.deterministic_dict()
        and all(np.array_equal(a, b) for a, b in zip(params.arrays(), again_params.arrays()))
        for (_, _, rec, params), (again_params, again) in zip(cases, reruns))
    ok = oracle_same and trial_same
    report_criterion(11, "bit-reproducible under a fixed seed", ok,
                     "oracle reports identical: %s; retrained records and weights identical: %s"
                     % (oracle_same, trial_same))
    assert ok


def population_threshold(true_coeffs, used_coeffs, pi_d, mean_sep=2.0):
    """Point on the first axis where the infinite-data minimiser of the surrogate
    loss built from ``used_coeffs`` crosses f = 1/2, for sets truly mixed per ``true_coeffs``.

    The loss slope at f = 1/2 is sum_j tbar_j(x) T'_j(1/2) / T_j(1/2); its root in x is the
    boundary; the bracket assertion guards the bisection.
    """
    half = np.array([0.5])
    weights = transition_derivative(used_coeffs, half)[0] / transition_matrix(used_coeffs, half)[0]

    def slope(x):
        eta = 1 / (1 + math.exp(-(mean_sep * x + math.log(pi_d / (1 - pi_d)))))
        return float(transition_matrix(true_coeffs, np.array([eta]))[0] @ weights)

    lo, hi = -6.0, 6.0
    assert slope(lo) < 0 < slope(hi)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        lo, hi = (mid, hi) if slope(mid) < 0 else (lo, mid)
    return 0.5 * (lo + hi)


def threshold_error(t, pi_d, mean_sep=2.0):
    phi = lambda z: 0.5 * (1 + math.erf(z / math.sqrt(2)))
    mu = mean_sep / 2
    return pi_d * phi(t - mu) + (1 - pi_d) * (1 - phi(t + mu))


def test_c08_population_analysis(report_criterion):
    """Why criterion 8 is a coin flip on the pi_d = 1/2 problem: there T_j(1/2) = rho_j
    whatever the priors, so noisy priors leave the population boundary at the Bayes
    boundary. At pi_d = 0.7 the same noise draws do move it, by a small amount."""
    shifts = {}
    for pi_d in (0.5, 0.7):
        bayes_t = -math.log(pi_d / (1 - pi_d)) / 2
        rows = []
        for seed in SEEDS:
            collection, used, _, _ = harness.build_problem(desk_config(pi_d=pi_d, epsilon=0.2, n_tr=400), seed)
            t = population_threshold(compute_coefficients(collection.spec), compute_coefficients(used), pi_d)
            rows.append((abs(t - bayes_t), threshold_error(t, pi_d) - threshold_error(bayes_t, pi_d)))
        shifts[pi_d] = np.array(rows)
    ok = bool(np.all(shifts[0.5] < 1e-9) and np.all(shifts[0.7][:, 0] > 1e-3) and np.all(shifts[0.7][:, 1] > 0))
    report_criterion("8 (analysis)", "population-optimal excess error of eps=0.2 noise", ok,
                     "pi_d=0.5: max boundary shift %.1e, excess %.1e; pi_d=0.7: excess %s"
                     % (shifts[0.5][:, 0].max(), shifts[0.5][:, 1].max(), np.round(shifts[0.7][:, 1], 4)))
    assert ok
