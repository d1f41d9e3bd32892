"""Brute-force checks of the transition algebra, gradients and risk
estimators. Each check is independent of the code path it verifies and
returns a :class:`CheckResult`.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import model
from .baselines import U2Coefficients, logistic_loss, u2_risk
from .model import NetworkParams
from .transition import (
    PriorSpec,
    TransitionCoefficients,
    compute_coefficients,
    lipschitz_bound,
    output_range,
    transition_matrix,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0

    def __post_init__(self):
        # checks compute these with numpy; keep the report JSON-native
        self.passed = bool(self.passed)
        self.measured = float(self.measured)
        self.tolerance = float(self.tolerance)

    def to_dict(self) -> dict:
        return asdict(self)

    def line(self) -> str:
        return "%s %-22s measured=%.3e tol=%.1e %s" % (
            "PASS" if self.passed else "FAIL", self.name, self.measured, self.tolerance, self.detail)


def random_spec(rng: np.random.Generator, m_range=(2, 6)) -> PriorSpec:
    m = int(rng.integers(m_range[0], m_range[1] + 1))
    while True:
        pis = rng.uniform(0, 1, m)
        if pis.max() - pis.min() > 1e-6:
            break
    rhos = rng.dirichlet(np.ones(m))
    rhos = rhos / rhos.sum()
    return PriorSpec(tuple(pis), tuple(rhos), float(rng.uniform(0.05, 0.95)))


def _mutated(coeffs: TransitionCoefficients) -> TransitionCoefficients:
    a = coeffs.a.copy()
    a[0] += 1e-3
    return TransitionCoefficients(a, coeffs.b, coeffs.c, coeffs.d, coeffs.alpha)


def bayes_surrogate_posterior(p_p: np.ndarray, p_n: np.ndarray, spec: PriorSpec) -> np.ndarray:
    """p(set j | x) from the tabulated mixture densities by Bayes rule; shape (n_points, m)."""
    pis = np.asarray(spec.pis)
    rhos = np.asarray(spec.rhos)
    joint = rhos * (np.outer(p_p, pis) + np.outer(p_n, 1 - pis))
    return joint / joint.sum(axis=1, keepdims=True)


def check_bayes_equivalence(n_domains: int = 200, seed: int = 0, mutate: bool = False) -> CheckResult:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(n_domains):
        spec = random_spec(rng)
        n_points = int(rng.integers(1, 9))
        p_p = rng.dirichlet(np.ones(n_points))
        p_n = rng.dirichlet(np.ones(n_points))
        eta = spec.pi_d * p_p / (spec.pi_d * p_p + (1 - spec.pi_d) * p_n)
        coeffs = compute_coefficients(spec)
        if mutate:
            coeffs = _mutated(coeffs)
        err = np.max(np.abs(transition_matrix(coeffs, eta) - bayes_surrogate_posterior(p_p, p_n, spec)))
        worst = max(worst, float(err))
    return CheckResult("bayes_equivalence", worst < 1e-10, worst, 1e-10, "%d domains" % n_domains,
                       time.perf_counter() - start)


def check_injectivity(n_specs: int = 1000, n_pairs: int = 100, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    smallest = np.inf
    for _ in range(n_specs):
        coeffs = compute_coefficients(random_spec(rng))
        t1 = rng.uniform(0, 1, n_pairs)
        t2 = rng.uniform(0, 1, n_pairs)
        far = np.abs(t1 - t2) > 1e-6
        gaps = np.max(np.abs(transition_matrix(coeffs, t1[far]) - transition_matrix(coeffs, t2[far])), axis=1)
        if len(gaps):
            smallest = min(smallest, float(gaps.min()))
    # the sup-norm gap must be resolvable above 1e-12
    return CheckResult("injectivity", smallest > 1e-12, smallest, 1e-12,
                       "%d specs x %d pairs, min sup-norm gap" % (n_specs, n_pairs), time.perf_counter() - start)


def check_lipschitz(n_specs: int = 1000, n_grid: int = 10_000, h: float = 1e-6, seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    grid = np.linspace(0.0, 1.0 - h, n_grid)
    worst_ratio, worst_slope, worst_bound = 0.0, 0.0, 0.0
    passed = True
    for _ in range(n_specs):
        coeffs = compute_coefficients(random_spec(rng))
        slope = float(np.max(np.abs(transition_matrix(coeffs, grid + h) - transition_matrix(coeffs, grid)) / h))
        bound = lipschitz_bound(coeffs)
        passed &= slope <= bound + 1e-9
        if slope / bound > worst_ratio:
            worst_ratio, worst_slope, worst_bound = slope / bound, slope, bound
    return CheckResult("lipschitz_bound", bool(passed), worst_ratio, 1.0,
                       "max slope/bound ratio; worst slope %.4g vs 2/alpha^2 = %.4g" % (worst_slope, worst_bound),
                       time.perf_counter() - start)


def check_output_range(n_specs: int = 200, seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(n_specs):
        spec = random_spec(rng)
        coeffs = compute_coefficients(spec)
        pis, rhos = np.asarray(spec.pis), np.asarray(spec.rhos)
        at0 = rhos * (1 - pis) / np.sum(rhos * (1 - pis))
        at1 = rhos * pis / np.sum(rhos * pis)
        ends = transition_matrix(coeffs, np.array([0.0, 1.0]))
        worst = max(worst, float(np.max(np.abs(ends[0] - at0))), float(np.max(np.abs(ends[1] - at1))))
        for j in range(coeffs.m):
            lo, hi = output_range(coeffs, j)
            worst = max(worst, abs(lo - min(at0[j], at1[j])), abs(hi - max(at0[j], at1[j])))
    tops = []
    for _ in range(20):
        pis = rng.uniform(0.1, 0.9, 50)
        coeffs = compute_coefficients(PriorSpec(tuple(pis), (1 / 50,) * 50, 0.5))
        tops.append(max(output_range(coeffs, j)[1] for j in range(50)))
    in_band = all(0.01 <= t <= 0.1 for t in tops)
    return CheckResult("output_range", worst < 1e-12 and in_band, worst, 1e-12,
                       "m=50 upper endpoints in [%.4f, %.4f]" % (min(tops), max(tops)), time.perf_counter() - start)


def _perturbed_loss(params: NetworkParams, coeffs, x, ybar, weight_decay: float) -> float:
    trace = model.surrogate_forward(params, coeffs, x)
    loss = model.surrogate_loss(trace, ybar)
    if weight_decay:
        loss += 0.5 * weight_decay * sum(float(np.sum(w * w)) for w in params.weights)
    return loss


def finite_difference_gradient(params: NetworkParams, coeffs, x, ybar, h: float = 1e-5,
                               weight_decay: float = 0.0) -> NetworkParams:
    """Central differences of the mean surrogate loss, one coordinate at a time."""
    probe = params.copy()
    grads = NetworkParams([np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases])
    for p, g in zip(probe.arrays(), grads.arrays()):
        for idx in np.ndindex(p.shape):
            keep = p[idx]
            p[idx] = keep + h
            up = _perturbed_loss(probe, coeffs, x, ybar, weight_decay)
            p[idx] = keep - h
            down = _perturbed_loss(probe, coeffs, x, ybar, weight_decay)
            p[idx] = keep
            g[idx] = (up - down) / (2 * h)
    return grads


def max_relative_error(analytic: NetworkParams, numeric: NetworkParams, floor: float = 1e-6) -> float:
    worst = 0.0
    for a, n in zip(analytic.arrays(), numeric.arrays()):
        scale = np.maximum(np.abs(a), np.abs(n))
        mask = scale > floor
        if np.any(mask):
            worst = max(worst, float(np.max(np.abs(a - n)[mask] / scale[mask])))
    return worst


def check_gradients(n_cases: int = 50, seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(n_cases):
        d_in = int(rng.integers(1, 5))
        hidden = [int(rng.integers(2, 7)) for _ in range(int(rng.integers(1, 3)))]
        params = model.init_params([d_in, *hidden, 1], rng)
        for b in params.biases:
            b += rng.normal(scale=0.1, size=b.shape)
        coeffs = compute_coefficients(random_spec(rng))
        n = int(rng.integers(1, 9))
        x = rng.normal(size=(n, d_in))
        ybar = rng.integers(0, coeffs.m, n)
        _, analytic = model.backward(params, coeffs, x, ybar)
        worst = max(worst, max_relative_error(analytic, finite_difference_gradient(params, coeffs, x, ybar)))
    return CheckResult("gradients", worst < 1e-4, worst, 1e-4, "%d random nets" % n_cases,
                       time.perf_counter() - start)


def expected_u2_risk(p_p, p_n, scores, pi1, pi2, coeffs: U2Coefficients, n1: int = 2, n2: int = 3) -> float:
    """Exact expectation of the empirical U^2 risk by enumerating every
    possible draw of n1 + n2 points from the two set distributions."""
    p1 = pi1 * p_p + (1 - pi1) * p_n
    p2 = pi2 * p_p + (1 - pi2) * p_n
    points = range(len(p_p))
    total = 0.0
    for draw1 in itertools.product(points, repeat=n1):
        w1 = np.prod(p1[list(draw1)])
        if w1 == 0:
            continue
        for draw2 in itertools.product(points, repeat=n2):
            w2 = np.prod(p2[list(draw2)])
            total += w1 * w2 * u2_risk(scores[list(draw1)], scores[list(draw2)], coeffs)[0]
    return total


def supervised_risk(p_p, p_n, scores, pi_d: float) -> float:
    return float(pi_d * np.sum(p_p * logistic_loss(scores, 1)) + (1 - pi_d) * np.sum(p_n * logistic_loss(scores, -1)))


def check_unbiasedness(n_scorers: int = 20, seed: int = 5) -> tuple[CheckResult, CheckResult]:
    """Unbiased U^2 risk matches the supervised risk; the balanced one is biased at pi_d = 0.8."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    p_p = rng.dirichlet(np.ones(4))
    p_n = rng.dirichlet(np.ones(4))
    pi1, pi2 = 0.8, 0.25
    worst, biggest_bias = 0.0, 0.0
    for _ in range(n_scorers):
        scores = rng.normal(scale=2.0, size=4)
        pi_d = float(rng.uniform(0.1, 0.9))
        exact = expected_u2_risk(p_p, p_n, scores, pi1, pi2, U2Coefficients.from_priors(pi1, pi2, pi_d))
        worst = max(worst, abs(exact - supervised_risk(p_p, p_n, scores, pi_d)))
        balanced = expected_u2_risk(p_p, p_n, scores, pi1, pi2, U2Coefficients.balanced(pi1, pi2))
        biggest_bias = max(biggest_bias, abs(balanced - supervised_risk(p_p, p_n, scores, 0.8)))
    elapsed = time.perf_counter() - start
    return (CheckResult("u2_unbiased", worst < 1e-10, worst, 1e-10, "%d scorers, 4-point domain" % n_scorers, elapsed),
            CheckResult("u2b_bias_witness", biggest_bias > 1e-3, biggest_bias, 1e-3,
                        "largest |E[balanced] - R| at pi_d=0.8", elapsed))


def run_all(mutate: bool = False) -> list[CheckResult]:
    return [
        check_bayes_equivalence(mutate=mutate),
        check_injectivity(),
        check_lipschitz(),
        check_output_range(),
        check_gradients(),
        *check_unbiasedness(),
    ]
