"""Linear-fractional transition between the binary posterior and the
surrogate set posteriors.

For m unlabeled sets with class priors ``pis`` and mixing weights ``rhos``,
the probability that a point came from set j is a fixed function of the
binary class posterior eta:

    T_j(eta) = (a_j * eta + b_j) / (c * eta + d)

with a_j = rho_j (pi_j - pi_d), b_j = rho_j pi_d (1 - pi_j), c = sum(a),
d = sum(b).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class TransitionError(ValueError):
    """Raised for malformed or unsolvable prior configurations."""


@dataclass(frozen=True)
class PriorSpec:
    pis: tuple[float, ...]
    rhos: tuple[float, ...]
    pi_d: float

    def __post_init__(self):
        pis = tuple(float(p) for p in self.pis)
        rhos = tuple(float(r) for r in self.rhos)
        object.__setattr__(self, "pis", pis)
        object.__setattr__(self, "rhos", rhos)
        object.__setattr__(self, "pi_d", float(self.pi_d))
        if len(pis) < 2:
            raise TransitionError("need at least two sets, got m=%d" % len(pis))
        if len(rhos) != len(pis):
            raise TransitionError("pis and rhos differ in length (%d vs %d)" % (len(pis), len(rhos)))
        if any(not 0.0 <= p <= 1.0 for p in pis):
            raise TransitionError("class priors must lie in [0, 1]: %r" % (pis,))
        if any(not r > 0.0 for r in rhos):
            raise TransitionError("mixing weights must be positive: %r" % (rhos,))
        if abs(sum(rhos) - 1.0) > 1e-12:
            raise TransitionError("mixing weights sum to %r, not 1" % sum(rhos))
        if not 0.0 < self.pi_d < 1.0:
            raise TransitionError("test prior must lie in (0, 1), got %r" % self.pi_d)
        if max(pis) - min(pis) <= 0.0:
            raise TransitionError("all class priors are identical; the problem is unsolvable")

    @property
    def m(self) -> int:
        return len(self.pis)

    @classmethod
    def from_sizes(cls, pis: Sequence[float], sizes: Sequence[int], pi_d: float) -> "PriorSpec":
        """Build a spec with rho_j = n_j / sum(n)."""
        sizes = np.asarray(sizes, dtype=float)
        rhos = sizes / sizes.sum()
        # renormalise so the 1e-12 sum check never trips on rounding
        rhos = rhos / math.fsum(rhos)
        return cls(tuple(pis), tuple(rhos), pi_d)


@dataclass(frozen=True)
class TransitionCoefficients:
    a: np.ndarray
    b: np.ndarray
    c: float
    d: float
    alpha: float

    @property
    def m(self) -> int:
        return len(self.a)

    def slopes_numerator(self) -> np.ndarray:
        """a_j d - b_j c; the sign and size of each component's slope."""
        return self.a * self.d - self.b * self.c

    def to_dict(self) -> dict:
        return {
            "a": [float(v) for v in self.a],
            "b": [float(v) for v in self.b],
            "c": float(self.c),
            "d": float(self.d),
            "alpha": float(self.alpha),
        }


def compute_coefficients(spec: PriorSpec) -> TransitionCoefficients:
    pis = np.asarray(spec.pis, dtype=float)
    rhos = np.asarray(spec.rhos, dtype=float)
    pi_d = spec.pi_d
    a = rhos * (pis - pi_d)
    b = rhos * pi_d * (1.0 - pis)
    c = float(np.sum(a))
    d = float(np.sum(b))
    alpha = min(float(np.sum(rhos * pis * (1.0 - pi_d))), float(np.sum(rhos * pi_d * (1.0 - pis))))
    if not (d > 0.0 and c + d > 0.0 and alpha > 0.0):
        raise TransitionError("degenerate transition: c=%r d=%r alpha=%r" % (c, d, alpha))
    a.setflags(write=False)
    b.setflags(write=False)
    return TransitionCoefficients(a=a, b=b, c=c, d=d, alpha=alpha)


def transition_matrix(coeffs: TransitionCoefficients, eta) -> np.ndarray:
    """Vectorised T: array of eta values of shape (n,) -> (n, m)."""
    eta = np.asarray(eta, dtype=float)
    denom = coeffs.c * eta + coeffs.d
    return (np.multiply.outer(eta, coeffs.a) + coeffs.b) / denom[..., None]


def transition_derivative(coeffs: TransitionCoefficients, eta) -> np.ndarray:
    """dT_j/d eta = (a_j d - b_j c) / (c eta + d)^2, shape (n, m)."""
    eta = np.asarray(eta, dtype=float)
    denom = coeffs.c * eta + coeffs.d
    return coeffs.slopes_numerator() / (denom**2)[..., None]


def apply_transition(coeffs: TransitionCoefficients, eta: float) -> np.ndarray:
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1], got %r" % eta)
    return transition_matrix(coeffs, float(eta))


def invert_transition(coeffs: TransitionCoefficients, j: int, etabar_j: float, tol: float = 1e-9) -> float:
    """Recover eta from the j-th surrogate posterior (0-based j)."""
    if abs(coeffs.a[j] * coeffs.d - coeffs.b[j] * coeffs.c) <= 1e-15:
        raise TransitionError("component %d is constant in eta and cannot be inverted" % j)
    eta = (coeffs.d * etabar_j - coeffs.b[j]) / (coeffs.a[j] - coeffs.c * etabar_j)
    if not -tol <= eta <= 1.0 + tol:
        raise TransitionError("recovered eta=%r lies outside [0, 1]" % eta)
    return float(min(max(eta, 0.0), 1.0))


def lipschitz_bound(coeffs: TransitionCoefficients) -> float:
    return 2.0 / coeffs.alpha**2


def empirical_lipschitz(coeffs: TransitionCoefficients, n_grid: int = 10_000, h: float = 1e-6) -> float:
    """Largest forward-difference slope of any T_j over a grid of [0, 1 - h]."""
    grid = np.linspace(0.0, 1.0 - h, n_grid)
    diff = np.abs(transition_matrix(coeffs, grid + h) - transition_matrix(coeffs, grid)) / h
    return float(diff.max())


def output_range(coeffs: TransitionCoefficients, j: int) -> tuple[float, float]:
    lo = coeffs.b[j] / coeffs.d
    hi = (coeffs.a[j] + coeffs.b[j]) / (coeffs.c + coeffs.d)
    return (float(min(lo, hi)), float(max(lo, hi)))
