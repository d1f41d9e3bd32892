"""Risk-estimator baselines for learning from m unlabeled sets.

Scores passed to these functions are real-valued logits z; the sigmoid
scorer is f = sigmoid(z), so the logistic loss on z coincides with the
binary cross-entropy on f, and f >= 1/2 exactly when z >= 0.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .datagen import USetCollection
from .model import softplus

log = logging.getLogger(__name__)

Scorer = Callable[[np.ndarray], np.ndarray]


class PriorCollisionError(ValueError):
    pass


def logistic_loss(z, y: int) -> np.ndarray:
    return softplus(-y * np.asarray(z, dtype=float))


def zero_one_loss(z, y: int) -> np.ndarray:
    pred = np.where(np.asarray(z, dtype=float) >= 0, 1, -1)
    return (pred != y).astype(float)


LOSSES = {"logistic": logistic_loss, "zero_one": zero_one_loss}


@dataclass(frozen=True)
class U2Coefficients:
    c1p: float
    c1n: float
    c2p: float
    c2n: float

    @classmethod
    def from_priors(cls, pi1: float, pi2: float, pi_d: float) -> "U2Coefficients":
        gap = pi1 - pi2
        if abs(gap) < 1e-9:
            raise PriorCollisionError("priors %r and %r collide" % (pi1, pi2))
        if gap < 0:
            raise ValueError("expected the larger prior first, got (%r, %r)" % (pi1, pi2))
        return cls(
            c1p=(1 - pi2) * pi_d / gap,
            c1n=pi2 * (1 - pi_d) / gap,
            c2p=(1 - pi1) * pi_d / gap,
            c2n=pi1 * (1 - pi_d) / gap,
        )

    @classmethod
    def balanced(cls, pi1: float, pi2: float) -> "U2Coefficients":
        return cls.from_priors(pi1, pi2, 0.5)


def u2_risk(scores1, scores2, coeffs: U2Coefficients, loss: str = "logistic") -> tuple[float, float, float]:
    """Empirical U^2 risk of a scorer on two sets (set 1 has the larger prior).

    Returns (total, positive part, negative part).
    """
    scores1 = np.asarray(scores1, dtype=float)
    scores2 = np.asarray(scores2, dtype=float)
    if len(scores1) == 0 or len(scores2) == 0:
        raise ValueError("both sets must be non-empty")
    ell = LOSSES[loss]
    pos = coeffs.c1p * np.mean(ell(scores1, 1)) - coeffs.c2p * np.mean(ell(scores2, 1))
    neg = -coeffs.c1n * np.mean(ell(scores1, -1)) + coeffs.c2n * np.mean(ell(scores2, -1))
    return float(pos + neg), float(pos), float(neg)


def u2_balanced_risk(scores1, scores2, pi1: float, pi2: float, loss: str = "logistic") -> float:
    return u2_risk(scores1, scores2, U2Coefficients.balanced(pi1, pi2), loss)[0]


def correction(r: float, kappa: float) -> float:
    """Generalised leaky ReLU: r for r >= 0, -kappa*r otherwise."""
    return r if r >= 0 else -kappa * r


def nonneg_corrected_risk(pos_part: float, neg_part: float, kappa: float) -> float:
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    return correction(pos_part, kappa) + correction(neg_part, kappa)


@dataclass(frozen=True)
class PairingPlan:
    pairs: tuple[tuple[int, int], ...]
    weights: tuple[float, ...]

    def active(self):
        """(high, low, weight) for pairs that carry weight."""
        return [(h, l, w) for (h, l), w in zip(self.pairs, self.weights) if w > 0]


def mmc_pair(pis: Sequence[float], equal_sizes: bool = True) -> PairingPlan:
    """Pair largest prior with smallest, second largest with second smallest, ...

    Weights are proportional to the squared prior gap of each pair.
    """
    pis = np.asarray(pis, dtype=float)
    m = len(pis)
    if m % 2:
        raise ValueError("MMC pairing needs an even number of sets, got m=%d" % m)
    if not equal_sizes:
        log.warning("set sizes differ; sorted matching and gap-squared weights are only optimal for equal sizes")
    order = np.argsort(-pis, kind="stable")
    k = m // 2
    pairs = tuple((int(order[i]), int(order[m - 1 - i])) for i in range(k))
    raw = np.array([(pis[h] - pis[l]) ** 2 for h, l in pairs])
    raw[raw < 1e-18] = 0.0
    if raw.sum() <= 0:
        raise PriorCollisionError("every pair has identical priors")
    weights = raw / raw.sum()
    return PairingPlan(pairs, tuple(float(w) for w in weights))


VARIANTS = ("balanced", "unbiased", "corrected")


def _pair_coeffs(pis, h, l, pi_d, variant):
    if variant == "balanced":
        return U2Coefficients.balanced(pis[h], pis[l])
    return U2Coefficients.from_priors(pis[h], pis[l], pi_d)


def mmc_objective(collection: USetCollection, plan: PairingPlan, variant: str, scorer: Scorer,
                  kappa: float = 0.0, loss: str = "logistic") -> float:
    """Weighted sum of per-pair U^2 risks of ``scorer`` (logits) over the collection."""
    if variant not in VARIANTS:
        raise ValueError("unknown MMC variant %r" % variant)
    pis = collection.spec.pis
    total = 0.0
    for h, l, w in plan.active():
        coeffs = _pair_coeffs(pis, h, l, collection.spec.pi_d, variant)
        risk, pos, neg = u2_risk(scorer(collection.sets[h]), scorer(collection.sets[l]), coeffs, loss)
        if variant == "corrected":
            risk = nonneg_corrected_risk(pos, neg, kappa)
        total += w * risk
    return total


def proportion_risk(collection: USetCollection, scorer: Scorer) -> float:
    """Sum over sets of |pi_j - predicted positive fraction|."""
    total = 0.0
    for pi, x in zip(collection.spec.pis, collection.sets):
        pi_hat = float(np.mean(np.asarray(scorer(x)) >= 0))
        total += abs(pi - pi_hat)
    return total


class MMCObjective:
    """Mini-batch MMC risk: per-set batch means stand in for per-set means.

    Pairs with a set absent from the batch are skipped for that batch.
    """

    def __init__(self, pis: Sequence[float], pi_d: float, variant: str, kappa: float = 0.0,
                 plan: PairingPlan | None = None):
        if variant not in VARIANTS:
            raise ValueError("unknown MMC variant %r" % variant)
        self.pis = tuple(pis)
        self.variant = variant
        self.kappa = kappa
        self.plan = plan or mmc_pair(self.pis)
        self.terms = [(h, l, w, _pair_coeffs(self.pis, h, l, pi_d, variant)) for h, l, w in self.plan.active()]

    def __call__(self, logit: np.ndarray, ybar: np.ndarray) -> tuple[float, np.ndarray]:
        f = 1.0 / (1.0 + np.exp(-np.clip(logit, -500, 500)))
        lp = softplus(-logit)
        ln = softplus(logit)
        dlogit = np.zeros_like(logit)
        total = 0.0
        for h, l, w, c in self.terms:
            in_h, in_l = ybar == h, ybar == l
            n_h, n_l = int(in_h.sum()), int(in_l.sum())
            if not n_h or not n_l:
                continue
            pos = c.c1p * lp[in_h].mean() - c.c2p * lp[in_l].mean()
            neg = -c.c1n * ln[in_h].mean() + c.c2n * ln[in_l].mean()
            sp = sn = 1.0
            if self.variant == "corrected":
                sp = 1.0 if pos >= 0 else -self.kappa
                sn = 1.0 if neg >= 0 else -self.kappa
                total += w * nonneg_corrected_risk(pos, neg, self.kappa)
            else:
                total += w * (pos + neg)
            # d softplus(-z)/dz = f - 1, d softplus(z)/dz = f
            dlogit[in_h] += w * (sp * c.c1p * (f[in_h] - 1) - sn * c.c1n * f[in_h]) / n_h
            dlogit[in_l] += w * (-sp * c.c2p * (f[in_l] - 1) + sn * c.c2n * f[in_l]) / n_l
        return float(total), dlogit


class ProportionObjective:
    """Differentiable proportion risk: the soft fraction mean(f) replaces
    the thresholded fraction inside each set."""

    def __init__(self, pis: Sequence[float]):
        self.pis = np.asarray(pis, dtype=float)

    def __call__(self, logit: np.ndarray, ybar: np.ndarray) -> tuple[float, np.ndarray]:
        f = 1.0 / (1.0 + np.exp(-np.clip(logit, -500, 500)))
        dlogit = np.zeros_like(logit)
        total = 0.0
        for j in np.unique(ybar):
            members = ybar == j
            gap = self.pis[j] - f[members].mean()
            total += abs(gap)
            dlogit[members] = -np.sign(gap) * f[members] * (1 - f[members]) / members.sum()
        return float(total), dlogit
