"""Problem-instance generation: priors, pools, set sizes and U-set sampling."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .transition import PriorSpec

log = logging.getLogger(__name__)


class CompositionError(ValueError):
    """The pool cannot supply the requested set composition."""


@dataclass
class LabeledPool:
    features: np.ndarray
    labels: np.ndarray
    true_posterior: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        self.labels = np.asarray(self.labels, dtype=int)
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels differ in length")
        if not np.all(np.isin(self.labels, (-1, 1))):
            raise ValueError("labels must be +1 or -1")
        if self.true_posterior is not None:
            self.true_posterior = np.asarray(self.true_posterior, dtype=float)
            if self.true_posterior.shape != self.labels.shape:
                raise ValueError("true_posterior must match labels in length")
            if np.any((self.true_posterior < 0) | (self.true_posterior > 1)):
                raise ValueError("true_posterior values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def positive_fraction(self) -> float:
        return float(np.mean(self.labels == 1))


@dataclass
class USetCollection:
    """m unlabeled sets; examples of ``sets[j]`` carry surrogate label j.

    ``hidden_labels`` keeps the true binary labels for diagnostics only;
    no training objective reads them.
    """

    sets: list
    spec: PriorSpec
    hidden_labels: Optional[list] = field(default=None, repr=False)

    def __post_init__(self):
        self.sets = [np.asarray(s, dtype=float) for s in self.sets]
        if len(self.sets) != self.spec.m:
            raise ValueError("got %d sets for a spec with m=%d" % (len(self.sets), self.spec.m))
        if any(len(s) == 0 for s in self.sets):
            raise ValueError("every U set must be non-empty")

    @property
    def m(self) -> int:
        return len(self.sets)

    @property
    def set_sizes(self) -> list[int]:
        return [len(s) for s in self.sets]

    @property
    def n_tr(self) -> int:
        return sum(self.set_sizes)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """Union of all sets with surrogate labels, in set order."""
        x = np.concatenate(self.sets, axis=0)
        ybar = np.concatenate([np.full(len(s), j, dtype=int) for j, s in enumerate(self.sets)])
        return x, ybar

    def with_spec(self, spec: PriorSpec) -> "USetCollection":
        return USetCollection(self.sets, spec, self.hidden_labels)


def sample_priors(m: int, range_lo: float, range_hi: float, rng: np.random.Generator,
                  max_tries: int = 1000) -> np.ndarray:
    if m < 2:
        raise ValueError("need m >= 2, got %d" % m)
    if not 0.0 <= range_lo < range_hi <= 1.0:
        raise ValueError("invalid prior range [%r, %r]" % (range_lo, range_hi))
    if range_hi - range_lo <= 1e-6:
        raise ValueError("prior range [%r, %r] is too narrow to draw distinct priors" % (range_lo, range_hi))
    for _ in range(max_tries):
        pis = rng.uniform(range_lo, range_hi, size=m)
        if pis.max() - pis.min() > 1e-6:
            return pis
    raise RuntimeError("failed to draw non-identical priors in %d tries" % max_tries)


def gaussian_posterior(features: np.ndarray, mean_sep: float, pi_d: float) -> np.ndarray:
    """Closed-form eta(x) for the two-Gaussian pool (means +-mean_sep/2 on axis 0)."""
    features = np.atleast_2d(features)
    logit = mean_sep * features[:, 0] + math.log(pi_d / (1.0 - pi_d))
    return 1.0 / (1.0 + np.exp(-logit))


def gaussian_bayes_error(mean_sep: float, pi_d: float) -> float:
    """Bayes error of the two-Gaussian pool via the normal CDF."""
    mu = mean_sep / 2.0
    t = math.log((1.0 - pi_d) / pi_d) / mean_sep  # threshold on axis 0

    def phi(z):
        return 0.5 * math.erfc(-z / math.sqrt(2.0))

    return pi_d * phi(t - mu) + (1.0 - pi_d) * (1.0 - phi(t + mu))


def make_gaussian_pool(n: int, dim: int, mean_sep: float, pi_d: float,
                       rng: np.random.Generator) -> LabeledPool:
    if n < 1 or dim < 1 or not mean_sep > 0:
        raise ValueError("need n >= 1, dim >= 1, mean_sep > 0")
    if not 0.0 < pi_d < 1.0:
        raise ValueError("pi_d must lie in (0, 1)")
    labels = np.where(rng.random(n) < pi_d, 1, -1)
    mu = np.zeros(dim)
    mu[0] = mean_sep / 2.0
    features = rng.standard_normal((n, dim)) + labels[:, None] * mu
    return LabeledPool(features, labels, gaussian_posterior(features, mean_sep, pi_d))


def positive_count(n_j: int, pi_j: float) -> int:
    # half-up rounding; the tiny slack absorbs representation error such as 10*0.3
    return int(math.floor(n_j * pi_j + 0.5 + 1e-9))


def build_usets(pool: LabeledPool, spec: PriorSpec, sizes: Sequence[int],
                rng: np.random.Generator) -> USetCollection:
    """Draw set j with exactly round(n_j * pi_j) positives from ``pool``."""
    if len(sizes) != spec.m:
        raise ValueError("got %d sizes for m=%d" % (len(sizes), spec.m))
    pos_idx = np.flatnonzero(pool.labels == 1)
    neg_idx = np.flatnonzero(pool.labels == -1)
    n_pos = [positive_count(n, p) for n, p in zip(sizes, spec.pis)]
    n_neg = [n - k for n, k in zip(sizes, n_pos)]
    for j, (kp, kn) in enumerate(zip(n_pos, n_neg)):
        if kp > len(pos_idx) or kn > len(neg_idx):
            raise CompositionError(
                "set %d needs %d positives and %d negatives; pool has %d and %d"
                % (j, kp, kn, len(pos_idx), len(neg_idx)))

    disjoint = sum(n_pos) <= len(pos_idx) and sum(n_neg) <= len(neg_idx)
    if disjoint:
        pos_order = rng.permutation(pos_idx)
        neg_order = rng.permutation(neg_idx)
    else:
        log.warning("pool too small for disjoint U sets; sets will share examples")

    sets, hidden = [], []
    p_off = n_off = 0
    for kp, kn in zip(n_pos, n_neg):
        if disjoint:
            chosen_p = pos_order[p_off:p_off + kp]
            chosen_n = neg_order[n_off:n_off + kn]
            p_off += kp
            n_off += kn
        else:
            chosen_p = rng.choice(pos_idx, size=kp, replace=False)
            chosen_n = rng.choice(neg_idx, size=kn, replace=False)
        idx = np.concatenate([chosen_p, chosen_n])
        idx = idx[rng.permutation(len(idx))]
        sets.append(pool.features[idx])
        hidden.append(pool.labels[idx])
    return USetCollection(sets, spec, hidden)


def split_validation(collection: USetCollection, fraction: float,
                     rng: np.random.Generator) -> tuple[USetCollection, USetCollection]:
    """Hold out ``fraction`` of every set, keeping each part's positive share.

    Needs ``hidden_labels``; the split itself is the only consumer.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    if collection.hidden_labels is None:
        raise ValueError("a composition-preserving split needs the hidden labels")
    parts = {"train": ([], []), "val": ([], [])}
    for x, y in zip(collection.sets, collection.hidden_labels):
        val_idx = []
        for cls in (1, -1):
            idx = rng.permutation(np.flatnonzero(y == cls))
            val_idx.append(idx[:int(round(fraction * len(idx)))])
        val_idx = np.sort(np.concatenate(val_idx))
        keep = np.setdiff1d(np.arange(len(y)), val_idx)
        if len(val_idx) == 0 or len(keep) == 0:
            raise ValueError("set of size %d is too small to split at %.2f" % (len(y), fraction))
        for name, idx in (("train", keep), ("val", val_idx)):
            parts[name][0].append(x[idx])
            parts[name][1].append(y[idx])

    def assemble(sets, labels):
        # the split preserves composition, so the priors carry over; only rho moves
        spec = PriorSpec.from_sizes(collection.spec.pis, [len(s) for s in sets], collection.spec.pi_d)
        return USetCollection(sets, spec, labels)

    return assemble(*parts["train"]), assemble(*parts["val"])


def partition_sizes(mode: str, m: int, n_tr: int, rng: np.random.Generator,
                    tau: float = 1.0) -> list[int]:
    if m < 2 or n_tr < m:
        raise ValueError("need m >= 2 and n_tr >= m")
    base = n_tr // m
    if mode == "uniform":
        return [base] * m
    if mode == "tau_shift":
        if not 0.0 < tau <= 1.0:
            raise ValueError("tau must lie in (0, 1], got %r" % tau)
        shrunk = int(math.floor(tau * n_tr / m + 1e-9))
        if shrunk < 1:
            raise ValueError("tau=%r leaves shifted sets empty" % tau)
        sizes = [base] * m
        for j in rng.choice(m, size=math.ceil(m / 2), replace=False):
            sizes[int(j)] = shrunk
        return sizes
    if mode == "random":
        cuts = np.sort(rng.choice(np.arange(1, n_tr), size=m - 1, replace=False))
        edges = np.concatenate([[0], cuts, [n_tr]])
        return [int(v) for v in np.diff(edges)]
    raise ValueError("unknown size mode %r" % mode)


def perturb_priors(pis: Sequence[float], epsilon: float, rng: np.random.Generator) -> np.ndarray:
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    pis = np.asarray(pis, dtype=float)
    gamma = rng.choice((-1.0, 1.0), size=len(pis))
    return np.clip(pis + gamma * epsilon, 0.0, 1.0)


def binarize_labels(raw_labels: Iterable[int], positive_classes: Iterable[int]) -> np.ndarray:
    raw = np.asarray(list(raw_labels) if not isinstance(raw_labels, np.ndarray) else raw_labels)
    return np.where(np.isin(raw, list(positive_classes)), 1, -1)


# Positive-class groupings used for the benchmark binarizations.
POSITIVE_CLASSES = {
    "mnist": (0, 2, 4, 6, 8),
    # everything except coat (4) and sandal (5)
    "fashion": (0, 1, 2, 3, 6, 7, 8, 9),
    # ki, re, wo
    "kmnist": (1, 8, 9),
    # the animals plus airplane
    "cifar10": (0, 2, 3, 4, 5, 6, 7),
}
