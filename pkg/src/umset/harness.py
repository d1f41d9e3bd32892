"""Training loop, evaluation and multi-seed experiment orchestration."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import datagen
from .baselines import MMCObjective, ProportionObjective, mmc_objective, mmc_pair
from .datagen import LabeledPool, USetCollection
from .ingest import load_csv, load_idx
from .model import (
    NetworkParams,
    NumericalError,
    OptimizerState,
    SurrogateObjective,
    adam_step,
    add_weight_decay,
    backprop,
    check_finite,
    forward,
    init_params,
    predict,
)
from .transition import PriorSpec, compute_coefficients

log = logging.getLogger(__name__)

METHODS = ("umssc", "mmc_u2b", "mmc_u2", "mmc_u2c", "epr")
DEFAULT_LR = {"umssc": 1e-5, "mmc_u2b": 1e-4, "mmc_u2": 1e-4, "mmc_u2c": 1e-4, "epr": 1e-4}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    method: str = "umssc"
    m: int = 10
    n_tr: int = 60000
    pi_d: float = 0.5
    prior_range: tuple = (0.1, 0.9)
    priors: Optional[tuple] = None
    size_mode: str = "uniform"
    tau: float = 1.0
    epochs: int = 300
    batch_size: int = 256
    learning_rate: Optional[float] = None
    decay: float = 1e-4
    weight_decay: float = 0.0
    kappa: float = 1.0
    # when set (mmc_u2c only), kappa is picked on a held-out slice of every U set
    kappa_grid: Optional[tuple] = None
    validation_fraction: float = 0.1
    seeds: tuple = (0, 1, 2)
    epsilon: float = 0.0
    hidden: tuple = (64, 64)
    n_test: int = 10000
    # {"kind": "gaussian", "dim", "mean_sep"} | {"kind": "idx", ...} | {"kind": "csv", ...}
    dataset: dict = field(default_factory=lambda: {"kind": "gaussian", "dim": 2, "mean_sep": 2.0})

    def __post_init__(self):
        for name in ("prior_range", "seeds", "hidden"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.priors is not None:
            self.priors = tuple(float(p) for p in self.priors)
        if self.kappa_grid is not None:
            self.kappa_grid = tuple(float(k) for k in self.kappa_grid)
        self.validate()

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError("method: unknown method %r (choose from %s)" % (self.method, ", ".join(METHODS)))
        if self.epochs < 1:
            raise ConfigError("epochs: must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size: must be >= 1")
        if not self.seeds:
            raise ConfigError("seeds: must be non-empty")
        if self.m < 2:
            raise ConfigError("m: must be >= 2")
        if self.priors is not None and len(self.priors) != self.m:
            raise ConfigError("priors: expected %d values, got %d" % (self.m, len(self.priors)))
        if self.method.startswith("mmc") and self.m % 2:
            raise ConfigError("m: MMC methods need an even number of sets")
        if self.epsilon < 0:
            raise ConfigError("epsilon: must be >= 0")
        if self.kappa < 0:
            raise ConfigError("kappa: must be >= 0")
        if self.kappa_grid is not None:
            if self.method != "mmc_u2c":
                raise ConfigError("kappa_grid: only the corrected MMC method has a kappa to tune")
            if not self.kappa_grid or min(self.kappa_grid) < 0:
                raise ConfigError("kappa_grid: needs at least one value, all >= 0")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction: must lie in (0, 1)")
        if self.dataset.get("kind") not in ("gaussian", "idx", "csv"):
            raise ConfigError("dataset.kind: expected gaussian, idx or csv")

    @property
    def lr(self) -> float:
        return self.learning_rate if self.learning_rate is not None else DEFAULT_LR[self.method]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError("%s: unknown field" % unknown[0])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class MetricsRecord:
    seed: int
    fingerprint: str
    method: str
    epochs: list = field(default_factory=list)
    test_error: Optional[float] = None
    priors: Optional[list] = None
    train_priors: Optional[list] = None
    set_sizes: Optional[list] = None
    coefficients: Optional[dict] = None
    kappa: Optional[float] = None
    validation: Optional[dict] = None
    n_steps: int = 0
    status: str = "ok"
    message: str = ""
    wall_seconds: float = 0.0

    def deterministic_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc.pop("wall_seconds")
        return doc


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    records: list
    mean: float
    std: float
    n_ok: int
    params: list = field(default_factory=list, repr=False)

    @property
    def aggregate(self) -> dict:
        return {"mean": self.mean, "std": self.std, "n_ok": self.n_ok, "n_seeds": len(self.records),
                "fingerprint": self.config.fingerprint(), "method": self.config.method}


def make_objective(method: str, spec: PriorSpec, kappa: float = 0.0):
    if method == "umssc":
        return SurrogateObjective(compute_coefficients(spec))
    if method == "epr":
        return ProportionObjective(spec.pis)
    variant = {"mmc_u2b": "balanced", "mmc_u2": "unbiased", "mmc_u2c": "corrected"}[method]
    equal = len(set(spec.rhos)) == 1
    return MMCObjective(spec.pis, spec.pi_d, variant, kappa, plan=mmc_pair(spec.pis, equal_sizes=equal))


def evaluate(params: NetworkParams, test_pool: LabeledPool, chunk: int = 8192) -> float:
    """Zero-one test error of the thresholded scorer."""
    if len(test_pool) == 0:
        raise ValueError("empty test set")
    wrong = 0
    for start in range(0, len(test_pool), chunk):
        pred = predict(params, test_pool.features[start:start + chunk])
        wrong += int(np.sum(pred != test_pool.labels[start:start + chunk]))
    return wrong / len(test_pool)


def train(config: ExperimentConfig, collection: USetCollection, rng: np.random.Generator,
          objective=None, test_pool: Optional[LabeledPool] = None,
          params: Optional[NetworkParams] = None) -> tuple[NetworkParams, MetricsRecord]:
    """Shuffle the union of the sets, sweep mini-batches, take one Adam step per batch.

    ``collection.spec`` carries the priors the method believes in.
    """
    if objective is None:
        objective = make_objective(config.method, collection.spec, config.kappa)
    x, ybar = collection.stacked()
    if params is None:
        params = init_params([x.shape[1], *config.hidden, 1], rng)
    state = OptimizerState.for_params(params, learning_rate=config.lr, decay=config.decay)
    record = MetricsRecord(seed=-1, fingerprint=config.fingerprint(), method=config.method,
                           set_sizes=collection.set_sizes, train_priors=list(collection.spec.pis))
    if isinstance(objective, SurrogateObjective):
        record.coefficients = objective.coeffs.to_dict()
    if config.method == "mmc_u2c":
        record.kappa = config.kappa
    n = len(ybar)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        risk_sum = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            trace = forward(params, x[idx])
            loss, dlogit = objective(trace.logit, ybar[idx])
            grads = backprop(params, trace, dlogit)
            loss += add_weight_decay(params, grads, config.weight_decay)
            check_finite(loss, grads)
            adam_step(params, state, grads, epoch)
            risk_sum += loss * len(idx)
        entry = {"epoch": epoch + 1, "train_risk": risk_sum / n}
        if test_pool is not None:
            entry["test_error"] = evaluate(params, test_pool)
        record.epochs.append(entry)
    record.n_steps = state.step_count
    if test_pool is not None:
        record.test_error = record.epochs[-1]["test_error"]
    return params, record


def _load_pools(config: ExperimentConfig, rng: np.random.Generator) -> tuple[LabeledPool, LabeledPool]:
    ds = config.dataset
    kind = ds["kind"]
    if kind == "gaussian":
        dim, sep = int(ds.get("dim", 2)), float(ds.get("mean_sep", 2.0))
        pool_size = int(ds.get("pool_size", 2 * config.n_tr))
        # balanced reservoir; only the labels matter when composing the sets
        train_pool = datagen.make_gaussian_pool(pool_size, dim, sep, 0.5, rng)
        test_pool = datagen.make_gaussian_pool(config.n_test, dim, sep, config.pi_d, rng)
        return train_pool, test_pool
    positive = ds.get("positive_classes")
    if positive is None:
        positive = datagen.POSITIVE_CLASSES[ds["name"]]
    if kind == "idx":
        tr = load_idx(ds["train_images"], ds["train_labels"])
        te = load_idx(ds["test_images"], ds["test_labels"])
    else:
        col = int(ds.get("label_column", -1))
        tr = load_csv(ds["train"], col)
        te = load_csv(ds["test"], col)
    return (LabeledPool(tr.features, datagen.binarize_labels(tr.labels, positive)),
            LabeledPool(te.features, datagen.binarize_labels(te.labels, positive)))


def seed_streams(seed: int) -> dict:
    names = ("data", "priors", "sizes", "sets", "noise", "train")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def build_problem(config: ExperimentConfig, seed: int):
    """Everything a trial needs before training, deterministic in ``seed``.

    Returns (collection with true priors, training spec, test pool, train rng).
    """
    rngs = seed_streams(seed)
    train_pool, test_pool = _load_pools(config, rngs["data"])
    pi_d = config.pi_d if config.dataset["kind"] == "gaussian" else test_pool.positive_fraction
    if config.priors is not None:
        pis = np.asarray(config.priors, dtype=float)
    else:
        pis = datagen.sample_priors(config.m, *config.prior_range, rngs["priors"])
    sizes = datagen.partition_sizes(config.size_mode, config.m, config.n_tr, rngs["sizes"], tau=config.tau)
    true_spec = PriorSpec.from_sizes(pis, sizes, pi_d)
    collection = datagen.build_usets(train_pool, true_spec, sizes, rngs["sets"])
    train_pis = pis
    if config.epsilon > 0:
        train_pis = datagen.perturb_priors(pis, config.epsilon, rngs["noise"])
    train_spec = PriorSpec(tuple(train_pis), true_spec.rhos, pi_d)
    return collection, train_spec, test_pool, rngs["train"]


def select_kappa(config: ExperimentConfig, collection: USetCollection,
                 rng: np.random.Generator) -> tuple[float, dict]:
    """Pick kappa from ``config.kappa_grid`` by held-out MMC zero-one risk.

    ``collection`` must carry the priors the learner believes in. Each
    candidate trains on the remaining share of every set; the score is the
    unbiased pairwise estimate of the zero-one risk on the held-out share.
    """
    fit, held_out = datagen.split_validation(collection, config.validation_fraction, rng)
    plan = mmc_pair(held_out.spec.pis)
    scores = {}
    for kappa in config.kappa_grid:
        params, _ = train(config.replace(kappa=kappa, kappa_grid=None), fit, rng)
        scorer = lambda x, p=params: forward(p, x).logit
        scores[kappa] = mmc_objective(held_out, plan, "unbiased", scorer, loss="zero_one")
    best = min(config.kappa_grid, key=lambda k: (scores[k], k))
    return best, {"fraction": config.validation_fraction, "scores": {repr(k): v for k, v in scores.items()},
                  "selected": best}


def run_trial(config: ExperimentConfig, seed: int) -> tuple[Optional[NetworkParams], MetricsRecord]:
    """Sample priors, build sets, train and evaluate for one seed."""
    start = time.perf_counter()
    params = None
    try:
        collection, train_spec, test_pool, rng = build_problem(config, seed)
        believed = collection.with_spec(train_spec)
        validation = None
        if config.kappa_grid is not None:
            kappa, validation = select_kappa(config, believed, rng)
            config = config.replace(kappa=kappa)
        params, record = train(config, believed, rng, test_pool=test_pool)
        record.priors = list(collection.spec.pis)
        record.validation = validation
    except (NumericalError, ValueError) as exc:
        log.warning("seed %d failed: %s", seed, exc)
        record = MetricsRecord(seed=seed, fingerprint=config.fingerprint(), method=config.method,
                               status="failed", message="%s: %s" % (type(exc).__name__, exc))
    record.seed = seed
    record.wall_seconds = time.perf_counter() - start
    return params, record


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("UMSET_THREADS", "1")))
    except ValueError:
        return 1


def aggregate(records: Sequence[MetricsRecord]) -> tuple[float, float, int]:
    errors = [r.test_error for r in records if r.status == "ok"]
    if len(errors) < len(records):
        log.warning("%d of %d trials failed; aggregating over successes", len(records) - len(errors), len(records))
    if not errors:
        return math.nan, math.nan, 0
    return float(np.mean(errors)), float(np.std(errors)), len(errors)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    workers = min(max_workers(), len(config.seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run_trial, [config] * len(config.seeds), config.seeds))
    else:
        outcomes = [run_trial(config, seed) for seed in config.seeds]
    params = [p for p, _ in outcomes]
    records = [r for _, r in outcomes]
    mean, std, n_ok = aggregate(records)
    return ExperimentResult(config, records, mean, std, n_ok, params)


SWEEP_AXES = {"set_number": "m", "tau": "tau", "epsilon": "epsilon"}


def sweep(base: ExperimentConfig, axis: str, values: Sequence) -> list[dict]:
    if axis not in SWEEP_AXES:
        raise ConfigError("axis: expected one of %s" % ", ".join(SWEEP_AXES))
    rows = []
    for value in values:
        changes = {SWEEP_AXES[axis]: value}
        if axis == "set_number" and base.priors is not None and len(base.priors) != value:
            changes["priors"] = None
        if axis == "tau":
            changes["size_mode"] = "tau_shift"
        try:
            result = run_experiment(base.replace(**changes))
            rows.append({"axis": axis, "value": value, **result.aggregate, "records": result.records})
        except ConfigError as exc:
            rows.append({"axis": axis, "value": value, "mean": math.nan, "std": math.nan, "n_ok": 0,
                         "n_seeds": len(base.seeds), "method": base.method, "error": str(exc), "records": []})
    return rows


def epoch_lines(records: Sequence[MetricsRecord]):
    """One JSON-serialisable dict per epoch per seed."""
    for r in records:
        for entry in r.epochs:
            yield {"seed": r.seed, "method": r.method, "fingerprint": r.fingerprint, **entry}


def write_jsonl(records: Sequence[MetricsRecord], path) -> None:
    atomic_write(path, "".join(json.dumps(line, sort_keys=True) + "\n" for line in epoch_lines(records)))


def format_cell(mean: float, std: float) -> str:
    """Percent error as 'mean(std)', the layout of the results tables."""
    if math.isnan(mean):
        return "failed"
    return "%.2f(%.2f)" % (100 * mean, 100 * std)


def write_summary_csv(rows: Sequence[dict], path) -> None:
    """Rows need method, dataset, setting, mean, std."""

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "dataset", "setting", "mean", "std", "n_ok", "cell"])
    for row in rows:
        writer.writerow([row["method"], row["dataset"], row["setting"], repr(row["mean"]), repr(row["std"]),
                         row.get("n_ok", ""), format_cell(row["mean"], row["std"])])
    atomic_write(path, buf.getvalue())


def atomic_write(path, text: str) -> None:
    tmp = "%s.tmp.%d" % (path, os.getpid())
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def dataset_name(config: ExperimentConfig) -> str:
    ds = config.dataset
    return ds.get("name", ds["kind"])
