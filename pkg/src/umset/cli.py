"""Command-line entry point: ``umset {gen,train,eval,sweep,verify}``.

Exit codes: 0 success, 1 property or trial failure, 2 usage/config error.
"""
from __future__ import annotations

import argparse
import glob
import io
import json
import logging
import os
import sys
from importlib import resources

import jsonschema
import numpy as np

from . import harness, oracles
from .datagen import CompositionError, LabeledPool, USetCollection
from .harness import ConfigError, ExperimentConfig, atomic_write
from .ingest import IngestError
from .model import NetworkParams, load_params
from .transition import PriorSpec

log = logging.getLogger("umset")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


def load_schema() -> dict:
    return json.loads(resources.files("umset").joinpath("schemas/config.schema.json").read_text())


def load_config(path, seed=None, method=None) -> ExperimentConfig:
    doc = {}
    if path:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise UsageError("config file %s not found" % path) from None
        except json.JSONDecodeError as exc:
            raise UsageError("config file %s is not valid JSON: %s" % (path, exc)) from None
    if method is not None:
        doc["method"] = method
    if seed is not None:
        doc["seeds"] = [seed]
    errors = sorted(jsonschema.Draft202012Validator(load_schema()).iter_errors(doc), key=lambda e: list(e.path))
    if errors:
        first = errors[0]
        where = "/".join(str(p) for p in first.path) or "<root>"
        raise ConfigError("%s: %s" % (where, first.message))
    return ExperimentConfig.from_dict(doc)


def _savetxt(array: np.ndarray) -> str:
    buf = io.StringIO()
    np.savetxt(buf, array, delimiter=",", fmt="%.17g")
    return buf.getvalue()


def write_usets(out: str, collection: USetCollection, train_spec: PriorSpec, test_pool: LabeledPool,
                config: ExperimentConfig, seed: int) -> dict:
    os.makedirs(out, exist_ok=True)
    files = []
    for j, s in enumerate(collection.sets):
        name = "set_%03d.csv" % j
        atomic_write(os.path.join(out, name), _savetxt(s))
        files.append(name)
    test = np.column_stack([test_pool.features, test_pool.labels])
    atomic_write(os.path.join(out, "test.csv"), _savetxt(test))
    manifest = {
        "seed": seed,
        "priors": list(collection.spec.pis),
        "train_priors": list(train_spec.pis),
        "rhos": list(collection.spec.rhos),
        "pi_d": collection.spec.pi_d,
        "set_sizes": collection.set_sizes,
        "files": files,
        "test_file": "test.csv",
        "config": config.to_dict(),
    }
    atomic_write(os.path.join(out, MANIFEST), json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_usets(directory: str) -> tuple[USetCollection, PriorSpec, LabeledPool, dict]:
    path = os.path.join(directory, MANIFEST)
    if not os.path.exists(path):
        raise UsageError("no %s in %s; run `umset gen` first" % (MANIFEST, directory))
    with open(path) as fh:
        manifest = json.load(fh)
    sets = [np.loadtxt(os.path.join(directory, f), delimiter=",", ndmin=2) for f in manifest["files"]]
    spec = PriorSpec(manifest["priors"], manifest["rhos"], manifest["pi_d"])
    train_spec = PriorSpec(manifest["train_priors"], manifest["rhos"], manifest["pi_d"])
    test = np.loadtxt(os.path.join(directory, manifest["test_file"]), delimiter=",", ndmin=2)
    return USetCollection(sets, spec), train_spec, LabeledPool(test[:, :-1], test[:, -1].astype(int)), manifest


def cmd_gen(args, config: ExperimentConfig) -> int:
    seed = config.seeds[0]
    collection, train_spec, test_pool, _ = harness.build_problem(config, seed)
    manifest = write_usets(args.out, collection, train_spec, test_pool, config, seed)
    log.info("wrote %d U sets (n_tr=%d) to %s", len(manifest["files"]), collection.n_tr, args.out)
    return EXIT_OK


def _write_run(out: str, name: str, config: ExperimentConfig, records, params, mean, std, n_ok, setting="") -> None:
    os.makedirs(out, exist_ok=True)
    harness.write_jsonl(records, os.path.join(out, "%s.jsonl" % name))
    row = {"method": config.method, "dataset": harness.dataset_name(config), "setting": setting or "m=%d" % config.m,
           "mean": mean, "std": std, "n_ok": n_ok}
    harness.write_summary_csv([row], os.path.join(out, "%s_summary.csv" % name))
    doc = {"config": config.to_dict(), "fingerprint": config.fingerprint(),
           "aggregate": {"mean": mean, "std": std, "n_ok": n_ok, "n_seeds": len(records)},
           "records": [r.deterministic_dict() for r in records]}
    atomic_write(os.path.join(out, "%s_records.json" % name), json.dumps(doc, indent=2, sort_keys=True) + "\n")
    timing = {str(r.seed): r.wall_seconds for r in records}
    atomic_write(os.path.join(out, "%s_timing.json" % name), json.dumps(timing, sort_keys=True) + "\n")
    for p, r in zip(params, records):
        if p is not None:
            atomic_write(os.path.join(out, "model_seed%d.json" % r.seed), json.dumps(p.to_dict()))


def cmd_train(args, config: ExperimentConfig) -> int:
    if args.data:
        collection, train_spec, test_pool, manifest = read_usets(args.data)
        seed = manifest["seed"]
        rng = harness.seed_streams(seed)["train"]
        params, record = harness.train(config, collection.with_spec(train_spec), rng, test_pool=test_pool)
        record.seed, record.priors = seed, list(collection.spec.pis)
        records, all_params = [record], [params]
        mean, std, n_ok = harness.aggregate(records)
    else:
        result = harness.run_experiment(config)
        records, all_params = result.records, result.params
        mean, std, n_ok = result.mean, result.std, result.n_ok
    _write_run(args.out, "train", config, records, all_params, mean, std, n_ok)
    log.info("%s: test error %s over %d/%d seeds", config.method, harness.format_cell(mean, std), n_ok, len(records))
    return EXIT_OK if n_ok == len(records) else EXIT_FAIL


def cmd_eval(args, config: ExperimentConfig) -> int:
    model_dir = args.models or args.out
    paths = sorted(glob.glob(os.path.join(model_dir, "model_seed*.json")))
    if args.model:
        paths = [args.model]
    if not paths or not all(os.path.exists(p) for p in paths):
        raise UsageError("no trained model found (looked for %s); run `umset train` first"
                         % (args.model or os.path.join(model_dir, "model_seed*.json")))
    if args.data:
        test_pool = read_usets(args.data)[2]
    rows = []
    for path in paths:
        params: NetworkParams = load_params(path)
        pool = test_pool if args.data else harness.build_problem(config, _seed_of(path, config))[2]
        rows.append(harness.evaluate(params, pool))
    errors = np.array(rows)
    mean, std = float(errors.mean()), float(errors.std())
    row = {"method": config.method, "dataset": harness.dataset_name(config), "setting": "m=%d" % config.m,
           "mean": mean, "std": std, "n_ok": len(errors)}
    os.makedirs(args.out, exist_ok=True)
    harness.write_summary_csv([row], os.path.join(args.out, "eval_summary.csv"))
    print("%s %s %s" % (row["method"], row["dataset"], harness.format_cell(mean, std)))
    return EXIT_OK


def _seed_of(path: str, config: ExperimentConfig) -> int:
    stem = os.path.basename(path)
    if stem.startswith("model_seed"):
        return int(stem[len("model_seed"):-len(".json")])
    return config.seeds[0]


def cmd_sweep(args, config: ExperimentConfig) -> int:
    if not args.axis:
        raise UsageError("sweep needs --axis")
    cast = int if args.axis == "set_number" else float
    values = [cast(v) for v in args.values.split(",") if v.strip()] if args.values else []
    rows = harness.sweep(config, args.axis, values)
    os.makedirs(args.out, exist_ok=True)
    table = [{"method": r["method"], "dataset": harness.dataset_name(config), "setting": "%s=%s" % (args.axis, r["value"]),
              "mean": r["mean"], "std": r["std"], "n_ok": r["n_ok"]} for r in rows]
    harness.write_summary_csv(table, os.path.join(args.out, "sweep_summary.csv"))
    harness.write_jsonl([rec for r in rows for rec in r["records"]], os.path.join(args.out, "sweep.jsonl"))
    for t in table:
        print("%s %s" % (t["setting"], harness.format_cell(t["mean"], t["std"])))
    return EXIT_OK if all(r["n_ok"] == r["n_seeds"] for r in rows) else EXIT_FAIL


def cmd_verify(args, config=None) -> int:
    results = oracles.run_all(mutate=args.mutate)
    report = {"passed": all(r.passed for r in results), "checks": [r.to_dict() for r in results]}
    for r in results:
        print(r.line())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        atomic_write(os.path.join(args.out, "verify.json"), json.dumps(report, indent=2) + "\n")
    return EXIT_OK if report["passed"] else EXIT_FAIL


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, help="run a single seed instead of the config's list")
    common.add_argument("--method", help="override the config's method")
    common.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="umset", description="Learn a binary classifier from m unlabeled sets with known class priors.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="write U-set CSVs and a manifest")
    p = sub.add_parser("train", parents=[common], help="train and export metrics")
    p.add_argument("--data", help="train on a directory written by `gen` instead of regenerating")
    p = sub.add_parser("eval", parents=[common], help="evaluate trained models on held-out data")
    p.add_argument("--models", help="directory holding model_seed*.json (default: --out)")
    p.add_argument("--model", help="a single model file")
    p.add_argument("--data", help="evaluate on the test pool of a `gen` directory")
    p = sub.add_parser("sweep", parents=[common], help="one experiment per axis value")
    p.add_argument("--axis", choices=sorted(harness.SWEEP_AXES))
    p.add_argument("--values", help="comma-separated axis values")
    p = sub.add_parser("verify", parents=[common], help="run the oracle suites")
    p.add_argument("--mutate", action="store_true", help="corrupt a transition coefficient (self-test)")
    p.set_defaults(out=None)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(message)s")
    try:
        config = None if args.command == "verify" else load_config(args.config, args.seed, args.method)
        return COMMANDS[args.command](args, config)
    except (UsageError, ConfigError, CompositionError, IngestError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print("error: missing input file %s" % exc.filename, file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
