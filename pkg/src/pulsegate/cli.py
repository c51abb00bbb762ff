"""``pulsegate`` command line.

Settings come from an optional ``key = value`` file (``--config``) and from
flags; flags win. Every random stream is a named substream of ``--seed``.

Exit codes: 0 ok, 2 config, 3 data/io, 4 numeric failure, 5 search failure,
6 horizon mismatch.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, boosting, evaluation, gaopt, ingest, modelio, models, windowing
from .errors import (
    AllDiverged,
    BadSpec,
    ConfigError,
    DataError,
    HorizonMismatch,
    NumericError,
)
from .seeding import substream_seed

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_SEARCH, EXIT_HORIZON = 0, 2, 3, 4, 5, 6


def _widths(text):
    text = str(text).strip().strip("()[]")
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


# key -> (parser, default); these are the only keys a config file may set
KEYS = {
    "seed": (int, 0),
    "horizon": (int, 1),
    "psv_dir": (str, None),
    "synthetic": (str, None),
    # synthetic cohort
    "n_patients": (int, 1000),
    "sepsis_fraction": (float, 0.1),
    "baseline_hr_mean": (float, 75.0),
    "baseline_hr_sd": (float, 10.0),
    "drift_per_hour": (float, 2.0),
    "missing_rate": (float, 0.05),
    # split and balance
    "train_fraction": (float, 0.7),
    "val_fraction": (float, 0.15),
    "test_fraction": (float, 0.15),
    "target_prevalence": (float, 0.30),
    # model and training
    "family": (str, "lstm"),
    "widths": (_widths, None),
    "epochs": (int, None),
    "batch_size": (int, 32),
    "learning_rate": (float, 0.001),
    "fine_tune_learning_rate": (float, models.FINE_TUNE_LEARNING_RATE),
    "num_leaves": (int, 31),
    "max_bin": (int, 255),
    "gbdt_learning_rate": (float, 0.1),
    "n_trees": (int, 100),
    # search
    "population_size": (int, 20),
    "generations": (int, 15),
    "crossover_prob": (float, 0.7),
    "mutation_prob_per_bit": (float, 0.02),
    "elite_count": (int, 1),
    "candidate_epochs": (int, 20),
    "surrogate": (_widths, None),
    # profiling
    "repeats": (int, 30),
    "warmup": (int, 5),
}


def parse_config_text(text):
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in KEYS:
            raise ConfigError(f"config line {n}: unknown key {key!r}")
        out[key] = value
    return out


class Settings:
    """Resolved view over flags > config file > defaults."""

    def __init__(self, args):
        self._file = {}
        if getattr(args, "config", None):
            try:
                text = Path(args.config).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
            self._file = parse_config_text(text)
        self._args = args

    def __getitem__(self, key):
        parse, default = KEYS[key]
        flag = getattr(self._args, key, None)
        if flag is not None:
            return flag
        if key in self._file:
            try:
                return parse(self._file[key])
            except ValueError:
                raise ConfigError(f"bad value for {key}: {self._file[key]!r}") from None
        return default

    def snapshot(self, keys):
        return {k: self[k] for k in keys}


# ---------------------------------------------------------------------------
# helpers


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_text(path, text):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _write_json(path, obj):
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(o):
    if dataclasses.is_dataclass(o):
        return dataclasses.asdict(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not serializable: {type(o).__name__}")


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(command, config, artifacts, started, **extra):
    body = {
        "tool": "pulsegate",
        "version": __version__,
        "command": command,
        "config": config,
        "artifacts": {Path(p).name: _sha256(p) for p in artifacts},
        "elapsed_s": round(time.perf_counter() - started, 3),
    }
    body.update(extra)
    return body


def _synthetic_params(cfg, source_file=None):
    values = {}
    if source_file:
        try:
            text = Path(source_file).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read synthetic params {source_file}: {exc.strerror}") from None
        values = parse_config_text(text)
    kwargs = {}
    for key in ("n_patients", "sepsis_fraction", "baseline_hr_mean", "baseline_hr_sd", "drift_per_hour", "missing_rate"):
        parse, _ = KEYS[key]
        kwargs[key] = parse(values[key]) if key in values else cfg[key]
    seed = int(values["seed"]) if "seed" in values else cfg["seed"]
    kwargs["seed"] = substream_seed(seed, "synth")
    return windowing.SyntheticCohortParams(**kwargs)


def _load_split(path, name):
    p = Path(path)
    if p.is_dir():
        p = p / f"{name}.csv"
    if not p.exists():
        raise DataError(f"dataset file {p} not found")
    return windowing.read_dataset(p)


def _spec_from_settings(cfg, spec_file=None):
    family = cfg["family"]
    if spec_file:
        try:
            d = json.loads(Path(spec_file).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read spec file {spec_file}: {exc}") from None
        return gaopt.spec_from_dict(d)
    if family == "gbdt":
        return boosting.GbdtParams(
            num_leaves=cfg["num_leaves"],
            max_bin=cfg["max_bin"],
            learning_rate=cfg["gbdt_learning_rate"],
            n_trees=cfg["n_trees"],
        )
    widths = cfg["widths"]
    if widths is None:
        return models.reference_spec(family)
    return models.ModelSpec(family, widths)


def _train_log_csv(model):
    val_log = getattr(model, "val_log", [])
    lines = ["epoch,train_loss,val_loss"]
    for i, loss in enumerate(model.train_log):
        val = repr(float(val_log[i])) if i < len(val_log) else ""
        lines.append(f"{i + 1},{float(loss)!r},{val}")
    return "\n".join(lines) + "\n"


def _check_horizon(args, horizon, what):
    if args.horizon is not None and args.horizon != horizon:
        raise HorizonMismatch(f"--horizon {args.horizon} but {what} has horizon {horizon}h")


def _report(model, blob, test, out_dir, repeats, warmup, seed=0, extra=None):
    scores = modelio.scores(model, test.X)
    bundle = evaluation.evaluate_scores(scores, test.y)
    prof = evaluation.ResourceProfile(
        evaluation.measure_size(blob),
        *evaluation.measure_latency(model, test.X, repeats=repeats, warmup=warmup),
    )
    extra = dict(extra or {})
    extra["family"] = model.family
    extra["horizon_hours"] = model.horizon_hours
    # the natural-prevalence test set is primary; a balanced copy is reported alongside
    try:
        aug = windowing.balance_dataset(test, np.random.default_rng(substream_seed(seed, "augmented-test")))
        ab = evaluation.evaluate_scores(modelio.scores(model, aug.X), aug.y)
        extra["augmented_test"] = evaluation.metrics_dict(ab)
    except DataError:
        extra["augmented_test"] = None
    evaluation.emit_report(bundle, out_dir, prof, extra)
    return bundle, prof


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    cfg = Settings(args)
    out = _out_dir(args)
    params = _synthetic_params(cfg, args.synthetic)
    records = windowing.synthesize_cohort(params)
    paths = ingest.write_psv_dir(records, out)
    _write_json(out / "cohort.json", {"params": params, "n_records": len(records)})
    print(f"wrote {len(paths)} PSV files to {out}")
    return EXIT_OK


def cmd_preprocess(args):
    cfg = Settings(args)
    started = time.perf_counter()
    psv_dir, synth = cfg["psv_dir"], cfg["synthetic"]
    if bool(psv_dir) == bool(synth):
        raise ConfigError("give exactly one data source: --psv-dir or --synthetic")
    horizon = cfg["horizon"]
    if horizon not in windowing.HORIZONS:
        raise ConfigError(f"horizon must be one of {windowing.HORIZONS}")
    if psv_dir:
        records = ingest.read_psv_dir(psv_dir)
        source = {"psv_dir": str(psv_dir)}
    else:
        params = _synthetic_params(cfg, synth if synth != "-" else None)
        records = windowing.synthesize_cohort(params)
        source = {"synthetic": dataclasses.asdict(params)}
    ds, counts = windowing.preprocess(records, horizon)
    spec = windowing.SplitSpec(
        cfg["train_fraction"], cfg["val_fraction"], cfg["test_fraction"], seed=substream_seed(cfg["seed"], "split")
    )
    train, val, test = windowing.make_splits(ds, spec, cfg["target_prevalence"], counts)
    out = _out_dir(args)
    paths = []
    for name, part in (("train", train), ("val", val), ("test", test)):
        windowing.write_dataset(part, out / f"{name}.csv")
        paths.append(out / f"{name}.csv")
    splits = {
        name: {"windows": len(p), "sepsis": p.n_sepsis, "patients": len(p.patient_ids)}
        for name, p in (("train", train), ("val", val), ("test", test))
    }
    config = cfg.snapshot(["seed", "horizon", "train_fraction", "val_fraction", "test_fraction", "target_prevalence"])
    config.update(source)
    _write_json(out / "manifest.json", _manifest("preprocess", config, paths, started, counts=counts.as_dict(), splits=splits))
    print(json.dumps(counts.as_dict()))
    return EXIT_OK


def cmd_train(args):
    cfg = Settings(args)
    started = time.perf_counter()
    train_set = _load_split(args.data, "train")
    val_set = _load_split(args.data, "val")
    test_set = _load_split(args.data, "test")
    _check_horizon(args, train_set.horizon_hours, "the training data")
    spec = _spec_from_settings(cfg, args.spec)
    family = "gbdt" if isinstance(spec, boosting.GbdtParams) else spec.family
    seed = cfg["seed"]
    if family == "gbdt":
        model = boosting.fit(train_set, spec)
    else:
        epochs = cfg["epochs"] or models.DEFAULT_EPOCHS[family]
        model = models.build(spec, seed=substream_seed(seed, "init", family), horizon=train_set.horizon_hours)
        tc = models.TrainConfig(epochs, cfg["batch_size"], cfg["learning_rate"], shuffle_seed=substream_seed(seed, "shuffle", family))
        models.train(model, train_set, val_set, tc)
    out = _out_dir(args)
    blob = modelio.save(model, out / "model.sepw")
    _write_text(out / "train_log.csv", _train_log_csv(model))
    bundle, _ = _report(model, blob, test_set, out / "report", cfg["repeats"], cfg["warmup"], seed)
    config = cfg.snapshot(["seed", "family", "batch_size", "learning_rate"])
    config["spec"] = gaopt.spec_to_dict(spec)
    config["epochs"] = len(model.train_log)
    _write_json(out / "manifest.json", _manifest("train", config, [out / "model.sepw", out / "train_log.csv"], started))
    print(f"{family}: test AUROC {bundle['auroc']:.4f}  AP {bundle['aupr']:.4f}")
    return EXIT_OK


def cmd_optimize(args):
    cfg = Settings(args)
    started = time.perf_counter()
    family = cfg["family"]
    if family not in gaopt.GENE_WIDTHS:
        raise ConfigError(f"no search space for family {family!r}")
    gc = gaopt.GaConfig(
        population_size=cfg["population_size"],
        generations=cfg["generations"],
        crossover_prob=cfg["crossover_prob"],
        mutation_prob_per_bit=cfg["mutation_prob_per_bit"],
        elite_count=cfg["elite_count"],
        candidate_epochs=cfg["candidate_epochs"],
        seed=substream_seed(cfg["seed"], "ga"),
        batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"],
        gbdt_trees=cfg["n_trees"],
    )
    targets = cfg["surrogate"]
    if targets is not None:
        if len(targets) != gaopt.N_PARAMS[family]:
            raise ConfigError(f"surrogate needs {gaopt.N_PARAMS[family]} targets for {family}")
        evaluator, datasets = gaopt.surrogate_evaluator(targets, family), None
    else:
        if not args.data:
            raise ConfigError("optimize needs --data unless --surrogate is given")
        evaluator = None
        datasets = (_load_split(args.data, "train"), _load_split(args.data, "val"))
    out = _out_dir(args)

    def progress(gen, top, n_div):
        desc = "none" if top is None else gaopt.spec_to_dict(gaopt.decode_gene(top.gene, family))
        print(f"generation {gen}: best {desc}  diverged {n_div}", file=sys.stderr)

    best, history = gaopt.run_ga(family, datasets, gc, evaluator=evaluator, history_path=out / "history.jsonl", log=progress)
    _write_json(out / "best_spec.json", gaopt.spec_to_dict(best))
    config = dataclasses.asdict(gc)
    config["family"] = family
    config["surrogate"] = targets
    _write_json(out / "manifest.json", _manifest("optimize", config, [out / "history.jsonl", out / "best_spec.json"], started))
    print(json.dumps(gaopt.spec_to_dict(best)))
    return EXIT_OK


def cmd_transfer(args):
    cfg = Settings(args)
    started = time.perf_counter()
    model, _ = modelio.load(args.model)
    if model.family == "gbdt":
        raise BadSpec("transfer applies to neural models only")
    if model.horizon_hours != 1:
        raise HorizonMismatch(f"source model has horizon {model.horizon_hours}h, expected 1h")
    train_set = _load_split(args.data, "train")
    val_set = _load_split(args.data, "val")
    test_set = _load_split(args.data, "test")
    epochs = cfg["epochs"] or models.FINE_TUNE_EPOCHS[model.family]
    tc = models.TrainConfig(
        epochs, cfg["batch_size"], cfg["fine_tune_learning_rate"],
        shuffle_seed=substream_seed(cfg["seed"], "transfer", model.family),
    )
    tuned = models.fine_tune(model, train_set, config=tc, val_set=val_set)
    out = _out_dir(args)
    blob = modelio.save(tuned, out / "model.sepw")
    _write_text(out / "train_log.csv", _train_log_csv(tuned))
    bundle, _ = _report(tuned, blob, test_set, out / "report", cfg["repeats"], cfg["warmup"], cfg["seed"],
                        {"source_model_sha256": _sha256(args.model)})
    config = cfg.snapshot(["seed", "batch_size", "fine_tune_learning_rate"])
    config["epochs"] = epochs
    _write_json(out / "manifest.json", _manifest("transfer", config, [out / "model.sepw", out / "train_log.csv"], started))
    print(f"{tuned.family} {tuned.horizon_hours}h: test AUROC {bundle['auroc']:.4f}")
    return EXIT_OK


def cmd_evaluate(args):
    cfg = Settings(args)
    model, blob = modelio.load(args.model)
    test_set = _load_split(args.data, "test")
    if test_set.horizon_hours != model.horizon_hours:
        raise HorizonMismatch(f"model horizon {model.horizon_hours}h, data horizon {test_set.horizon_hours}h")
    _check_horizon(args, model.horizon_hours, "the model")
    out = _out_dir(args)
    bundle, prof = _report(model, blob, test_set, out, cfg["repeats"], cfg["warmup"], cfg["seed"])
    print(f"AUROC {bundle['auroc']:.4f}  AP {bundle['aupr']:.4f}  latency {prof.mean_latency:.4f} ms  size {prof.size_bytes} B")
    return EXIT_OK


def cmd_profile(args):
    cfg = Settings(args)
    model, blob = modelio.load(args.model)
    test_set = _load_split(args.data, "test")
    latency, n, w = evaluation.measure_latency(model, test_set.X, repeats=cfg["repeats"], warmup=cfg["warmup"])
    prof = evaluation.ResourceProfile(evaluation.measure_size(blob), latency, n, w)
    out = _out_dir(args)
    record = evaluation.profile_dict(prof)
    record.update(family=model.family, n_windows=len(test_set), size_kb=prof.size_bytes / 1024.0)
    _write_json(out / "profile.json", record)
    print(json.dumps(record))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _common(p, data=False, model=False):
    p.add_argument("--config", help="key = value settings file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--horizon", type=int, choices=windowing.HORIZONS)
    if data:
        p.add_argument("--data", help="preprocessed directory or CSV file")
    if model:
        p.add_argument("--model", required=True, help="model container file")


def build_parser():
    parser = argparse.ArgumentParser(prog="pulsegate", description="Heart-rate sepsis early warning toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic PSV cohort")
    _common(p)
    p.add_argument("--synthetic", help="synthetic cohort params file")
    p.add_argument("--n-patients", dest="n_patients", type=int)
    p.add_argument("--sepsis-fraction", dest="sepsis_fraction", type=float)
    p.add_argument("--drift-per-hour", dest="drift_per_hour", type=float)
    p.add_argument("--missing-rate", dest="missing_rate", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="ingest, window, split and balance")
    _common(p)
    p.add_argument("--psv-dir", dest="psv_dir")
    p.add_argument("--synthetic", help="synthetic cohort params file ('-' for defaults)")
    p.add_argument("--n-patients", dest="n_patients", type=int)
    p.add_argument("--sepsis-fraction", dest="sepsis_fraction", type=float)
    p.add_argument("--drift-per-hour", dest="drift_per_hour", type=float)
    p.add_argument("--target-prevalence", dest="target_prevalence", type=float)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train one model")
    _common(p, data=True)
    p.add_argument("--family", choices=models.FAMILIES)
    p.add_argument("--widths", type=_widths)
    p.add_argument("--spec", help="spec JSON, e.g. best_spec.json from optimize")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--num-leaves", dest="num_leaves", type=int)
    p.add_argument("--max-bin", dest="max_bin", type=int)
    p.add_argument("--gbdt-learning-rate", dest="gbdt_learning_rate", type=float)
    p.add_argument("--n-trees", dest="n_trees", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--warmup", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("optimize", help="genetic search over widths or boosting settings")
    _common(p, data=True)
    p.add_argument("--family", choices=sorted(gaopt.GENE_WIDTHS))
    p.add_argument("--surrogate", type=_widths, help="target values; skips training")
    p.add_argument("--population-size", dest="population_size", type=int)
    p.add_argument("--generations", type=int)
    p.add_argument("--crossover-prob", dest="crossover_prob", type=float)
    p.add_argument("--mutation-prob", dest="mutation_prob_per_bit", type=float)
    p.add_argument("--elite-count", dest="elite_count", type=int)
    p.add_argument("--candidate-epochs", dest="candidate_epochs", type=int)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("transfer", help="fine-tune a 1-hour model on 4-hour windows")
    _common(p, data=True, model=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--learning-rate", dest="fine_tune_learning_rate", type=float)
    p.add_argument("--repeats", type=int)
    p.add_argument("--warmup", type=int)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("evaluate", help="metrics, curves and resource profile on the test split")
    _common(p, data=True, model=True)
    p.add_argument("--repeats", type=int)
    p.add_argument("--warmup", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("profile", help="latency and size only")
    _common(p, data=True, model=True)
    p.add_argument("--repeats", type=int)
    p.add_argument("--warmup", type=int)
    p.set_defaults(func=cmd_profile)
    return parser


def exit_code_for(exc):
    if isinstance(exc, HorizonMismatch):
        return EXIT_HORIZON
    if isinstance(exc, AllDiverged):
        return EXIT_SEARCH
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    return 1


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "data", "unset") is None and args.command in ("train", "transfer", "evaluate", "profile"):
        parser.error("--data is required")
    try:
        return args.func(args)
    except (ConfigError, DataError, NumericError, AllDiverged, HorizonMismatch, OSError) as exc:
        print(f"pulsegate {args.command}: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
