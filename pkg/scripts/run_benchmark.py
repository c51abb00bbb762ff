"""Seeded synthetic benchmark: GA-picked LSTM, GA-picked GBDT, 1h -> 4h transfer.

    python3 scripts/run_benchmark.py --out runs/bench [--patients 2000] [--full-search]

Writes ``results.json`` plus the two GA histories. By default the searches use
a small budget so the run finishes in a few minutes; ``--full-search`` uses the
GaConfig defaults (20 x 15, 20 candidate epochs), which takes hours.
"""

import argparse
import json
import time
from pathlib import Path

from pulsegate import boosting, evaluation, gaopt, models
from pulsegate.windowing import LabeledDataset, SplitSpec, SyntheticCohortParams, make_splits, preprocess, synthesize_cohort


def splits(horizon, n_patients, seed):
    params = SyntheticCohortParams(n_patients=n_patients, sepsis_fraction=0.15, drift_per_hour=2.0, seed=seed)
    ds, counts = preprocess(synthesize_cohort(params), horizon)
    train, val, test = make_splits(ds, SplitSpec(seed=5), 0.30, counts)
    return train, val, test, counts


def auroc(scores, labels):
    return evaluation.roc_auc(scores, labels)[1]


def progress(family):
    def log(gen, top, n_diverged):
        best = gaopt.spec_to_dict(gaopt.decode_gene(top.gene, family)) if top else "-"
        print(f"  {family} gen {gen}: {best} diverged {n_diverged}", flush=True)

    return log


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/bench"))
    ap.add_argument("--patients", type=int, default=2000)
    ap.add_argument("--cohort-seed", type=int, default=11)
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--full-search", action="store_true")
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()

    train, val, test, counts = splits(1, args.patients, args.cohort_seed)
    print(f"windows {counts.windows_balanced} (train {len(train)}, val {len(val)}, test {len(test)})")

    if args.full_search:
        lstm_cfg, gbdt_cfg, search_train = gaopt.GaConfig(seed=1), gaopt.GaConfig(seed=2), train
    else:
        lstm_cfg = gaopt.GaConfig(population_size=6, generations=3, candidate_epochs=5, seed=1,
                                  latency_repeats=3, latency_max_windows=50)
        gbdt_cfg = gaopt.GaConfig(population_size=6, generations=3, seed=2, latency_repeats=3, latency_max_windows=50)
        search_train = LabeledDataset(train.windows[::2], 1)

    spec, _ = gaopt.run_ga("lstm", (search_train, val), lstm_cfg, history_path=args.out / "lstm_history.jsonl",
                           log=progress("lstm"))
    lstm = models.build(spec, seed=3)
    models.train(lstm, train, val, models.TrainConfig(args.epochs, shuffle_seed=4))
    auc1 = auroc(models.predict_proba(lstm, test.X), test.y)
    print(f"LSTM {spec.layer_widths}: 1h AUROC {auc1:.3f}")

    gparams, _ = gaopt.run_ga("gbdt", (train, val), gbdt_cfg, history_path=args.out / "gbdt_history.jsonl",
                              log=progress("gbdt"))
    gbdt = boosting.fit(train, gparams)
    auc_gbdt = auroc(boosting.predict_proba(gbdt, test.X), test.y)
    print(f"GBDT {gparams}: AUROC {auc_gbdt:.3f}")

    train4, val4, test4, _ = splits(4, args.patients, args.cohort_seed)
    untuned = auroc(models.predict_proba(lstm, test4.X), test4.y)
    tuned = models.fine_tune(lstm, train4, config=models.TrainConfig(
        models.FINE_TUNE_EPOCHS["lstm"], learning_rate=models.FINE_TUNE_LEARNING_RATE, shuffle_seed=6), val_set=val4)
    auc4 = auroc(models.predict_proba(tuned, test4.X), test4.y)
    print(f"LSTM 4h AUROC {auc4:.3f} (untuned {untuned:.3f}, gap {auc1 - auc4:.3f})")

    results = {
        "counts": counts.as_dict(),
        "lstm_spec": spec.to_dict(),
        "gbdt_params": gaopt.spec_to_dict(gparams),
        "lstm_auroc_1h": auc1,
        "gbdt_auroc_1h": auc_gbdt,
        "lstm_auroc_4h_untuned": untuned,
        "lstm_auroc_4h": auc4,
        "elapsed_s": round(time.perf_counter() - t0, 1),
        "full_search": args.full_search,
    }
    (args.out / "results.json").write_text(json.dumps(results, indent=2, sort_keys=True))
    print(f"done in {results['elapsed_s']}s -> {args.out / 'results.json'}")


if __name__ == "__main__":
    main()
