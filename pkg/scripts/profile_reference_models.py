"""Latency and size of the three published neural architectures plus a GBDT.

    python3 scripts/profile_reference_models.py [--windows 200] [--repeats 30]

Weights do not affect timing, so the networks are profiled untrained; the
GBDT is fitted briefly since its tree shapes do.
"""

import argparse

from pulsegate import boosting, evaluation, models
from pulsegate.windowing import SplitSpec, SyntheticCohortParams, make_splits, preprocess, synthesize_cohort


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--windows", type=int, default=200)
    ap.add_argument("--repeats", type=int, default=30)
    ap.add_argument("--warmup", type=int, default=5)
    args = ap.parse_args()

    ds, counts = preprocess(synthesize_cohort(SyntheticCohortParams(n_patients=1500, sepsis_fraction=0.15, seed=8)), 1)
    train, _, test = make_splits(ds, SplitSpec(seed=0), 0.30, counts)
    X = test.X[: args.windows]

    rows = []
    for family in ("lstm", "lstm_fcn", "mlp"):
        m = models.build(models.reference_spec(family))
        p = evaluation.profile(m, models.serialize(m), X, args.repeats, args.warmup)
        rows.append((family, m.parameter_count(), p))
    g = boosting.fit(train, boosting.GbdtParams())
    p = evaluation.profile(g, boosting.serialize_gbdt(g), X, args.repeats, args.warmup)
    rows.append(("gbdt", sum(t.n_leaves for t in g.trees), p))

    print(f"{len(X)} windows, {args.repeats} timed passes after {args.warmup} warm-up")
    print(f"{'family':<10}{'params/leaves':>14}{'size kB':>10}{'ms/window':>12}")
    for family, n, p in rows:
        print(f"{family:<10}{n:>14,}{p.size_bytes / 1024:>10.1f}{p.mean_latency:>12.4f}")


if __name__ == "__main__":
    main()
