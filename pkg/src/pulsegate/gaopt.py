"""Genetic search over layer widths (neural) or boosting hyperparameters.

Every searched parameter is one 8-bit group read big-endian. Fitness is a
within-generation rank average over validation performance, per-prediction
latency and serialized size; lower is better.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy.stats import rankdata

from . import boosting, evaluation, models
from .errors import AllDiverged, BadSpec, NonFiniteLoss, WidthMismatch
from .seeding import substream, substream_seed

BITS_PER_PARAM = 8
N_PARAMS = {"mlp": 3, "lstm": 4, "gbdt": 3}
GENE_WIDTHS = {f: n * BITS_PER_PARAM for f, n in N_PARAMS.items()}

LEAVES_OFFSET = 2
BINS_OFFSET = 8
LR_LO, LR_HI = 0.005, 0.3


@dataclass(frozen=True)
class Gene:
    bits: tuple

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(int(b) for b in self.bits))
        if any(b not in (0, 1) for b in self.bits):
            raise WidthMismatch("gene bits must be 0 or 1")

    def __len__(self):
        return len(self.bits)

    @property
    def array(self):
        return np.array(self.bits, dtype=np.uint8)

    def groups(self):
        """Raw 0-255 value of every 8-bit group, most significant bit first."""
        if len(self.bits) % BITS_PER_PARAM:
            raise WidthMismatch(f"{len(self.bits)} bits is not a whole number of bytes")
        return tuple(int(v) for v in np.packbits(self.array))

    @property
    def hex(self):
        return bytes(self.groups()).hex()

    @classmethod
    def from_groups(cls, values):
        raw = np.asarray(values, dtype=np.int64)
        if np.any((raw < 0) | (raw > 255)):
            raise WidthMismatch("group values must lie in 0..255")
        return cls(tuple(np.unpackbits(raw.astype(np.uint8))))

    @classmethod
    def from_hex(cls, text):
        return cls.from_groups(list(bytes.fromhex(text)))

    @classmethod
    def from_string(cls, text):
        return cls(tuple(int(c) for c in text if c in "01"))

    def __str__(self):
        return " ".join(
            "".join(map(str, self.bits[i:i + BITS_PER_PARAM])) for i in range(0, len(self.bits), BITS_PER_PARAM)
        )


def _check_width(gene: Gene, family):
    if family not in GENE_WIDTHS:
        raise BadSpec(f"no gene layout for family {family!r}")
    if len(gene) != GENE_WIDTHS[family]:
        raise WidthMismatch(f"{family} genes have {GENE_WIDTHS[family]} bits, got {len(gene)}")


def learning_rate_from_raw(raw):
    return LR_LO + raw * (LR_HI - LR_LO) / 255


def decode_gene(gene: Gene, family, n_trees=100):
    """ModelSpec for neural families, GbdtParams for ``gbdt``."""
    _check_width(gene, family)
    raw = gene.groups()
    if family == "gbdt":
        leaves, bins, lr = raw
        return boosting.GbdtParams(
            num_leaves=LEAVES_OFFSET + leaves,
            max_bin=BINS_OFFSET + bins,
            learning_rate=learning_rate_from_raw(lr),
            n_trees=n_trees,
        )
    return models.ModelSpec(family, tuple(max(1, r) for r in raw))


def encode_gene(spec, family) -> Gene:
    """Inverse of ``decode_gene`` wherever no clamping happened."""
    if family == "gbdt":
        lr_raw = round((spec.learning_rate - LR_LO) * 255 / (LR_HI - LR_LO))
        raw = (spec.num_leaves - LEAVES_OFFSET, spec.max_bin - BINS_OFFSET, lr_raw)
    else:
        raw = tuple(spec.layer_widths)
    gene = Gene.from_groups(raw)
    _check_width(gene, family)
    return gene


def spec_to_dict(spec):
    if isinstance(spec, boosting.GbdtParams):
        return {"family": "gbdt", **asdict(spec)}
    return spec.to_dict()


def spec_from_dict(d):
    d = dict(d)
    if d.get("family") == "gbdt":
        d.pop("family")
        return boosting.GbdtParams(**d)
    return models.ModelSpec.from_dict(d)


@dataclass(frozen=True)
class FitnessRecord:
    gene: Gene
    performance: float
    latency_ms: float
    size_bytes: int
    diverged: bool
    rank_avg: Optional[float] = None
    generation: int = 0
    index: int = 0
    train_losses: tuple = ()

    def to_json(self, family):
        return {
            "generation": self.generation,
            "index": self.index,
            "gene": self.gene.hex,
            "spec": spec_to_dict(decode_gene(self.gene, family)),
            "performance": _finite_or_none(self.performance),
            "latency_ms": _finite_or_none(self.latency_ms),
            "size_bytes": self.size_bytes,
            "diverged": self.diverged,
            "rank_avg": self.rank_avg,
        }


def _finite_or_none(v):
    return float(v) if v is not None and math.isfinite(v) else None


@dataclass(frozen=True)
class GaConfig:
    population_size: int = 20
    generations: int = 15
    crossover_prob: float = 0.7
    mutation_prob_per_bit: float = 0.02
    elite_count: int = 1
    candidate_epochs: int = 20
    seed: int = 0
    batch_size: int = 32
    learning_rate: float = 0.001
    gbdt_trees: int = 100
    # latency is re-measured per candidate, so keep it cheap by default
    latency_repeats: int = 5
    latency_warmup: int = 1
    latency_max_windows: int = 200

    def __post_init__(self):
        if self.population_size < 2:
            raise BadSpec("population_size must be >= 2")
        if self.generations < 1:
            raise BadSpec("generations must be >= 1")
        for name in ("crossover_prob", "mutation_prob_per_bit"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise BadSpec(f"{name} must lie in [0, 1], got {v}")
        if not 0 <= self.elite_count <= self.population_size:
            raise BadSpec("elite_count must lie in [0, population_size]")
        if self.candidate_epochs < 1:
            raise BadSpec("candidate_epochs must be >= 1")


def init_population(config: GaConfig, family):
    width = GENE_WIDTHS[family]
    rng = substream(config.seed, "ga", "init")
    bits = rng.integers(0, 2, size=(config.population_size, width))
    return [Gene(tuple(row)) for row in bits]


# ---------------------------------------------------------------------------
# candidate evaluation


def diverged(losses):
    """Early loss below late loss means the run went the wrong way."""
    if len(losses) < 2:
        return False
    return (losses[0] + losses[1]) / 2 < (losses[-2] + losses[-1]) / 2


def _failed(gene, losses=()):
    return FitnessRecord(gene, float("nan"), float("nan"), 0, True, train_losses=tuple(losses))


def train_candidate(gene, datasets, config: GaConfig, family):
    """Fit one candidate. Returns ``(model, losses)``; model is None if it blew up."""
    train_set, _ = datasets
    seed = substream_seed(config.seed, "candidate", family, gene.hex)
    spec = decode_gene(gene, family, n_trees=config.gbdt_trees)
    if family == "gbdt":
        model = boosting.fit(train_set, spec)
        return model, list(model.train_log)
    model = models.build(spec, seed=seed, horizon=train_set.horizon_hours)
    cfg = models.TrainConfig(
        config.candidate_epochs, config.batch_size, config.learning_rate, shuffle_seed=seed
    )
    try:
        models.train(model, train_set, None, cfg)
    except NonFiniteLoss:
        return None, list(model.train_log)
    return model, list(model.train_log)


def measure_candidate(gene, model, losses, datasets, config: GaConfig, family) -> FitnessRecord:
    _, val_set = datasets
    if model is None or (family != "gbdt" and diverged(losses)):
        return _failed(gene, losses)
    if family == "gbdt":
        scores = boosting.predict_proba(model, val_set.X)
        blob = boosting.serialize_gbdt(model)
    else:
        scores = models.predict_proba(model, val_set.X)
        blob = models.serialize(model)
    if not np.all(np.isfinite(scores)):
        return _failed(gene, losses)
    op = evaluation.threshold_at_sensitivity(scores, val_set.y, 0.85)
    windows = val_set.X[: config.latency_max_windows]
    latency, _, _ = evaluation.measure_latency(
        model, windows, repeats=config.latency_repeats, warmup=config.latency_warmup
    )
    return FitnessRecord(
        gene,
        performance=op.accuracy + op.specificity,
        latency_ms=latency,
        size_bytes=evaluation.measure_size(blob),
        diverged=False,
        train_losses=tuple(losses),
    )


def evaluate_candidate(gene, datasets, config: GaConfig, family) -> FitnessRecord:
    """Train, gate on divergence, then score on the validation split."""
    _check_width(gene, family)
    model, losses = train_candidate(gene, datasets, config, family)
    return measure_candidate(gene, model, losses, datasets, config, family)


def surrogate_evaluator(targets, family="mlp"):
    """Deterministic stand-in fitness with its optimum at ``targets``.

    Distance is the summed absolute width error; a tiny tie-break on the gene
    value keeps every distinct gene distinct in rank.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n_bits = GENE_WIDTHS[family]

    def evaluate(gene, datasets=None, config=None, fam=family):
        raw = np.asarray(gene.groups(), dtype=np.int64)
        if family != "gbdt":
            raw = np.maximum(raw, 1)
        tie = int(gene.hex, 16) / 2.0 ** (n_bits + 1)
        d = float(np.abs(raw - targets).sum()) + tie
        size = int(round(d * 2.0 ** (n_bits + 2)))
        return FitnessRecord(gene, performance=-d, latency_ms=d, size_bytes=size, diverged=False)

    return evaluate


# ---------------------------------------------------------------------------
# ranking and operators


def rank_average_fitness(records, population_size=None):
    """Return copies of ``records`` with ``rank_avg`` filled in.

    Rank 1 is best: highest performance, lowest latency, smallest size. Ties
    share the mean of their positions. Diverged records get ``population_size + 1``.
    """
    records = list(records)
    worst = float((population_size or len(records)) + 1)
    live = [i for i, r in enumerate(records) if not r.diverged]
    if not live:
        raise AllDiverged("every candidate diverged")
    perf = np.array([records[i].performance for i in live], dtype=np.float64)
    lat = np.array([records[i].latency_ms for i in live], dtype=np.float64)
    size = np.array([records[i].size_bytes for i in live], dtype=np.float64)
    avg = (rankdata(-perf, "average") + rankdata(lat, "average") + rankdata(size, "average")) / 3.0
    out = [replace(r, rank_avg=worst) for r in records]
    for i, a in zip(live, avg):
        out[i] = replace(records[i], rank_avg=float(a))
    return out


def selection_weights(records):
    r = np.array([rec.rank_avg for rec in records], dtype=np.float64)
    return (r.max() - r) + 1.0


def roulette_select(records, rng):
    w = selection_weights(records)
    return records[int(rng.choice(len(records), p=w / w.sum()))].gene


def crossover(a: Gene, b: Gene, rng, prob=1.0):
    """Single-point crossover; returns the parents unchanged with probability ``1 - prob``."""
    if len(a) != len(b):
        raise WidthMismatch(f"cannot cross genes of width {len(a)} and {len(b)}")
    if len(a) < 2 or rng.random() >= prob:
        return a, b
    cut = int(rng.integers(1, len(a)))
    return Gene(a.bits[:cut] + b.bits[cut:]), Gene(b.bits[:cut] + a.bits[cut:])


def mutate(gene: Gene, rng, prob):
    flips = rng.random(len(gene)) < prob
    return Gene(tuple(np.bitwise_xor(gene.array, flips.astype(np.uint8))))


# ---------------------------------------------------------------------------
# driver


def _thread_count():
    try:
        return max(1, int(os.environ.get("PULSEGATE_THREADS", "1")))
    except ValueError:
        return 1


def _evaluate_generation(genes, datasets, config, family, evaluator, cache, threads):
    todo = [g for g in dict.fromkeys(genes) if g not in cache]
    if evaluator is not None:
        for g in todo:
            cache[g] = evaluator(g, datasets, config)
    elif todo:
        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                fitted = list(pool.map(lambda g: train_candidate(g, datasets, config, family), todo))
        else:
            fitted = [train_candidate(g, datasets, config, family) for g in todo]
        # timing runs one candidate at a time, never alongside training threads
        for g, (model, losses) in zip(todo, fitted):
            cache[g] = measure_candidate(g, model, losses, datasets, config, family)
    return [cache[g] for g in genes]


def _next_generation(ranked, config, family, rng):
    order = sorted(range(len(ranked)), key=lambda i: (ranked[i].rank_avg, i))
    elites = [ranked[i].gene for i in order[: config.elite_count] if not ranked[i].diverged]
    nxt = list(dict.fromkeys(elites))
    seen = set(nxt)
    while len(nxt) < config.population_size:
        a = roulette_select(ranked, rng)
        b = roulette_select(ranked, rng)
        for child in crossover(a, b, rng, config.crossover_prob):
            child = mutate(child, rng, config.mutation_prob_per_bit)
            # duplicates would share ranks and waste an evaluation slot
            tries = 0
            while child in seen and tries < 64:
                child = mutate(child, rng, max(config.mutation_prob_per_bit, 1.0 / len(child)))
                tries += 1
            if child in seen:
                child = Gene(tuple(rng.integers(0, 2, len(child))))
            if child not in seen and len(nxt) < config.population_size:
                nxt.append(child)
                seen.add(child)
    return nxt


def run_ga(
    family,
    datasets,
    config: GaConfig,
    evaluator: Optional[Callable] = None,
    history_path=None,
    log: Optional[Callable] = None,
):
    """Evolve ``config.generations`` populations.

    Returns ``(best_spec, history)`` where history holds one ranked list of
    FitnessRecord per generation. ``evaluator(gene, datasets, config)`` can
    replace real training (surrogate mode).
    """
    if family not in GENE_WIDTHS:
        raise BadSpec(f"no gene layout for family {family!r}")
    rng = substream(config.seed, "ga", "evolve")
    population = list(dict.fromkeys(init_population(config, family)))
    while len(population) < config.population_size:
        population.append(Gene(tuple(rng.integers(0, 2, GENE_WIDTHS[family]))))
    cache = {}
    threads = _thread_count()
    history = []
    best = None
    for gen in range(config.generations):
        records = _evaluate_generation(population, datasets, config, family, evaluator, cache, threads)
        records = [replace(r, generation=gen, index=i) for i, r in enumerate(records)]
        try:
            ranked = rank_average_fitness(records, config.population_size)
        except AllDiverged:
            ranked = [replace(r, rank_avg=float(config.population_size + 1)) for r in records]
        history.append(ranked)
        for r in ranked:
            if r.diverged:
                continue
            # ties go to the later generation, which has seen more competition
            if best is None or (r.rank_avg, -r.generation) < (best.rank_avg, -best.generation):
                best = r
        if log is not None:
            live = [r for r in ranked if not r.diverged]
            top = min(live, key=lambda r: r.rank_avg) if live else None
            log(gen, top, sum(r.diverged for r in ranked))
        if gen + 1 < config.generations:
            population = _next_generation(ranked, config, family, rng)
    if history_path is not None:
        write_history(history, family, history_path)
    if best is None:
        raise AllDiverged("every candidate in every generation diverged")
    return decode_gene(best.gene, family, n_trees=config.gbdt_trees), history


def write_history(history, family, path):
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for generation in history:
            for rec in generation:
                fh.write(json.dumps(rec.to_json(family), sort_keys=True) + "\n")
    os.replace(tmp, path)


def read_history(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
