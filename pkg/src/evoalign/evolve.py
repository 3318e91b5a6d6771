"""Evolutionary search over genomes.

One generation is evaluate -> log -> select -> repopulate. Survivors pass
unchanged into the next generation, so the best fitness never drops. During
generations 0 and 1 every layer of every genome is scored and each genome is
cut back to its best sub-network.

All genetic draws come from a single sequential generator; evaluation may run
on several threads but results are gathered in population order, so thread
count never changes a run.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .errors import ConfigError, MissingRegion, UnevaluatedPopulation
from .genome import (
    CONV_FILTERS,
    CONV_KERNEL,
    CONV_STRIDE,
    MAX_DEPTH,
    POOL_KERNEL,
    Genome,
    LayerGene,
    Lineage,
    param_count,
    random_genome,
    repair_filters,
    save_genome,
    truncate,
    validate,
)
from .metrics import ScoreSettings, evaluate_layers
from .rng import draw_id, make_rng

OPERATOR_ATTEMPTS = 50
EXPANSION_GENERATIONS = (0, 1)
TYPE_SWAP_PROB = 0.3
THREADS_ENV = "EVOALIGN_THREADS"


@dataclass(frozen=True)
class SearchConfig:
    region: str = "IT"
    population_size: int = 20
    generations: int = 100
    mutation_rate: float = 0.25
    crossover_rate: float = 0.5
    selection_fraction: float = 0.5
    n_seeds: int = 10
    master_seed: int = 0
    depth_range: tuple[int, int] = (2, 8)
    max_depth: int = MAX_DEPTH
    split_seed: int = 0
    train_fraction: float = 0.8
    lam: float = 1.0
    threads: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "depth_range", tuple(int(v) for v in self.depth_range))
        for name in ("mutation_rate", "crossover_rate", "selection_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.population_size < 4 or self.population_size % 2:
            raise ConfigError(f"population_size must be even and >= 4, got {self.population_size}")
        if self.generations < 1:
            raise ConfigError(f"generations must be >= 1, got {self.generations}")
        if self.n_seeds < 1:
            raise ConfigError(f"n_seeds must be >= 1, got {self.n_seeds}")
        if self.selection_fraction == 0:
            raise ConfigError("selection_fraction must keep at least one survivor")
        lo, hi = self.depth_range
        if not 1 <= lo <= hi <= self.max_depth:
            raise ConfigError(f"depth_range {self.depth_range} not within [1, {self.max_depth}]")
        if self.threads is not None and self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")

    @property
    def settings(self) -> ScoreSettings:
        return ScoreSettings(
            n_seeds=self.n_seeds,
            master_seed=self.master_seed,
            split_seed=self.split_seed,
            train_fraction=self.train_fraction,
            lam=self.lam,
        )

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["depth_range"] = list(self.depth_range)
        return d


def resolve_threads(requested: int | None = None) -> int:
    if requested is not None:
        return requested
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigError(f"{THREADS_ENV} must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


@dataclass(frozen=True)
class Member:
    genome: Genome
    fitness: float | None = None
    params: int = 0

    @property
    def evaluated(self) -> bool:
        return self.fitness is not None


@dataclass
class Population:
    generation: int
    members: list[Member]
    rng_label: str = "search"

    @property
    def size(self) -> int:
        return len(self.members)


@dataclass(frozen=True)
class GenerationLog:
    generation: int
    evaluations: int
    computed: int
    best_fitness: float
    mean_fitness: float
    members: tuple[dict[str, Any], ...]

    def to_json(self) -> str:
        return json.dumps(
            {
                "generation": self.generation,
                "evaluations": self.evaluations,
                "computed": self.computed,
                "best_fitness": self.best_fitness,
                "mean_fitness": self.mean_fitness,
                "members": list(self.members),
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "GenerationLog":
        d = json.loads(line)
        return cls(d["generation"], d["evaluations"], d["computed"], d["best_fitness"],
                   d["mean_fitness"], tuple(d["members"]))


@dataclass
class SearchResult:
    best: Genome
    best_fitness: float
    logs: list[GenerationLog] = field(default_factory=list)


# -- selection ---------------------------------------------------------------

def rank_key(m: Member) -> tuple[float, int, int]:
    return (-m.fitness, m.params, m.genome.id)


def select(members: Sequence[Member], fraction: float = 0.5) -> list[Member]:
    """Top ``ceil(size * fraction)`` members by fitness.

    Ties go to fewer parameters, then to the lower genome id.
    """
    missing = [m.genome.id for m in members if not m.evaluated]
    if missing:
        raise UnevaluatedPopulation(f"{len(missing)} member(s) lack fitness, e.g. genome {missing[0]:#x}")
    keep = math.ceil(len(members) * fraction)
    return sorted(members, key=rank_key)[:keep]


# -- operators ---------------------------------------------------------------

def _running_filters(layers: Sequence[LayerGene], upto: int) -> int:
    running = 0
    for g in layers[:upto]:
        if g.is_conv:
            running = max(running, g.filters)
    return running


def _random_layer(rng: np.random.Generator, running: int) -> LayerGene:
    if rng.random() < 0.6:
        kernel = int(rng.integers(CONV_KERNEL[0], CONV_KERNEL[1] + 1))
        stride = int(rng.integers(CONV_STRIDE[0], CONV_STRIDE[1] + 1))
        lo = running or CONV_FILTERS[0]
        hi = min(CONV_FILTERS[1], 2 * lo)
        return LayerGene.conv(kernel, stride, int(rng.integers(lo, hi + 1)))
    return LayerGene.pool(int(rng.integers(POOL_KERNEL[0], POOL_KERNEL[1] + 1)))


def _clamp(v: int, bounds: tuple[int, int]) -> int:
    return max(bounds[0], min(bounds[1], v))


def swap_type(gene: LayerGene, inherited_filters: int) -> LayerGene:
    """Conv <-> MaxPool with the nearest valid parameters."""
    if gene.is_conv:
        k = _clamp(gene.kernel, POOL_KERNEL)
        return LayerGene.pool(k)
    k = _clamp(gene.kernel, CONV_KERNEL)
    return LayerGene.conv(k, _clamp(gene.stride, CONV_STRIDE), inherited_filters or CONV_FILTERS[0])


def refine(gene: LayerGene, rng: np.random.Generator) -> LayerGene:
    """Nudge one parameter of a layer, clamped into its legal range."""
    if not gene.is_conv:
        return LayerGene.pool(POOL_KERNEL[0] + POOL_KERNEL[1] - gene.kernel)
    which = int(rng.integers(3))
    step = int(rng.choice((-2, -1, 1, 2)))
    if which == 0:
        return LayerGene.conv(_clamp(gene.kernel + step, CONV_KERNEL), gene.stride, gene.filters)
    if which == 1:
        return LayerGene.conv(gene.kernel, _clamp(gene.stride + (1 if step > 0 else -1), CONV_STRIDE), gene.filters)
    filters = gene.filters * 2 if step > 0 else gene.filters // 2
    return LayerGene.conv(gene.kernel, gene.stride, _clamp(filters, CONV_FILTERS))


def _propose(genome: Genome, rng: np.random.Generator, max_depth: int) -> tuple[tuple[LayerGene, ...], str] | None:
    layers = list(genome.layers)
    op = ("add", "modify", "remove")[int(rng.integers(3))]
    if op == "add":
        if len(layers) >= max_depth:
            return None
        pos = int(rng.integers(len(layers) + 1))
        layers.insert(pos, _random_layer(rng, _running_filters(layers, pos)))
        return repair_filters(layers), "add"
    if op == "remove":
        if len(layers) <= 1:
            return None
        del layers[int(rng.integers(len(layers)))]
        return repair_filters(layers), "remove"
    pos = int(rng.integers(len(layers)))
    if rng.random() < TYPE_SWAP_PROB:
        layers[pos] = swap_type(layers[pos], _running_filters(layers, pos))
        tag = "modify_type"
    else:
        layers[pos] = refine(layers[pos], rng)
        tag = "modify_param"
    return repair_filters(layers), tag


def mutate(genome: Genome, rng: np.random.Generator, input_shape: Sequence[int],
           max_depth: int = MAX_DEPTH, attempts: int = OPERATOR_ATTEMPTS) -> Genome:
    """Apply one of add / modify / remove, resampling until the result is
    valid and differs from the parent; falls back to a tagged clone."""
    for _ in range(attempts):
        proposal = _propose(genome, rng, max_depth)
        if proposal is None:
            continue
        layers, tag = proposal
        if layers == genome.layers:
            continue
        child = Genome(layers, len(layers) - 1, draw_id(rng), Lineage((genome.id,), f"mutate:{tag}"))
        if validate(child, input_shape, max_depth).ok:
            return child
    return Genome(genome.layers, genome.depth - 1, draw_id(rng), Lineage((genome.id,), "mutation_noop"))


def crossover(a: Genome, b: Genome, rng: np.random.Generator, input_shape: Sequence[int],
              max_depth: int = MAX_DEPTH, attempts: int = OPERATOR_ATTEMPTS) -> Genome:
    """Single-point crossover at one shared position: ``a[:cut] + b[cut:]``.

    Filter counts are repaired upward; after ``attempts`` invalid children
    the result is ``mutate(a)``.
    """
    for _ in range(attempts):
        cut = int(rng.integers(1, a.depth + 1))
        layers = repair_filters(a.layers[:cut] + b.layers[cut:])
        child = Genome(layers, len(layers) - 1, draw_id(rng), Lineage((a.id, b.id), f"crossover@{cut}"))
        if validate(child, input_shape, max_depth).ok:
            return child
    return mutate(a, rng, input_shape, max_depth)


def repopulate(survivors: Sequence[Member], config: SearchConfig, rng: np.random.Generator,
               input_shape: Sequence[int]) -> list[Member]:
    """Survivors unchanged, then offspring until the population is full.

    Each offspring is a crossover of two distinct survivors with probability
    ``crossover_rate`` (otherwise a clone of one), then mutated with
    probability ``mutation_rate``.
    """
    if not survivors:
        raise ValueError("cannot repopulate from an empty survivor set")
    out = list(survivors)
    k = len(survivors)
    while len(out) < config.population_size:
        if k >= 2 and rng.random() < config.crossover_rate:
            i, j = rng.choice(k, size=2, replace=False)
            a, b = survivors[int(i)].genome, survivors[int(j)].genome
            child = crossover(a, b, rng, input_shape, config.max_depth)
            child = replace(child, lineage=Lineage((a.id, b.id), "crossover"))
            tag = "crossover"
        else:
            parent = survivors[int(rng.integers(k))].genome
            child = Genome(parent.layers, parent.readout, draw_id(rng), Lineage((parent.id,), "clone"))
            tag = "clone"
        if rng.random() < config.mutation_rate:
            mutated = mutate(child, rng, input_shape, config.max_depth)
            op = mutated.lineage.operator
            child = replace(mutated, lineage=Lineage(child.lineage.parents, f"{tag}+{op}"))
        out.append(Member(child, None, param_count(child, input_shape)))
    return out


# -- evaluation --------------------------------------------------------------

class FitnessCache:
    """Aggregate fitness keyed by (id, layer prefix). Weights depend only on
    (seed, id, layer index), so a truncated genome reuses its parent's
    scores."""

    def __init__(self) -> None:
        self._store: dict[tuple[int, tuple[LayerGene, ...]], float] = {}

    def get(self, genome: Genome, layer: int) -> float | None:
        return self._store.get((genome.id, genome.layers[: layer + 1]))

    def put(self, genome: Genome, layer: int, value: float) -> None:
        self._store[(genome.id, genome.layers[: layer + 1])] = value

    def __len__(self) -> int:
        return len(self._store)


def _score_layers(genome: Genome, dataset, region: str, layers: list[int], settings: ScoreSettings) -> dict[int, float]:
    recs = evaluate_layers(genome, dataset, [region], layers, settings)
    return {li: recs[(region, li)].aggregate for li in layers}


def evaluate_population(
    genomes: Sequence[Genome],
    dataset,
    config: SearchConfig,
    expand: bool,
    cache: FitnessCache,
    threads: int = 1,
) -> tuple[list[dict[int, float]], int]:
    """Per-genome {layer: fitness}; every layer when ``expand`` else the
    readout. Returns the scores and how many (genome, layer) pairs were
    actually computed."""
    wanted = [list(range(g.depth)) if expand else [g.readout] for g in genomes]
    todo = [[li for li in ls if cache.get(g, li) is None] for g, ls in zip(genomes, wanted)]
    jobs = [(g, ls) for g, ls in zip(genomes, todo) if ls]
    settings = config.settings

    def run(job):
        g, ls = job
        return g, _score_layers(g, dataset, config.region, ls, settings)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    computed = 0
    for g, scores in results:
        for li, v in scores.items():
            cache.put(g, li, v)
            computed += 1
    return [{li: cache.get(g, li) for li in ls} for g, ls in zip(genomes, wanted)], computed


def expand_layers(genome: Genome, scores: dict[int, float]) -> tuple[Genome, float]:
    """Cut a genome back to its best-scoring layer (lowest index on ties)."""
    best = max(sorted(scores), key=lambda li: (scores[li], -li))
    return truncate(genome, best), scores[best]


def _log_entry(m: Member) -> dict[str, Any]:
    lin = m.genome.lineage or Lineage()
    return {
        "id": m.genome.id,
        "fitness": m.fitness,
        "param_count": m.params,
        "operator": lin.operator,
        "parents": list(lin.parents),
        "genome": m.genome.to_dict(),
    }


def _make_log(generation: int, members: Sequence[Member], evaluations: int, computed: int) -> GenerationLog:
    ranked = sorted(members, key=rank_key)
    fits = [m.fitness for m in ranked]
    return GenerationLog(
        generation,
        evaluations,
        computed,
        float(ranked[0].fitness),
        math.fsum(fits) / len(fits),
        tuple(_log_entry(m) for m in ranked),
    )


def initial_population(config: SearchConfig, input_shape: Sequence[int], rng: np.random.Generator) -> list[Member]:
    out = []
    for _ in range(config.population_size):
        g = random_genome(rng, config.depth_range, input_shape, max_depth=config.max_depth)
        out.append(Member(g, None, param_count(g, input_shape)))
    return out


def run_search(
    config: SearchConfig,
    dataset,
    run_dir: str | os.PathLike | None = None,
    on_generation: Callable[[GenerationLog], None] | None = None,
) -> SearchResult:
    """Evolve genomes against ``config.region`` of ``dataset``.

    With ``run_dir`` set, each generation is appended to
    ``generations.jsonl`` as soon as it is logged and ``best_genome.json``
    is rewritten, so an interrupted run leaves every finished generation on
    disk.
    """
    if config.region not in dataset.regions:
        raise MissingRegion(f"region {config.region!r} not in dataset regions {list(dataset.regions)}")
    input_shape = dataset.input_shape
    threads = resolve_threads(config.threads)
    rng = make_rng(config.master_seed, "search")
    cache = FitnessCache()
    members = initial_population(config, input_shape, rng)

    log_path = None
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "generations.jsonl"
        log_path.write_text("")

    result: SearchResult | None = None
    logs: list[GenerationLog] = []
    for gen in range(config.generations):
        expand = gen in EXPANSION_GENERATIONS
        genomes = [m.genome for m in members]
        scores, computed = evaluate_population(genomes, dataset, config, expand, cache, threads)
        evaluated = []
        for m, sc in zip(members, scores):
            if expand:
                g, fit = expand_layers(m.genome, sc)
            else:
                g, fit = m.genome, sc[m.genome.readout]
            evaluated.append(Member(g, fit, param_count(g, input_shape)))
        evaluations = sum(len(sc) for sc in scores)
        log = _make_log(gen, evaluated, evaluations, computed)
        logs.append(log)
        best = min(evaluated, key=rank_key)
        if result is None or best.fitness > result.best_fitness:
            result = SearchResult(best.genome, best.fitness, logs)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(log.to_json() + "\n")
            save_genome(result.best, run_dir / "best_genome.json")
        if on_generation is not None:
            on_generation(log)
        if gen + 1 < config.generations:
            survivors = select(evaluated, config.selection_fraction)
            members = repopulate(survivors, config, rng, input_shape)
    assert result is not None
    result.logs = logs
    return result


def edit_distance(a: Genome, b: Genome) -> int:
    """Levenshtein distance over layer genes; compares winners across runs."""
    prev = list(range(b.depth + 1))
    for i, ga in enumerate(a.layers, 1):
        cur = [i]
        for j, gb in enumerate(b.layers, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ga != gb)))
        prev = cur
    return prev[-1]


def read_logs(path: str | os.PathLike) -> list[GenerationLog]:
    with open(path, encoding="utf-8") as fh:
        return [GenerationLog.from_json(line) for line in fh if line.strip()]
