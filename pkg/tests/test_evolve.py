import math

import pytest
from hypothesis import given, settings, strategies as st

from evoalign.errors import ConfigError, MissingRegion, UnevaluatedPopulation
from evoalign.evolve import (
    FitnessCache,
    GenerationLog,
    Member,
    SearchConfig,
    crossover,
    edit_distance,
    expand_layers,
    mutate,
    read_logs,
    refine,
    repopulate,
    resolve_threads,
    run_search,
    select,
    swap_type,
)
from evoalign.genome import Genome, LayerGene, random_genome, validate
from evoalign.rng import make_rng
from conftest import SMALL_SHAPE

SHAPE = (3, 32, 32)


def _pop(rng, n, shape=SHAPE):
    out = []
    for _ in range(n):
        g = random_genome(rng, (1, 6), shape)
        out.append(Member(g, float(rng.integers(0, 5)) / 4, int(rng.integers(1, 4))))
    return out


# -- selection -------------------------------------------------------------------

def test_select_examples():
    g = lambda i: Genome((LayerGene.conv(3, 1, 64),), 0, i)
    ms = [Member(g(1), 0.2, 10), Member(g(2), 0.9, 10), Member(g(3), 0.5, 5), Member(g(4), 0.5, 3)]
    assert [m.genome.id for m in select(ms)] == [2, 4]
    assert [m.genome.id for m in select(ms, 0.75)] == [2, 4, 3]
    assert len(select(ms[:3], 0.5)) == 2  # ceil
    with pytest.raises(UnevaluatedPopulation):
        select(ms + [Member(g(5))])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(1, 3), st.integers(0, 10**6)),
                min_size=1, max_size=30, unique_by=lambda t: t[2]),
       st.sampled_from([0.25, 0.5, 1.0]))
def test_select_equals_full_sort(rows, frac):
    ms = [Member(Genome((LayerGene.conv(3, 1, 64),), 0, i), f / 3, p) for f, p, i in rows]
    oracle = sorted(ms, key=lambda m: (-m.fitness, m.params, m.genome.id))[: math.ceil(len(ms) * frac)]
    assert select(ms, frac) == oracle
    assert select(list(reversed(ms)), frac) == oracle


# -- operators -------------------------------------------------------------------

def test_swap_type_clamps():
    assert swap_type(LayerGene.conv(9, 4, 128), 128) == LayerGene.pool(3)
    assert swap_type(LayerGene.conv(2 + 1, 1, 64), 64) == LayerGene.pool(3)
    assert swap_type(LayerGene.pool(2), 256) == LayerGene.conv(3, 2, 256)
    assert swap_type(LayerGene.pool(3), 0) == LayerGene.conv(3, 3, 64)


def test_refine_stays_in_range(rng):
    for _ in range(500):
        g = refine(LayerGene.conv(int(rng.integers(3, 12)), int(rng.integers(1, 5)), 64 * int(rng.integers(1, 9))), rng)
        assert g.is_conv and not g.range_problems()
    assert refine(LayerGene.pool(2), rng) == LayerGene.pool(3)


def test_mutation_and_crossover_validity_fuzz():
    rng = make_rng(11, "fuzz")
    pop = [random_genome(rng, (1, 8), SHAPE) for _ in range(40)]
    for _ in range(1000):
        a, b = pop[int(rng.integers(40))], pop[int(rng.integers(40))]
        m = mutate(a, rng, SHAPE)
        c = crossover(a, b, rng, SHAPE)
        for child in (m, c):
            assert validate(child, SHAPE).ok
            assert child.readout == child.depth - 1
        assert m.layers != a.layers or m.lineage.operator == "mutation_noop"
        assert m.lineage.parents == (a.id,)


def test_crossover_examples(rng):
    a = Genome((LayerGene.conv(3, 1, 64), LayerGene.pool(2), LayerGene.conv(3, 1, 128)), 2, 1)
    c = crossover(a, a, rng, SHAPE)
    assert c.layers == a.layers and c.id != a.id and c.lineage.parents == (1, 1)
    x = Genome((LayerGene.conv(3, 1, 64), LayerGene.conv(3, 1, 128)), 1, 2)
    y = Genome((LayerGene.conv(3, 1, 64), LayerGene.conv(3, 1, 256)), 1, 3)
    # cut 1 -> [f64, f256]; cut 2 -> x itself
    seen = {}
    for _ in range(40):
        c = crossover(x, y, rng, SHAPE)
        seen[c.lineage.operator] = c.conv_filters()
    assert seen == {"crossover@1": [64, 256], "crossover@2": [64, 128]}
    x2 = Genome((LayerGene.conv(3, 1, 256), LayerGene.conv(3, 1, 256)), 1, 4)
    assert crossover(x2, y, rng, SHAPE).conv_filters() == [256, 256]  # repaired upward


def test_mutation_at_max_depth(rng):
    deep = Genome((LayerGene.conv(3, 1, 64),) * 12, 11, 1)
    assert validate(deep, SHAPE).ok
    for _ in range(50):
        child = mutate(deep, rng, SHAPE)
        assert child.depth <= 12 and validate(child, SHAPE).ok


def test_operator_frequencies():
    rng = make_rng(5, "freq")
    cfg = SearchConfig(population_size=20)
    survivors = _pop(rng, 10)
    n_cross = n_mut = total = 0
    for _ in range(100):
        for m in repopulate(survivors, cfg, rng, SHAPE)[10:]:
            op = m.genome.lineage.operator
            total += 1
            n_cross += op.startswith("crossover")
            n_mut += "+" in op
    for count, p in ((n_cross, 0.5), (n_mut, 0.25)):
        assert abs(count - total * p) <= 3 * math.sqrt(total * p * (1 - p))


def test_repopulate_counts_and_degenerate_rates(rng):
    survivors = _pop(rng, 6)
    for cr, mr, ops in ((0.0, 0.0, {"clone"}), (1.0, 0.0, {"crossover"})):
        out = repopulate(survivors, SearchConfig(population_size=12, crossover_rate=cr, mutation_rate=mr), rng, SHAPE)
        assert len(out) == 12 and out[:6] == survivors
        assert {m.genome.lineage.operator for m in out[6:]} == ops
        assert all(m.fitness is None for m in out[6:])
    out = repopulate(survivors, SearchConfig(population_size=12, mutation_rate=1.0), rng, SHAPE)
    assert all("+" in m.genome.lineage.operator for m in out[6:])
    one = repopulate(survivors[:1], SearchConfig(population_size=4, crossover_rate=1.0), rng, SHAPE)
    assert all(m.genome.lineage.operator.startswith("clone") for m in one[1:])


# -- expansion, config, logs -----------------------------------------------------

def test_expand_layers_picks_best_lowest():
    g = Genome((LayerGene.conv(3, 1, 64), LayerGene.pool(2), LayerGene.conv(3, 1, 64)), 2, 9)
    t, fit = expand_layers(g, {0: 0.1, 1: 0.4, 2: 0.4})
    assert t.depth == 2 and t.readout == 1 and fit == 0.4 and t.id == 9


def test_fitness_cache_shares_prefixes():
    g = Genome((LayerGene.conv(3, 1, 64), LayerGene.pool(2)), 1, 9)
    c = FitnessCache()
    c.put(g, 0, 0.3)
    assert c.get(Genome(g.layers[:1], 0, 9), 0) == 0.3
    assert c.get(Genome(g.layers[:1], 0, 8), 0) is None


def test_config_validation(monkeypatch):
    for bad in ({"population_size": 5}, {"mutation_rate": 1.5}, {"depth_range": (0, 3)}, {"threads": 0}):
        with pytest.raises(ConfigError):
            SearchConfig(**bad)
    monkeypatch.setenv("EVOALIGN_THREADS", "3")
    assert resolve_threads() == 3 and resolve_threads(2) == 2
    monkeypatch.setenv("EVOALIGN_THREADS", "x")
    with pytest.raises(ConfigError):
        resolve_threads()


def test_generation_log_json_roundtrip():
    log = GenerationLog(3, 12, 5, 0.5, 0.25, ({"id": 1, "fitness": 0.5},))
    assert GenerationLog.from_json(log.to_json()) == log


# -- search ----------------------------------------------------------------------

def _cfg(**kw):
    base = dict(region="IT", population_size=4, generations=4, n_seeds=1, depth_range=(1, 4), threads=1)
    base.update(kw)
    return SearchConfig(**base)


def test_search_properties(small_dataset, tmp_path):
    res = run_search(_cfg(), small_dataset, tmp_path)
    logs = read_logs(tmp_path / "generations.jsonl")
    assert [l.generation for l in logs] == [0, 1, 2, 3] and logs == res.logs
    bests = [l.best_fitness for l in logs]
    assert all(b2 >= b1 for b1, b2 in zip(bests, bests[1:]))
    assert res.best_fitness == bests[-1]
    for log in logs:
        depths = [len(m["genome"]["layers"]) for m in log.members]
        assert len(log.members) == 4
        if log.generation >= 2:
            assert log.evaluations == 4
        else:
            assert log.evaluations >= sum(depths)  # truncation only shortens genomes
        for m in log.members:
            g = Genome.from_dict(m["genome"])
            assert validate(g, SMALL_SHAPE).ok and g.readout == g.depth - 1
    assert (tmp_path / "best_genome.json").exists()


def test_search_thread_count_invariant(small_dataset, tmp_path):
    run_search(_cfg(threads=1), small_dataset, tmp_path / "a")
    run_search(_cfg(threads=3), small_dataset, tmp_path / "b")
    a = (tmp_path / "a" / "generations.jsonl").read_bytes()
    assert a == (tmp_path / "b" / "generations.jsonl").read_bytes()
    run_search(_cfg(threads=1, master_seed=1), small_dataset, tmp_path / "c")
    assert a != (tmp_path / "c" / "generations.jsonl").read_bytes()


def test_search_missing_region(small_dataset):
    with pytest.raises(MissingRegion):
        run_search(_cfg(region="PPA"), small_dataset)


def test_edit_distance():
    c, p = LayerGene.conv(3, 1, 64), LayerGene.pool(2)
    g = lambda *ls: Genome(ls, len(ls) - 1, 1)
    assert edit_distance(g(c, p), g(c, p)) == 0
    assert edit_distance(g(c, p), g(c, LayerGene.pool(3))) == 1
    assert edit_distance(g(c), g(c, p, c)) == 2
    assert edit_distance(g(p, c), g(c, p)) == 2
