import itertools
import random
import zlib

import numpy as np
import pytest

from alphamine.engine import (
    GenePool,
    Individual,
    Miner,
    MiningError,
    QdArchive,
    SearchConfig,
    diverse_subset,
    format_library,
    motivation_study,
    parse_library,
    qd_accept,
    reproduce,
    sample_random_formulas,
    warm_start_init,
)
from alphamine.evaluation import Evaluator, PcaError, first_pc_scores, ic, pca_similarity, similarity
from alphamine.formula import enumerate_depth1, parse, to_text


class TableMiner:
    """Miner stand-in whose fitness comes from a lookup (default: a text hash)."""

    def __init__(self, ev, table=None, genes=()):
        self.ev = ev
        self.table = dict(table or {})
        self.pool = GenePool()
        if genes:
            self.pool.by_depth[1] = [Individual(g, 0.05) for g in genes]
        self.seen = []

    def _fit(self, text):
        if text in self.table:
            return self.table[text]
        return (zlib.crc32(text.encode()) % 10_007) / 100_070.0

    def evaluate(self, formulas):
        self.seen.extend(to_text(f) for f in formulas)
        return [Individual(f, self._fit(to_text(f)), 1) for f in formulas]


@pytest.fixture(scope="module")
def small_ev(small_ds):
    return Evaluator(small_ds)


# -- config ------------------------------------------------------------------


def test_search_config_validation():
    assert SearchConfig().validate() == []
    errs = SearchConfig(warm_start_k=0, sim_max=0.0, pca_threshold=1.5, workers=0).validate()
    assert len(errs) == 4
    with pytest.raises(MiningError):
        Miner(SearchConfig(population_size=1), None)


# -- warm start --------------------------------------------------------------


def test_warm_start_keeps_top_slice(small_ev):
    genes = enumerate_depth1()[:40]
    m = TableMiner(small_ev, genes=genes)
    cfg = SearchConfig(population_size=5, warm_start_k=4)
    pop = warm_start_init(2, m.pool, cfg, m, random.Random(0))
    assert len(m.seen) == 20 and len(set(m.seen)) == 20
    expect = sorted(m.seen, key=lambda t: (-m._fit(t), t))[:5]
    assert [i.text for i in pop] == expect
    assert all(i.depth == 2 for i in pop)


def test_warm_start_k1_is_dedup_only(small_ev):
    genes = enumerate_depth1()[:40]
    m = TableMiner(small_ev, genes=genes)
    pop = warm_start_init(2, m.pool, SearchConfig(population_size=8, warm_start_k=1), m, random.Random(1))
    assert sorted(i.text for i in pop) == sorted(m.seen)


def test_warm_start_selection_beats_generation_mean(small_ev):
    genes = enumerate_depth1()[:60]
    for seed in range(50):
        m = TableMiner(small_ev, genes=genes)
        pop = warm_start_init(2, m.pool, SearchConfig(population_size=10, warm_start_k=5), m, random.Random(seed))
        assert np.mean([i.fitness for i in pop]) >= np.mean([m._fit(t) for t in m.seen])


def test_warm_start_short_supply_warns(small_ev, caplog):
    m = TableMiner(small_ev, genes=[parse("div(vwap,close)")])
    # one gene, depth-1 root over it: far fewer than K x size distinct formulas exist
    cfg = SearchConfig(population_size=500, warm_start_k=5)
    pop = warm_start_init(2, m.pool, cfg, m, random.Random(0), max_attempts_factor=2)
    assert 0 < len(pop) <= 500
    assert "distinct candidates" in caplog.text


# -- replacement -------------------------------------------------------------


def _pair_setup(small_ev, parent_fit, child_fit):
    """Two depth-2 parents; every other formula scores ``child_fit``."""
    p1 = parse("div(sub(close,open),sub(high,low))")
    p2 = parse("mul(ts_mean(volume,5),cs_rank(vwap))")
    table = {to_text(p1): parent_fit[0], to_text(p2): parent_fit[1]}
    m = TableMiner(small_ev, table)
    m._fit = lambda t: table.get(t, child_fit)
    return m, [Individual(p1, parent_fit[0]), Individual(p2, parent_fit[1])]


def test_weaker_children_leave_pair_unchanged(small_ev):
    m, pop = _pair_setup(small_ev, (0.05, 0.04), 0.01)
    archive = QdArchive(small_ev.ds.shape[0])
    new = reproduce(pop, archive, SearchConfig(population_size=2), m, random.Random(0))
    assert [i.text for i in new] == [i.text for i in pop]
    assert len(archive) == 0


def test_stronger_child_replaces_pair(small_ev):
    m, pop = _pair_setup(small_ev, (0.05, 0.04), 0.08)
    archive = QdArchive(small_ev.ds.shape[0])
    new = reproduce(pop, archive, SearchConfig(population_size=2), m, random.Random(0))
    assert {i.text for i in new}.isdisjoint({i.text for i in pop})
    # a sibling too close to the accepted child is zeroed but keeps its slot
    assert max(i.fitness for i in new) == 0.08
    assert {i.fitness for i in new} <= {0.08, 0.0}
    assert len(archive) >= 1


def test_archive_rejection_zeroes_child_and_keeps_parents(small_ev):
    m, pop = _pair_setup(small_ev, (0.05, 0.04), 0.08)
    cfg = SearchConfig(population_size=2)
    probe = QdArchive(small_ev.ds.shape[0])
    kids = reproduce(pop, probe, cfg, m, random.Random(0))
    # same rng: the same children come out, and now the archive already holds them
    new = reproduce(pop, probe, cfg, m, random.Random(0))
    assert [i.text for i in new] == [i.text for i in pop]
    assert probe.rejections.get("similar", 0) >= 1
    assert {i.text for i in kids} != {i.text for i in pop}


def test_odd_population_keeps_size(small_ev):
    genes = enumerate_depth1()
    rng = random.Random(3)
    m = TableMiner(small_ev, genes=genes[:50])
    pop = warm_start_init(2, m.pool, SearchConfig(population_size=7, warm_start_k=2), m, rng)
    archive = QdArchive(small_ev.ds.shape[0])
    for _ in range(5):
        pop = reproduce(pop, archive, SearchConfig(population_size=7), m, rng)
        assert len(pop) == 7


def test_reproduce_invariants_real_fitness(small_ds, small_ev):
    cfg = SearchConfig(population_size=40, warm_start_k=3, mutation_prob=0.3)
    with Miner(cfg, small_ds, small_ev) as m:
        m.seed_depth1()
        rng = random.Random(5)
        pop = m.warm_start_init(2, rng)
        best = max(i.fitness for i in pop)
        sizes = [len(m.archive)]
        for _ in range(15):
            pop = m.reproduce(pop, rng)
            texts = [i.text for i in pop]
            assert len(pop) == 40 and len(set(texts)) == 40
            assert all(i.depth <= 2 for i in pop)
            now = max(i.fitness for i in pop)
            assert now >= best
            best = now
            sizes.append(len(m.archive))
        assert sizes == sorted(sizes)
        _assert_archive_invariant(m.archive)


def _assert_archive_invariant(archive):
    for a, b in itertools.combinations(archive.members, 2):
        try:
            sim = pca_similarity(a.pc, b.pc)
        except PcaError:  # too little overlap counts as dissimilar
            continue
        assert sim < archive.pca_threshold


# -- QD archive --------------------------------------------------------------


def test_qd_accept_cases(small_ds, small_ev):
    archive = QdArchive(small_ds.shape[0])
    f = parse("ts_mean(div(vwap,close),5)")
    a = Individual(f, 0.05)
    assert qd_accept(a, archive, small_ev)
    assert not qd_accept(Individual(f, 0.05), archive, small_ev)
    assert archive.rejections["similar"] == 1

    # perturb the alpha slightly and confirm the screen sees it as a near copy
    base = small_ev.alpha(f).values
    noisy = base + np.random.default_rng(0).normal(0, 1e-4 * np.nanstd(base), base.shape)
    pc_noisy = first_pc_scores(noisy)
    assert pca_similarity(pc_noisy, a.pc) >= 0.9
    assert not qd_accept(Individual(parse("ts_mean(div(vwap,close),10)"), 0.05, 1, pc_noisy), archive, small_ev)

    assert qd_accept(Individual(parse("ts_std(volume,20)"), 0.05), archive, small_ev)
    assert len(archive) == 2


def test_qd_accept_pc_failure(small_ev):
    archive = QdArchive(small_ev.ds.shape[0])
    assert not qd_accept(Individual(parse("sign(volume)"), 0.05), archive, small_ev)
    assert archive.rejections == {"pc-failure": 1}


# -- gene pool and library ---------------------------------------------------


def test_gene_pool_admission(small_ev):
    cands = [Individual(f, *small_ev.fitness(f)) for f in enumerate_depth1()[:150]]
    pool = GenePool()
    added = pool.admit([c for c in cands if c.fitness >= 0.02], small_ev, 0.7)
    assert added
    for d, inds in pool.by_depth.items():
        assert all(i.depth == d for i in inds)
        fits = [i.fitness for i in inds]
        assert fits == sorted(fits, reverse=True)
        for a, b in itertools.combinations(inds, 2):
            sa = small_ev.oriented(a.formula, a.orientation)
            sb = small_ev.oriented(b.formula, b.orientation)
            assert similarity(sa, sb) < 0.7
    again = pool.admit(added, small_ev, 0.7)
    assert again == []


def test_diverse_subset_skips_near_copies(small_ev):
    a = Individual(parse("ts_mean(close,5)"), 0.1)
    b = Individual(parse("ts_mean(close,10)"), 0.09)
    c = Individual(parse("ts_std(volume,20)"), 0.08)
    kept = diverse_subset([a, b, c], small_ev, 0.7)
    assert [i.text for i in kept] == ["ts_mean(close,5)", "ts_std(volume,20)"]


def test_library_format_round_trip():
    lib = [
        Individual(parse("div(vwap,close)"), 0.101, -1),
        Individual(parse("ts_mean(div(vwap,close),5)"), 0.12, 1),
        Individual(parse("neg(delta(close,3))"), 0.101, 1),
    ]
    text = format_library(lib)
    lines = text.splitlines()
    assert lines[0] == "ts_mean(div(vwap,close),5)\t0.12\t1\t2"
    assert lines[1].startswith("div(vwap,close)\t0.101\t-1\t1")
    back = parse_library(text)
    assert format_library(back) == text
    with pytest.raises(ValueError):
        parse_library("div(vwap,close)\t0.1\n")


def test_seed_depth1_rejects_strict_threshold(small_ds, small_ev):
    with Miner(SearchConfig(ic_min_gene=0.99), small_ds, small_ev) as m:
        with pytest.raises(MiningError, match="no depth-1"):
            m.seed_depth1()


def test_run_needs_enough_days():
    from alphamine.data import synth_market

    ds = synth_market(100, 10, seed=0)
    with pytest.raises(MiningError, match="120"):
        Miner(SearchConfig(), ds).run()


def test_small_run_end_to_end(small_ds, small_ev):
    cfg = SearchConfig(population_size=30, warm_start_k=2, generations_per_run=4, runs_per_depth=2, max_depth=3)
    with Miner(cfg, small_ds, small_ev) as m:
        lib = m.run()
        assert m.pool.depths()[0] == 1
        assert {h["size"] for h in m.history} == {30}
    assert lib and all(i.fitness >= cfg.ic_min_report for i in lib)
    r = small_ev.returns
    for ind in lib:
        rep = ic(small_ev.alpha(ind.formula), r)
        assert abs(rep.ic - ind.fitness) <= 1e-12 and rep.orientation == ind.orientation
    fits = [i.fitness for i in lib]
    assert fits == sorted(fits, reverse=True)


def test_max_depth_one_library_is_filtered_enumeration(small_ds, small_ev):
    with Miner(SearchConfig(max_depth=1), small_ds, small_ev) as m:
        lib = m.run()
    assert lib and all(i.depth == 1 for i in lib)
    assert all(i.fitness >= 0.05 for i in lib)


# -- root-gene study ---------------------------------------------------------


def test_sample_random_formulas_depths():
    rng = random.Random(0)
    assert all(f.depth == 1 for f in sample_random_formulas(1, 50, rng))
    assert all(f.depth == 2 for f in sample_random_formulas(2, 50, rng))


def test_motivation_single_alpha_and_determinism(small_ev):
    lib = [Individual(parse("div(ts_mean(vwap,5),close)"), 0.06)]
    a = motivation_study(lib, small_ev, top=100, n_random=300, seed=1)
    assert len(a.rows) == 1 and "1" in a.note
    assert a.rows[0][2] in ("ts_mean(vwap,5)", "close")
    assert a.random_depth == 1
    b = motivation_study(lib, small_ev, top=100, n_random=300, seed=1)
    for x, y in zip(a.histogram(20), b.histogram(20)):
        assert np.array_equal(x, y)
