"""Hierarchical genetic search with a PCA-screened quality-diversity archive.

Depth-1 formulas are enumerated and the effective, mutually dissimilar ones seed
the gene pool. Each deeper level is mined by independent runs of warm-start
initialisation followed by crossover with parent replacement. Children that beat
their parents must also clear the archive's PCA-similarity screen.
"""

from __future__ import annotations

import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import mannwhitneyu

from .data import MarketDataset
from .evaluation import (
    Evaluator,
    PcaError,
    PcScores,
    first_pc_scores,
    pca_similarity_many,
    similarity_many,
)
from .formula import (
    BASE_FACTORS,
    WINDOWS,
    Formula,
    crossover,
    enumerate_depth1,
    mutate,
    parse,
    random_formula,
    root_genes,
    to_text,
)

log = logging.getLogger(__name__)


class MiningError(RuntimeError):
    pass


@dataclass
class SearchConfig:
    population_size: int = 200
    warm_start_k: int = 5
    generations_per_run: int = 30
    runs_per_depth: int = 5
    max_depth: int = 3
    ic_min_gene: float = 0.02
    ic_min_report: float = 0.05
    sim_max: float = 0.7
    pca_threshold: float = 0.9
    mutation_prob: float = 0.0
    horizon: int = 1
    seed: int = 0
    workers: int = 1

    def validate(self) -> list[str]:
        errs = []
        if self.warm_start_k < 1:
            errs.append("warm_start_k must be >= 1")
        if self.population_size < 2:
            errs.append("population_size must be >= 2")
        for name in ("ic_min_gene", "ic_min_report", "sim_max", "pca_threshold"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                errs.append(f"{name} must lie in (0, 1], got {v}")
        if not 0 <= self.mutation_prob <= 1:
            errs.append("mutation_prob must lie in [0, 1]")
        if self.max_depth < 1:
            errs.append("max_depth must be >= 1")
        for name in ("generations_per_run", "runs_per_depth", "horizon", "workers"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        return errs

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class Individual:
    formula: Formula
    fitness: float
    orientation: int = 1
    pc: PcScores | None = field(default=None, repr=False)

    @property
    def text(self) -> str:
        return to_text(self.formula)

    @property
    def depth(self) -> int:
        return self.formula.depth


def _rank_key(ind: Individual) -> tuple[float, str]:
    return (-ind.fitness, ind.text)


class QdArchive:
    """Accepted alphas whose first-PC score vectors are pairwise below the threshold."""

    def __init__(self, n_days: int, pca_threshold: float = 0.9):
        self.pca_threshold = pca_threshold
        self.members: list[Individual] = []
        self._stack = np.empty((0, n_days))
        self.rejections: dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.members)

    @property
    def scores(self) -> np.ndarray:
        return self._stack

    def max_similarity(self, pc: PcScores) -> float:
        if not self.members:
            return 0.0
        sims = pca_similarity_many(pc, self._stack)
        sims = sims[np.isfinite(sims)]
        return float(sims.max()) if sims.size else 0.0

    def insert(self, ind: Individual) -> None:
        assert ind.pc is not None
        self.members.append(ind)
        self._stack = np.vstack([self._stack, ind.pc.scores[None, :]])

    def _reject(self, reason: str) -> bool:
        self.rejections[reason] = self.rejections.get(reason, 0) + 1
        return False


def qd_accept(cand: Individual, archive: QdArchive, ev: Evaluator) -> bool:
    """Insert ``cand`` if it is PCA-dissimilar from every archived alpha.

    The caller zeroes the candidate's fitness on rejection.
    """
    if cand.pc is None:
        try:
            cand.pc = first_pc_scores(ev.alpha(cand.formula))
        except PcaError as exc:
            log.debug("PC failed for %s: %s", cand.text, exc)
            return archive._reject("pc-failure")
    if archive.max_similarity(cand.pc) >= archive.pca_threshold:
        return archive._reject("similar")
    archive.insert(cand)
    return True


class GenePool:
    """Per-depth effective genes, each depth kept pairwise dissimilar and fitness-sorted."""

    def __init__(self) -> None:
        self.by_depth: dict[int, list[Individual]] = {}

    def formulas(self, below: int | None = None) -> list[Formula]:
        return [
            i.formula for d, inds in sorted(self.by_depth.items()) if below is None or d < below for i in inds
        ]

    def depths(self) -> list[int]:
        return sorted(d for d, v in self.by_depth.items() if v)

    def admit(self, cands: Iterable[Individual], ev: Evaluator, sim_max: float) -> list[Individual]:
        """Greedy fitness-order admission, each candidate against its own depth."""
        added = []
        groups: dict[int, list[Individual]] = {}
        for c in cands:
            groups.setdefault(c.depth, []).append(c)
        for d, group in sorted(groups.items()):
            current = self.by_depth.setdefault(d, [])
            kept = diverse_subset(sorted(group, key=_rank_key), ev, sim_max, existing=current)
            added.extend(kept)
            current.extend(kept)
            current.sort(key=_rank_key)
        return added

    def __len__(self) -> int:
        return sum(len(v) for v in self.by_depth.values())


def diverse_subset(
    ordered: Sequence[Individual],
    ev: Evaluator,
    sim_max: float,
    existing: Sequence[Individual] = (),
) -> list[Individual]:
    """Walk ``ordered`` and keep each alpha whose oriented similarity to every kept
    (and pre-existing) alpha stays below ``sim_max``. Undefined similarity counts as
    dissimilar."""
    seen = {i.text for i in existing}
    kept_vals = [ev.oriented(i.formula, i.orientation) for i in existing]
    kept: list[Individual] = []
    for ind in ordered:
        if ind.text in seen:
            continue
        v = ev.oriented(ind.formula, ind.orientation)
        if kept_vals:
            sims = similarity_many(v, np.stack(kept_vals))
            if np.any(sims[np.isfinite(sims)] >= sim_max):
                continue
        kept.append(ind)
        kept_vals.append(v)
        seen.add(ind.text)
    return kept


# ---------------------------------------------------------------------------
# Search


class Miner:
    """Owns the evaluator, archive, gene pool and optional worker pool of one mining job."""

    def __init__(self, cfg: SearchConfig, ds: MarketDataset, ev: Evaluator | None = None):
        errs = cfg.validate()
        if errs:
            raise MiningError("; ".join(errs))
        self.cfg = cfg
        self.ds = ds
        self.ev = ev if ev is not None and ev.horizon == cfg.horizon else Evaluator(ds, cfg.horizon)
        self.archive = QdArchive(ds.shape[0], cfg.pca_threshold)
        self.pool = GenePool()
        self.history: list[dict] = []
        self._executor = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def __enter__(self) -> "Miner":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def evaluate(self, formulas: Sequence[Formula]) -> list[Individual]:
        """Fitness for each formula; order preserved, so results ignore worker count."""
        fn = self.ev.fitness
        if self._executor is not None and len(formulas) > 1:
            fits = list(self._executor.map(fn, formulas))
        else:
            fits = [fn(f) for f in formulas]
        return [Individual(f, fit, o) for f, (fit, o) in zip(formulas, fits)]

    # step 1 ---------------------------------------------------------------

    def seed_depth1(self) -> list[Individual]:
        cands = self.evaluate(enumerate_depth1(BASE_FACTORS, None, WINDOWS))
        good = [c for c in cands if c.fitness >= self.cfg.ic_min_gene]
        admitted = self.pool.admit(good, self.ev, self.cfg.sim_max)
        if not admitted:
            raise MiningError(
                f"no depth-1 formula reached ic_min_gene={self.cfg.ic_min_gene}; "
                f"best was {max((c.fitness for c in cands), default=0.0):.4f}"
            )
        for ind in admitted:
            qd_accept(ind, self.archive, self.ev)
        log.info("depth 1: %d enumerated, %d effective, %d in pool", len(cands), len(good), len(admitted))
        return admitted

    # step 2 ---------------------------------------------------------------

    def warm_start_init(self, depth: int, rng: random.Random) -> list[Individual]:
        return warm_start_init(depth, self.pool, self.cfg, self, rng)

    def reproduce(self, pop: list[Individual], rng: random.Random) -> list[Individual]:
        return reproduce(pop, self.archive, self.cfg, self, rng)

    def run_depth(self, depth: int) -> None:
        for run in range(self.cfg.runs_per_depth):
            rng = random.Random(f"{self.cfg.seed}:{depth}:{run}")
            start = len(self.archive)
            pop = self.warm_start_init(depth, rng)
            self._record(depth, run, 0, pop)
            for gen in range(1, self.cfg.generations_per_run + 1):
                pop = self.reproduce(pop, rng)
                self._record(depth, run, gen, pop)
            fresh = [m for m in self.archive.members[start:] if m.fitness >= self.cfg.ic_min_gene]
            added = self.pool.admit(fresh, self.ev, self.cfg.sim_max)
            log.info(
                "depth %d run %d: archive %d (+%d), pool +%d",
                depth, run, len(self.archive), len(self.archive) - start, len(added),
            )

    def _record(self, depth: int, run: int, gen: int, pop: Sequence[Individual]) -> None:
        fit = [i.fitness for i in pop]
        self.history.append(
            dict(
                depth=depth,
                run=run,
                generation=gen,
                best=max(fit),
                mean=float(np.mean(fit)),
                size=len(pop),
                archive=len(self.archive),
            )
        )

    # step 3 ---------------------------------------------------------------

    def library(self) -> list[Individual]:
        strong = sorted((m for m in self.archive.members if m.fitness >= self.cfg.ic_min_report), key=_rank_key)
        return diverse_subset(strong, self.ev, self.cfg.sim_max)

    def run(self) -> list[Individual]:
        if self.ds.shape[0] < 120:
            raise MiningError("mining needs at least 120 trading days")
        self.seed_depth1()
        for d in range(2, self.cfg.max_depth + 1):
            self.run_depth(d)
        lib = self.library()
        log.info("library: %d alphas from %d archived", len(lib), len(self.archive))
        return lib


def warm_start_init(
    depth: int,
    pool: GenePool,
    cfg: SearchConfig,
    miner: Miner,
    rng: random.Random,
    max_attempts_factor: int = 20,
) -> list[Individual]:
    """Draw K x population distinct formulas of ``depth`` and keep the fittest slice."""
    target = cfg.warm_start_k * cfg.population_size
    genes = pool.formulas(below=depth)
    seen: dict[str, Formula] = {}
    attempts = 0
    while len(seen) < target and attempts < max_attempts_factor * target:
        f = random_formula(depth, genes, rng)
        seen.setdefault(to_text(f), f)
        attempts += 1
    if len(seen) < target:
        log.warning("warm start reached %d of %d distinct candidates", len(seen), target)
    cands = miner.evaluate(list(seen.values()))
    cands.sort(key=_rank_key)
    return cands[: cfg.population_size]


def reproduce(
    pop: list[Individual],
    archive: QdArchive,
    cfg: SearchConfig,
    miner: Miner,
    rng: random.Random,
) -> list[Individual]:
    """One generation of crossover with parent-offspring replacement.

    A pair is replaced by its two children only when the best child, after the
    archive screen has zeroed any rejected child, is strictly fitter than both
    parents. A child that duplicates a formula held elsewhere in the population is
    scored 0 and, if its pair is replaced, its slot keeps the parent instead.
    """
    order = list(range(len(pop)))
    rng.shuffle(order)
    if len(order) % 2:
        log.debug("odd population: slot %d sits out this generation", order[-1])
        order = order[:-1]
    pairs = [(order[i], order[i + 1]) for i in range(0, len(order), 2)]
    genes = miner.pool.formulas()

    broods = []
    for a, b in pairs:
        c1, c2 = crossover(pop[a].formula, pop[b].formula, rng)
        kids = []
        for c in (c1, c2):
            if cfg.mutation_prob > 0 and rng.random() < cfg.mutation_prob:
                c = mutate(c, genes, rng)
            kids.append(c)
        broods.append(kids)

    flat = [c for kids in broods for c in kids]
    uniq = list({to_text(c): c for c in flat}.values())
    scored = {i.text: i for i in miner.evaluate(uniq)}

    new = list(pop)
    occupied: dict[str, int] = {}
    for ind in new:
        occupied[ind.text] = occupied.get(ind.text, 0) + 1

    for (a, b), kids in zip(pairs, broods):
        parents = (new[a], new[b])
        best_parent = max(parents[0].fitness, parents[1].fitness)
        others = dict(occupied)
        for p in parents:
            others[p.text] -= 1
        children: list[Individual] = []
        dups: list[bool] = []
        for k, c in enumerate(kids):
            base = scored[to_text(c)]
            child = Individual(base.formula, base.fitness, base.orientation)
            dup = others.get(child.text, 0) > 0 or (k == 1 and child.text == children[0].text)
            if dup:
                child.fitness = 0.0
            children.append(child)
            dups.append(dup)
        if max(c.fitness for c in children) <= best_parent:
            continue
        for child in sorted((c for c in children if c.fitness > best_parent), key=_rank_key):
            if not qd_accept(child, archive, miner.ev):
                child.fitness = 0.0
        if max(c.fitness for c in children) <= best_parent:
            continue
        for slot, parent, child, dup in zip((a, b), parents, children, dups):
            keep = parent if dup else child
            occupied[parent.text] -= 1
            occupied[keep.text] = occupied.get(keep.text, 0) + 1
            new[slot] = keep
    return new


def run(cfg: SearchConfig, ds: MarketDataset) -> list[Individual]:
    """Mine ``ds`` and return the final diverse library, fittest first."""
    with Miner(cfg, ds) as m:
        return m.run()


# ---------------------------------------------------------------------------
# Library file format


def format_library(lib: Sequence[Individual]) -> str:
    rows = sorted(lib, key=_rank_key)
    return "".join(f"{i.text}\t{float(i.fitness)!r}\t{i.orientation}\t{i.depth}\n" for i in rows)


def parse_library(text: str) -> list[Individual]:
    out = []
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValueError(f"library line {n}: expected 4 tab-separated fields")
        f = parse(parts[0], max_depth=int(parts[3]))
        out.append(Individual(f, float(parts[1]), int(parts[2])))
    return out


# ---------------------------------------------------------------------------
# Root-gene study


@dataclass
class MotivationResult:
    rows: list[tuple[str, float, str, float]]
    random_ics: np.ndarray
    random_depth: int
    note: str = ""

    @property
    def gene_ics(self) -> np.ndarray:
        return np.array([r[3] for r in self.rows])

    def mann_whitney_p(self) -> float:
        """One-sided p-value that best root-gene ICs exceed the random-formula ICs."""
        return float(mannwhitneyu(self.gene_ics, self.random_ics, alternative="greater").pvalue)

    def histogram(self, bins: int = 40, upper: float | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        hi = upper if upper is not None else float(max(self.random_ics.max(initial=0), self.gene_ics.max(initial=0)))
        edges = np.linspace(0.0, hi if hi > 0 else 1.0, bins + 1)
        return edges, np.histogram(self.random_ics, edges)[0], np.histogram(self.gene_ics, edges)[0]


def sample_random_formulas(depth: int, n: int, rng: random.Random) -> list[Formula]:
    """Unselected random formulas of exactly ``depth``, built level by level."""
    pool: list[Formula] = []
    for d in range(1, depth):
        level = enumerate_depth1() if d == 1 else [random_formula(d, pool, rng) for _ in range(2000)]
        pool.extend(level)
    return [random_formula(depth, pool, rng) for _ in range(n)]


def motivation_study(
    library: Sequence[Individual],
    ev: Evaluator,
    top: int = 100,
    n_random: int = 20000,
    seed: int = 0,
    random_depth: int | None = None,
) -> MotivationResult:
    """Best root-gene IC of the top library alphas against ICs of random formulas.

    Random formulas are one level shallower than the deepest top alpha (at least
    depth 1) and are not selected by fitness.
    """
    chosen = sorted(library, key=_rank_key)[:top]
    note = "" if len(chosen) >= top else f"library has {len(chosen)} alphas (< {top})"
    rows = []
    for ind in chosen:
        genes = root_genes(ind.formula)
        if not genes:
            continue
        scored = [(ev.fitness(g)[0], to_text(g)) for g in genes]
        best_ic, best = max(scored, key=lambda x: (x[0], x[1]))
        rows.append((ind.text, ind.fitness, best, best_ic))
    if random_depth is None:
        random_depth = max(1, max((i.depth for i in chosen), default=2) - 1)
    rng = random.Random(f"motivation:{seed}")
    formulas = sample_random_formulas(random_depth, n_random, rng)
    ics = np.array([ev.fitness(f)[0] for f in formulas])
    return MotivationResult(rows, ics, random_depth, note)
