"""NSGA-II over genomes: sorting, crowding, variation, selection, hypervolume."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .adversarial import AttackSpec, robust_accuracy
from .data import Dataset
from .errors import TamNasError
from .network import accuracy
from .space import NUM_CHANNELS, Genome, ParamTable, Preset, count_params, legal_blocks
from .supernet import (
    JOINT,
    SamplerState,
    WeightStore,
    clone_subnet,
    phase_window,
    sample_architecture,
)


@dataclass(frozen=True)
class FitnessTriple:
    clean_error: float
    adv_error: float
    params: int

    def __post_init__(self):
        for v in (self.clean_error, self.adv_error):
            if not 0.0 <= v <= 100.0:
                raise TamNasError(f"error {v} outside [0, 100]")
        if self.params <= 0:
            raise TamNasError(f"params must be positive, got {self.params}")

    def objectives(self) -> tuple:
        return (self.clean_error, self.adv_error, float(self.params))


@dataclass
class Individual:
    genome: Genome
    fitness: FitnessTriple | None = None
    rank: int | None = None
    crowding: float | None = None


@dataclass(frozen=True)
class SearchConfig:
    parent_size: int = 50
    offspring_size: int = 50
    generations: int = 20
    p_c: float = 0.9
    p_m: float = 0.1
    tournament: int = 10
    seed: int = 0
    crossover: str = "uniform"  # or "one_point"
    hv_reference: tuple | None = None  # (clean, adv, params); default (100, 100, window max)


# --------------------------------------------------------------------------
# dominance, sorting, crowding


def dominates(a, b) -> bool:
    """Pareto dominance with every objective minimized."""
    a = a.objectives() if isinstance(a, FitnessTriple) else tuple(a)
    b = b.objectives() if isinstance(b, FitnessTriple) else tuple(b)
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def fast_nondominated_sort(points) -> list:
    """Fronts as lists of indices into ``points`` (an (N, M) array-like)."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    if n == 0:
        return []
    le = (pts[:, None, :] <= pts[None, :, :]).all(axis=2)
    lt = (pts[:, None, :] < pts[None, :, :]).any(axis=2)
    dom = le & lt  # dom[i, j]: i dominates j
    dominated_by = dom.sum(axis=0)
    fronts = []
    current = [i for i in range(n) if dominated_by[i] == 0]
    while current:
        fronts.append(current)
        nxt = []
        for i in current:
            for j in np.flatnonzero(dom[i]):
                dominated_by[j] -= 1
                if dominated_by[j] == 0:
                    nxt.append(int(j))
        current = sorted(nxt)
    return fronts


def crowding_distance(points) -> np.ndarray:
    """Crowding distance of each member of one front; boundaries are infinite."""
    pts = np.asarray(points, dtype=float)
    n = len(pts)
    dist = np.zeros(n)
    if n <= 2:
        return np.full(n, math.inf)
    for m in range(pts.shape[1]):
        order = np.argsort(pts[:, m], kind="stable")
        vals = pts[order, m]
        dist[order[0]] = dist[order[-1]] = math.inf
        span = vals[-1] - vals[0]
        if span == 0:
            continue
        gaps = (vals[2:] - vals[:-2]) / span
        dist[order[1:-1]] += gaps
    return dist


def assign_rank_and_crowding(pop: list) -> list:
    """Sort ``pop`` in place of its metadata; returns the fronts as index lists."""
    objs = [ind.fitness.objectives() for ind in pop]
    fronts = fast_nondominated_sort(objs)
    for r, front in enumerate(fronts):
        cd = crowding_distance([objs[i] for i in front])
        for i, d in zip(front, cd):
            pop[i].rank = r
            pop[i].crowding = float(d)
    return fronts


# --------------------------------------------------------------------------
# variation


def tournament_select(pop: list, size: int, rng: np.random.Generator) -> Individual:
    """Best of ``size`` uniformly drawn entrants by (rank, -crowding)."""
    replace = len(pop) < size
    entrants = rng.choice(len(pop), size=size, replace=replace)
    best_key = min((pop[i].rank, -pop[i].crowding) for i in entrants)
    tied = [i for i in entrants if (pop[i].rank, -pop[i].crowding) == best_key]
    return pop[tied[rng.integers(len(tied))]]


def _repair(blocks: list, preset: Preset, rng: np.random.Generator) -> list:
    for layer in preset.layers:
        legal = legal_blocks(layer)
        if blocks[layer.index] not in legal:
            blocks[layer.index] = legal[rng.integers(len(legal))]
    return blocks


def crossover(
    p1: Genome, p2: Genome, p_c: float, preset: Preset, rng: np.random.Generator, mode: str = "uniform"
) -> Genome:
    if rng.random() >= p_c:
        return p1
    n = len(p1.blocks)
    if mode == "uniform":
        take_b = rng.random(n) < 0.5
        take_c = rng.random(n) < 0.5
    elif mode == "one_point":
        cut = rng.integers(1, n) if n > 1 else 0
        take_b = take_c = np.arange(n) >= cut
    else:
        raise TamNasError(f"unknown crossover mode {mode!r}")
    blocks = [b2 if t else b1 for b1, b2, t in zip(p1.blocks, p2.blocks, take_b)]
    channels = [c2 if t else c1 for c1, c2, t in zip(p1.channels, p2.channels, take_c)]
    return Genome(_repair(blocks, preset, rng), channels)


def mutate(genome: Genome, p_m: float, preset: Preset, rng: np.random.Generator) -> Genome:
    """Each gene is redrawn from its legal set with probability ``p_m``."""
    blocks, channels = list(genome.blocks), list(genome.channels)
    for layer in preset.layers:
        i = layer.index
        if rng.random() < p_m:
            legal = legal_blocks(layer)
            blocks[i] = legal[rng.integers(len(legal))]
        if rng.random() < p_m:
            channels[i] = int(rng.integers(NUM_CHANNELS))
    return Genome(blocks, channels)


# --------------------------------------------------------------------------
# hypervolume


def hypervolume(points, reference) -> float:
    """Exact dominated volume of minimization points w.r.t. ``reference``.

    Points are clipped to the reference box. Slices along the last axis;
    each slice's area comes from a 2-D staircase sweep.
    """
    ref = np.asarray(reference, dtype=float)
    pts = np.asarray(points, dtype=float).reshape(-1, len(ref))
    if len(pts) == 0:
        return 0.0
    pts = np.minimum(pts, ref)
    if pts.shape[1] == 2:
        return _area2d(pts, ref)
    if pts.shape[1] != 3:
        raise TamNasError("hypervolume supports 2 or 3 objectives")
    order = np.argsort(pts[:, 2], kind="stable")
    pts = pts[order]
    total = 0.0
    for i in range(len(pts)):
        z_next = pts[i + 1, 2] if i + 1 < len(pts) else ref[2]
        depth = z_next - pts[i, 2]
        if depth > 0:
            total += _area2d(pts[: i + 1, :2], ref[:2]) * depth
    return float(total)


def _area2d(pts: np.ndarray, ref: np.ndarray) -> float:
    # in x order, each point that lowers the staircase adds a band
    # [y, best_y) that extends from its x to the reference
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    area, best_y = 0.0, ref[1]
    for x, y in pts[order]:
        if y < best_y:
            area += (ref[0] - x) * (best_y - y)
            best_y = y
    return float(area)


def normalize(objs, reference) -> np.ndarray:
    """Scale each objective by its reference so the reference maps to 1."""
    return np.asarray(objs, dtype=float) / np.asarray(reference, dtype=float)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class EvaluationContext:
    store: WeightStore
    val: Dataset
    attack: AttackSpec
    table: ParamTable
    seed: int = 0
    snapshot: str = ""  # checkpoint digest the cache is keyed on
    cache: dict = field(default_factory=dict)


def genome_seed(seed: int, genome: Genome) -> int:
    h = hashlib.sha256(f"{seed}|{genome.text()}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def evaluate(genome: Genome, ctx: EvaluationContext) -> FitnessTriple:
    """Clean error, PGD error and size of the cloned subnet."""
    key = (ctx.snapshot, genome.text())
    if key in ctx.cache:
        return ctx.cache[key]
    net = clone_subnet(ctx.store, genome)
    clean = accuracy(net, ctx.val.x, ctx.val.y)
    adv = robust_accuracy(net, ctx.val.x, ctx.val.y, ctx.attack, seed=genome_seed(ctx.seed, genome))
    fit = FitnessTriple(100.0 - clean, 100.0 - adv, count_params(genome, ctx.table))
    ctx.cache[key] = fit
    return fit


# --------------------------------------------------------------------------
# main loop


@dataclass
class SearchResult:
    front: list  # Individuals of F0 at the last generation
    population: list
    archive: list  # (generation, Individual) for every evaluation, in order
    hv_history: list  # per generation: dict(generation, population_hv, archive_hv)
    sizes: list  # per generation: (|P|, |Q|, |R|)
    reference: tuple
    populations: list = field(default_factory=list)  # parents after each generation's selection


def _hv_of(individuals, reference) -> float:
    if not individuals:
        return 0.0
    objs = np.array([ind.fitness.objectives() for ind in individuals])
    front = fast_nondominated_sort(objs)[0]
    return hypervolume(normalize(objs[front], reference), np.ones(3))


def run_search(
    config: SearchConfig,
    preset: Preset,
    table: ParamTable,
    evaluator: Callable[[Genome], FitnessTriple],
    log=None,
    map_fn=map,
) -> SearchResult:
    """Elitist NSGA-II; ``evaluator`` maps a genome to its fitness triple.

    ``map_fn`` may be a parallel map; results do not depend on it because
    evaluation is a pure function of the genome.
    """
    rng = np.random.default_rng(config.seed)
    window = phase_window(preset, JOINT)
    reference = tuple(config.hv_reference) if config.hv_reference else (100.0, 100.0, float(window[1]))
    init_state = SamplerState(JOINT, 0, tuple(range(NUM_CHANNELS)), window, config.seed)
    archive = []

    def evaluated(genomes, gen):
        out = []
        for g, fit in zip(genomes, map_fn(evaluator, genomes)):
            ind = Individual(g, fit)
            archive.append((gen, ind))
            out.append(ind)
        return out

    parents = evaluated([sample_architecture(init_state, table, rng) for _ in range(config.parent_size)], 0)
    assign_rank_and_crowding(parents)
    hv_history, sizes, populations = [], [], [parents]
    for gen in range(1, config.generations + 1):
        children = []
        for _ in range(config.offspring_size):
            a = tournament_select(parents, config.tournament, rng)
            b = tournament_select(parents, config.tournament, rng)
            child = crossover(a.genome, b.genome, config.p_c, preset, rng, config.crossover)
            children.append(mutate(child, config.p_m, preset, rng))
        offspring = evaluated(children, gen)
        merged = [Individual(i.genome, i.fitness) for i in parents + offspring]
        fronts = assign_rank_and_crowding(merged)
        chosen = []
        for front in fronts:
            if len(chosen) + len(front) <= config.parent_size:
                chosen.extend(front)
                continue
            room = config.parent_size - len(chosen)
            ranked = sorted(front, key=lambda i: -merged[i].crowding)
            chosen.extend(ranked[:room])
            break
        sizes.append((len(parents), len(offspring), len(merged)))
        parents = [merged[i] for i in chosen]
        assign_rank_and_crowding(parents)
        populations.append(parents)
        row = {
            "generation": gen,
            "population_hv": _hv_of(parents, reference),
            "archive_hv": _hv_of([ind for _, ind in archive], reference),
        }
        hv_history.append(row)
        if log is not None:
            log(row)
    front = [ind for ind in parents if ind.rank == 0]
    return SearchResult(front, parents, archive, hv_history, sizes, reference, populations)


def converged(hv_history: list, tol: float = 1e-4, window: int = 3) -> bool:
    """True when the archive HV moved less than ``tol`` over the last ``window`` generations."""
    if len(hv_history) <= window:
        return False
    vals = [r["archive_hv"] for r in hv_history[-(window + 1) :]]
    return max(vals) - min(vals) < tol


# --------------------------------------------------------------------------
# exports


def front_records(individuals: list) -> list:
    out = []
    for ind in individuals:
        f = ind.fitness
        out.append(
            {
                "genome": ind.genome.text(),
                "clean_error": round(f.clean_error, 6),
                "adv_error": round(f.adv_error, 6),
                "params": int(f.params),
                "rank": ind.rank,
                "crowding": None if ind.crowding is None or math.isinf(ind.crowding) else round(ind.crowding, 9),
            }
        )
    return out


def front_to_json(individuals: list) -> str:
    ordered = sorted(individuals, key=lambda i: (i.fitness.adv_error, i.fitness.clean_error, i.fitness.params, i.genome.text()))
    return json.dumps(front_records(ordered), indent=2, sort_keys=True) + "\n"


def hv_to_csv(hv_history: list) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["generation", "population_hv", "archive_hv"])
    for r in hv_history:
        w.writerow([r["generation"], f"{r['population_hv']:.10f}", f"{r['archive_hv']:.10f}"])
    return buf.getvalue()
