"""FLOPs-constrained evolutionary search over backbone architectures."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .arch import (
    CHANNEL_QUANTUM,
    KERNEL_CHOICES,
    Architecture,
    ConvStage,
    TransformerStage,
    estimate_flops,
)
from .entropy import DegenerateVarianceError, McConfig, stage_stats
from .fitness import A1, FitnessValue, FitnessWeights, failed_fitness, fitness

log = logging.getLogger(__name__)


class SearchConfigError(ValueError):
    pass


def round_width(x: float) -> int:
    """Nearest multiple of 8 (halves round up), never below 8."""
    return max(CHANNEL_QUANTUM, CHANNEL_QUANTUM * math.floor(x / CHANNEL_QUANTUM + 0.5))


@dataclass(frozen=True)
class MutationOp:
    """One row of the mutation table.

    ``action`` is ``"choose"`` (replace with a value), ``"add"`` (signed
    delta) or ``"scale"`` (multiplicative factor). ``field`` is the stage
    attribute the op writes.
    """

    target: str
    action: str
    values: tuple
    field: str

    def apply(self, current: int, value) -> int:
        if self.action == "choose":
            return value
        if self.action == "add":
            floor = 1 if self.target == "layers" else CHANNEL_QUANTUM
            return max(floor, current + value)
        return round_width(current * value)

    def outcomes(self, current: int) -> set:
        return {self.apply(current, v) for v in self.values}


KERNEL_OP = MutationOp("kernel", "choose", KERNEL_CHOICES, "kernel")
LAYERS_OP = MutationOp("layers", "add", (-2, -1, 1, 2), "layers")
CHANNELS_OP = MutationOp("channels", "scale", (1.5, 1.25, 0.8, 0.6, 0.5), "out_channels")
BOTTLENECK_OP = MutationOp("bottleneck_width", "scale", (1.5, 1.25, 0.8, 0.6, 0.5),
                           "bottleneck_width")
HIDDEN_OP = MutationOp("hidden_dim", "add", (-128, -64, -32, -16, -8, 8, 16, 32, 64, 128),
                       "hidden_dim")
FEEDFORWARD_OP = MutationOp("dim_feedforward", "add", (-32, -16, -8, 8, 16, 32),
                            "dim_feedforward")


def applicable_ops(stage, allowed=None) -> list[MutationOp]:
    """Ops for the stage's block type; pooled stages only change widths."""
    if isinstance(stage, TransformerStage):
        ops = [HIDDEN_OP, FEEDFORWARD_OP]
    elif stage.has_pool:
        ops = [CHANNELS_OP, BOTTLENECK_OP]
    else:
        ops = [KERNEL_OP, LAYERS_OP, CHANNELS_OP, BOTTLENECK_OP]
    if allowed is not None:
        ops = [op for op in ops if op.target in allowed]
    return ops


def mutate_block(stage, rng: np.random.Generator, allowed=None):
    """Apply one uniformly drawn op with a uniformly drawn action value."""
    ops = applicable_ops(stage, allowed)
    if not ops:
        return stage
    op = ops[rng.integers(len(ops))]
    value = op.values[rng.integers(len(op.values))]
    return replace(stage, **{op.field: op.apply(getattr(stage, op.field), value)})


def mutate_arch(arch: Architecture, rng: np.random.Generator, stages=None,
                params=None, n_blocks: int = 4, n_ops: int = 2) -> Architecture:
    """Pick ``n_blocks`` distinct stages and mutate each ``n_ops`` times.

    ``stages`` (0-based indices) and ``params`` (op targets) restrict the
    search space; when fewer than ``n_blocks`` stages are mutable all of them
    are picked. Changing a stage's output width re-chains the next stage.
    """
    pool = [i for i in (range(len(arch)) if stages is None else stages)
            if applicable_ops(arch[i], params)]
    if not pool:
        return arch
    picked = sorted(rng.choice(pool, size=min(n_blocks, len(pool)), replace=False).tolist())
    for i in picked:
        stage = arch[i]
        for _ in range(n_ops):
            stage = mutate_block(stage, rng, params)
        arch = arch.replace_stage(i, stage)
    return arch


def derive_seed(base: int, arch: Architecture) -> int:
    """Per-candidate seed from the global seed and the architecture content."""
    h = hashlib.sha256(f"{base}:{arch.digest()}".encode()).digest()
    return int.from_bytes(h[:8], "little")


def score_architecture(arch: Architecture, weights: FitnessWeights = A1,
                       scorer: str = "analytic", mc: McConfig = McConfig(),
                       candidate_seed: bool = False) -> FitnessValue:
    """Fitness of ``arch``; degenerate Monte-Carlo statistics score as failed."""
    if candidate_seed and scorer != "analytic":
        mc = replace(mc, seed=derive_seed(mc.seed, arch))
    try:
        return fitness(stage_stats(arch, scorer, mc), weights)
    except DegenerateVarianceError as exc:
        log.warning("candidate %s failed to score: %s", arch.digest(), exc)
        return failed_fitness()


@dataclass(frozen=True)
class SearchConfig:
    seed_arch: Architecture
    flops_budget: int
    population: int = 64
    iterations: int = 20000
    weights: FitnessWeights = A1
    scorer: str = "analytic"
    mc: McConfig = McConfig()
    seed: int = 0
    mutable_stages: Optional[tuple] = None
    mutable_params: Optional[tuple] = None
    init: str = "clone"
    batch_size: int = 1
    workers: int = 1

    def __post_init__(self):
        if self.population < 2:
            raise SearchConfigError(f"population must be >= 2, got {self.population}")
        if self.flops_budget <= 0:
            raise SearchConfigError("flops_budget must be positive")
        if self.iterations < 0:
            raise SearchConfigError("iterations must be >= 0")
        if self.init not in ("clone", "mutate"):
            raise SearchConfigError(f"unknown init {self.init!r}")
        if self.scorer not in ("analytic", "mc"):
            raise SearchConfigError(f"unknown scorer {self.scorer!r}")
        if self.batch_size < 1 or self.workers < 1:
            raise SearchConfigError("batch_size and workers must be >= 1")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    best_fitness: float
    mean_fitness: float
    best_digest: str
    rejected: int  # cumulative over-budget mutants
    child_digest: str
    child_flops: int
    child_fitness: Optional[float]


@dataclass
class SearchHistory:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def best_fitness(self) -> list:
        return [r.best_fitness for r in self.records]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(r)) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str) -> "SearchHistory":
        return cls([IterationRecord(**json.loads(line)) for line in text.splitlines() if line])

    def save(self, path) -> None:
        Path(path).write_text(self.to_jsonl())


@dataclass(frozen=True)
class Individual:
    arch: Architecture
    fitness: FitnessValue
    flops: int
    order: int

    def key(self):
        # best first; ties go to fewer FLOPs, then earlier insertion
        return (-self.fitness.value, self.flops, self.order)


@dataclass
class SearchResult:
    best: Architecture
    best_fitness: FitnessValue
    history: SearchHistory
    population: list
    archive: dict  # digest -> (arch, flops) of every individual ever retained


def _mean_finite(values) -> float:
    finite = [v for v in values if math.isfinite(v)]
    return math.fsum(finite) / len(finite) if finite else math.nan


def evolve(cfg: SearchConfig) -> SearchResult:
    """Run the elitist evolutionary loop.

    Every iteration mutates one uniformly chosen parent, drops it if it
    exceeds the FLOPs budget, otherwise merges it into the population and
    keeps the top ``population`` individuals. With ``batch_size > 1`` the
    mutants of a batch are drawn from the same population snapshot and may
    be scored on ``workers`` threads; results never depend on ``workers``.
    """
    shape = cfg.mc.shape
    seed_flops = estimate_flops(cfg.seed_arch, shape).total
    if seed_flops > cfg.flops_budget:
        raise SearchConfigError(
            f"seed architecture needs {seed_flops} FLOPs, over budget {cfg.flops_budget}")

    def score(arch):
        return score_architecture(arch, cfg.weights, cfg.scorer, cfg.mc, candidate_seed=True)

    def rng_for(step: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([cfg.seed % 2**64, step]))

    archive = {}
    order = 0
    seed_ind = Individual(cfg.seed_arch, score(cfg.seed_arch), seed_flops, order)
    population = [seed_ind]
    archive[cfg.seed_arch.digest()] = (cfg.seed_arch, seed_flops)
    init_rng = rng_for(0)
    while len(population) < cfg.population:
        order += 1
        if cfg.init == "clone":
            population.append(replace(seed_ind, order=order))
            continue
        for _ in range(100):
            cand = mutate_arch(cfg.seed_arch, init_rng, cfg.mutable_stages, cfg.mutable_params)
            flops = estimate_flops(cand, shape).total
            if flops <= cfg.flops_budget:
                break
        else:
            cand, flops = cfg.seed_arch, seed_flops
        population.append(Individual(cand, score(cand), flops, order))
        archive[cand.digest()] = (cand, flops)
    population.sort(key=Individual.key)

    history = SearchHistory()
    rejected = 0
    executor = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for start in range(0, cfg.iterations, cfg.batch_size):
            steps = range(start, min(start + cfg.batch_size, cfg.iterations))
            children = []
            for t in steps:
                rng = rng_for(t + 1)
                parent = population[rng.integers(len(population))]
                child = mutate_arch(parent.arch, rng, cfg.mutable_stages, cfg.mutable_params)
                children.append((child, estimate_flops(child, shape).total))
            todo = [c for c, f in children if f <= cfg.flops_budget]
            scores = list(executor.map(score, todo)) if executor else [score(c) for c in todo]
            scores.reverse()
            for t, (child, flops) in zip(steps, children):
                child_value = None
                if flops > cfg.flops_budget:
                    rejected += 1
                else:
                    order += 1
                    fv = scores.pop()
                    child_value = fv.value
                    population.append(Individual(child, fv, flops, order))
                    population.sort(key=Individual.key)
                    if population.pop().order != order:
                        archive.setdefault(child.digest(), (child, flops))
                best = population[0]
                history.records.append(IterationRecord(
                    t, best.fitness.value, _mean_finite(i.fitness.value for i in population),
                    best.arch.digest(), rejected, child.digest(), flops, child_value))
    finally:
        if executor:
            executor.shutdown()
    best = population[0]
    return SearchResult(best.arch, best.fitness, history, population, archive)
