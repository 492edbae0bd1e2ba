"""Rank-correlation analysis between architecture parameters and fitness."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .arch import Architecture, ConvLayer, InputShape, estimate_flops, require_valid
from .entropy import McConfig, StageStats, _analytic_log_variances, conv_stack_log_variance
from .evolution import mutate_arch, score_architecture
from .fitness import A1, FitnessWeights, fitness

S_MODEL = tuple(range(256, 513, 8))
S_FEEDFORWARD = tuple(x for x in range(512, 2049) if x % 12 == 0)

DATASET_COLUMNS = ("L", "avg_channels", "avg_kernel", "hidden_dim", "dim_feedforward", "score")
SWEEP_COLUMNS = ("d_model", "d_feedforward", "entropy")


class UndefinedCorrelation(ValueError):
    pass


@dataclass(frozen=True)
class ArchSummary:
    total_layers: int
    avg_channels: float
    avg_kernel: float
    hidden_dim: int
    dim_feedforward: int


def _layer_pairs(source) -> list[tuple]:
    if isinstance(source, Architecture):
        source = source.conv_layers()
    return [(l.in_channels, l.kernel) if isinstance(l, ConvLayer) else tuple(l) for l in source]


def geometric_means(source) -> tuple[int, float, float]:
    """``(L, c_bar, k_bar)`` over conv layers, each mean geometric.

    A uniform net of ``L`` layers with these values has the same summed
    ``ln(c*k^2)`` as the original.
    """
    pairs = _layer_pairs(source)
    if not pairs:
        raise ValueError("no conv layers")
    n = len(pairs)
    c_bar = math.exp(math.fsum(math.log(c) for c, _ in pairs) / n)
    k_bar = math.exp(math.fsum(math.log(k) for _, k in pairs) / n)
    return n, c_bar, k_bar


def summarize(arch: Architecture) -> ArchSummary:
    L, c_bar, k_bar = geometric_means(arch)
    t = arch.transformer
    return ArchSummary(L, c_bar, k_bar, t.hidden_dim, t.dim_feedforward)


@dataclass(frozen=True)
class UniformNet:
    """``layers`` identical convs of fan-in ``channels`` and size ``kernel``."""

    layers: int
    channels: float
    kernel: float

    def layer_pairs(self) -> list[tuple]:
        return [(self.channels, self.kernel)] * self.layers

    def conv_entropy(self) -> float:
        return self.layers * (math.log(self.channels) + 2.0 * math.log(self.kernel))


def uniformize(source) -> UniformNet:
    """Entropy-equivalent uniform conv net of an architecture or layer list."""
    return UniformNet(*geometric_means(source))


def conv_entropy(source) -> float:
    """Analytic conv log-variance, ``sum(ln(c*k^2))``."""
    return conv_stack_log_variance(_layer_pairs(source))


# -- Spearman ---------------------------------------------------------------

def _check_pair(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim != 1 or x.shape != y.shape:
        raise UndefinedCorrelation("x and y must be 1-D sequences of equal length")
    if x.size < 2:
        raise UndefinedCorrelation("need at least two observations")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelation("correlation undefined for a constant sequence")
    return x, y


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    return float(np.dot(a, b) / math.sqrt(np.dot(a, a) * np.dot(b, b)))


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman's rank correlation.

    Without ties this is ``1 - 6*sum(d^2)/(n*(n^2-1))`` on the rank
    differences ``d``; with ties, average ranks are correlated with the
    Pearson formula.
    """
    x, y = _check_pair(x, y)
    rx, ry = rankdata(x), rankdata(y)
    n = x.size
    if len(np.unique(x)) == n and len(np.unique(y)) == n:
        d = rx - ry
        return float(1.0 - 6.0 * np.dot(d, d) / (n * (n * n - 1.0)))
    return _pearson(rx, ry)


def spearman_permutation_test(x, y, n_perm: int = 1000, seed: int = 0,
                              chunk: int = 100) -> tuple[float, float]:
    """Two-sided permutation p-value for Spearman's rho.

    ``p = (1 + #{|rho_perm| >= |rho|}) / (n_perm + 1)``.
    """
    x, y = _check_pair(x, y)
    rho = spearman(x, y)
    rx = rankdata(x)
    ry = rankdata(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = math.sqrt(np.dot(rx, rx) * np.dot(ry, ry))
    rng = np.random.default_rng(seed)
    hits = 0
    tol = 1e-12
    for start in range(0, n_perm, chunk):
        m = min(chunk, n_perm - start)
        perms = np.argsort(rng.random((m, ry.size)), axis=1)
        rhos = ry[perms] @ rx / denom
        hits += int(np.count_nonzero(np.abs(rhos) >= abs(rho) - tol))
    return rho, (hits + 1) / (n_perm + 1)


def significance_stars(p: float) -> str:
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.10:
        return "*"
    return ""


@dataclass(frozen=True)
class CorrelationRow:
    parameter: str
    rho: float
    p_value: float

    @property
    def stars(self) -> str:
        return significance_stars(self.p_value)


def correlation_table(columns: dict, target: str, parameters: Sequence[str],
                      n_perm: int = 1000, seed: int = 0) -> list[CorrelationRow]:
    out = []
    for name in parameters:
        try:
            rho, p = spearman_permutation_test(columns[name], columns[target], n_perm, seed)
        except UndefinedCorrelation:
            rho, p = math.nan, math.nan
        out.append(CorrelationRow(name, rho, p))
    return out


def correlation_table_csv(rows: Sequence[CorrelationRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["parameter", "rho", "p_value", "stars"])
    for r in rows:
        w.writerow([r.parameter, repr(r.rho), repr(r.p_value), r.stars])
    return buf.getvalue()


# -- sampled dataset ----------------------------------------------------------

@dataclass
class CorrelationDataset:
    rows: list = field(default_factory=list)  # (ArchSummary, score)
    weights: str = "A1"
    scorer: str = "analytic"

    def __len__(self):
        return len(self.rows)

    def columns(self) -> dict:
        cols = {name: [] for name in DATASET_COLUMNS}
        for s, score in self.rows:
            for name, value in zip(DATASET_COLUMNS, (s.total_layers, s.avg_channels, s.avg_kernel,
                                                      s.hidden_dim, s.dim_feedforward, score)):
                cols[name].append(value)
        return {k: np.asarray(v, dtype=float) for k, v in cols.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(DATASET_COLUMNS)
        for s, score in self.rows:
            w.writerow([s.total_layers, repr(s.avg_channels), repr(s.avg_kernel),
                        s.hidden_dim, s.dim_feedforward, repr(score)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, weights: str = "A1", scorer: str = "analytic"):
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != DATASET_COLUMNS:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        rows = [(ArchSummary(int(r["L"]), float(r["avg_channels"]), float(r["avg_kernel"]),
                             int(r["hidden_dim"]), int(r["dim_feedforward"])), float(r["score"]))
                for r in reader]
        return cls(rows, weights, scorer)

    def correlations(self, n_perm: int = 1000, seed: int = 0) -> list[CorrelationRow]:
        return correlation_table(self.columns(), "score", DATASET_COLUMNS[:-1], n_perm, seed)


def sample_dataset(seed_arch: Architecture, n: int, weights: FitnessWeights = A1,
                   scorer: str = "analytic", seed: int = 0, *,
                   flops_budget: Optional[int] = None, mc: McConfig = McConfig(),
                   walk_length: int = 10) -> CorrelationDataset:
    """Score ``n`` architectures visited by budget-constrained mutation walks.

    Each walk starts at ``seed_arch`` and proposes ``mutate_arch`` steps;
    proposals over ``flops_budget`` are rejected and every accepted state
    becomes one row. A new walk starts after ``walk_length`` proposals.

    Keep walks short: the width factors shrink channels on average, so long
    walks tie channel count to walk age rather than to fitness.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    require_valid(seed_arch)
    budget = math.inf if flops_budget is None else flops_budget
    if estimate_flops(seed_arch, mc.shape).total > budget:
        raise ValueError("seed architecture exceeds the FLOPs budget")
    rng = np.random.default_rng(np.random.SeedSequence([seed % 2**64, 0xDA7A]))
    rows = []
    current, steps = seed_arch, 0
    while len(rows) < n:
        if steps == walk_length:
            current, steps = seed_arch, 0
        steps += 1
        proposal = mutate_arch(current, rng)
        if estimate_flops(proposal, mc.shape).total > budget:
            continue
        current = proposal
        fv = score_architecture(current, weights, scorer, mc, candidate_seed=True)
        rows.append((summarize(current), fv.value))
    return CorrelationDataset(rows, weights.label(), scorer)


# -- bivariate Transformer sweep ----------------------------------------------

@dataclass
class SweepResult:
    d_model: np.ndarray
    d_feedforward: np.ndarray
    entropy: np.ndarray

    def __len__(self):
        return len(self.entropy)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for d, f, e in zip(self.d_model, self.d_feedforward, self.entropy):
            w.writerow([int(d), int(f), repr(float(e))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SweepResult":
        reader = csv.DictReader(io.StringIO(text))
        if tuple(reader.fieldnames or ()) != SWEEP_COLUMNS:
            raise ValueError(f"unexpected header {reader.fieldnames}")
        rows = [(int(r["d_model"]), int(r["d_feedforward"]), float(r["entropy"])) for r in reader]
        d, f, e = zip(*rows) if rows else ((), (), ())
        return cls(np.array(d), np.array(f), np.array(e, dtype=float))

    def correlations(self, n_perm: int = 1000, seed: int = 0) -> list[CorrelationRow]:
        cols = {"d_model": self.d_model, "d_feedforward": self.d_feedforward,
                "entropy": self.entropy}
        return correlation_table(cols, "entropy", ("d_model", "d_feedforward"), n_perm, seed)


def bivariate_sweep(fixed_cnn: Architecture, weights: FitnessWeights = A1,
                    shape: InputShape = InputShape(), d_models: Sequence[int] = S_MODEL,
                    d_feedforwards: Sequence[int] = S_FEEDFORWARD) -> SweepResult:
    """Analytic fitness over the full ``d_model x d_feedforward`` grid.

    The conv stages of ``fixed_cnn`` stay as they are; only the Transformer
    widths vary. Grid values are used verbatim, so feedforward widths that
    are multiples of 12 but not of 8 are scored without validation.
    """
    require_valid(fixed_cnn)
    shape.check(fixed_cnn)
    tokens = shape.tokens(fixed_cnn)
    t = fixed_cnn.transformer
    rows = []
    for d in d_models:
        for f in d_feedforwards:
            arch = fixed_cnn.replace_stage(5, replace(t, hidden_dim=d, dim_feedforward=f))
            logs = _analytic_log_variances(arch, tokens)
            stats = [StageStats(i + 1, v, s.in_channels)
                     for i, (v, s) in enumerate(zip(logs, arch.stages))]
            rows.append((d, f, fitness(stats, weights).value))
    d, f, e = (np.array(c) for c in zip(*rows))
    return SweepResult(d, f, e.astype(float))
