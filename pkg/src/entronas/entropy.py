"""Per-stage differential-entropy proxies.

For a zero-mean Gaussian the differential entropy is ``0.5*ln(2*pi*e*var)``,
so the log-variance of one output element ranks architectures the same way.
Two estimators are provided:

* analytic: every linear map with fan-in ``n`` multiplies the variance by
  ``n`` when inputs and weights are standard Gaussian, so the log-variance is
  a sum of ``ln(fan_in)`` terms (``ln(c*k*k)`` per conv);
* Monte-Carlo: forward standard-Gaussian noise through randomly initialized
  weights, dividing feature maps by their standard deviation at the usual
  batch-norm positions and adding the recorded log-variances back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .arch import (
    Architecture,
    ConvLayer,
    ConvStage,
    InputShape,
    TransformerStage,
    require_valid,
)


class DegenerateVarianceError(ArithmeticError):
    """A feature map had zero or non-finite variance; the candidate cannot be scored."""


@dataclass(frozen=True)
class StageStats:
    stage_index: int
    log_effective_variance: float
    in_channels: int


@dataclass
class ScaleLedger:
    """Log-variances divided out at each scale-normalization point, in order."""

    entries: list = field(default_factory=list)

    def record(self, log_variance: float) -> None:
        if not math.isfinite(log_variance):
            raise DegenerateVarianceError(f"non-finite ledger entry {log_variance}")
        self.entries.append(float(log_variance))

    def total(self) -> float:
        return math.fsum(self.entries)

    def __len__(self):
        return len(self.entries)


@dataclass(frozen=True)
class McConfig:
    repeats: int = 8
    seed: int = 0
    shape: InputShape = InputShape()
    dtype: str = "float64"

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError(f"repeats must be >= 1, got {self.repeats}")


# -- analytic ---------------------------------------------------------------

def conv_log_gain(layer: ConvLayer) -> float:
    return math.log(layer.in_channels * layer.kernel * layer.kernel)


def conv_stack_log_variance(layers: Iterable) -> float:
    """Sum of ``ln(c*k^2)`` over ``layers``.

    Accepts :class:`ConvLayer` objects or ``(channels, kernel)`` pairs, where
    the channel count is the fan-in of the layer. Values may be non-integer.
    """
    terms = []
    for layer in layers:
        if isinstance(layer, ConvLayer):
            c, k = layer.in_channels, layer.kernel
        else:
            c, k = layer
        terms.append(math.log(c) + 2.0 * math.log(k))
    return math.fsum(terms)


def transformer_log_gain(stage: TransformerStage, tokens: int) -> float:
    """Log-variance added by an encoder stage.

    The in-projection contributes ``ln C_in`` once. Each encoder layer
    contributes ``ln d_model`` for the value projection, ``ln S`` for the
    attention average (Softmax replaced by its bound ``var(a) < 1``) and
    ``ln d_model + ln d_ff`` for the two FFN matrices. The out-projection
    only adapts width for downstream consumers and is not counted.
    """
    per_layer = (2.0 * math.log(stage.hidden_dim) + math.log(stage.dim_feedforward)
                 + math.log(tokens))
    return math.log(stage.in_channels) + stage.layers * per_layer


def _analytic_log_variances(arch: Architecture, tokens: int) -> list[float]:
    running = 0.0
    out = []
    for stage in arch.stages:
        if isinstance(stage, ConvStage):
            running += conv_stack_log_variance(stage.conv_layers())
        else:
            running += transformer_log_gain(stage, tokens)
        out.append(running)
    return out


def analytic_stage_stats(arch: Architecture, shape: InputShape = InputShape()) -> tuple:
    """Cumulative analytic log-variance at the output of each of the six stages."""
    require_valid(arch)
    shape.check(arch)
    logs = _analytic_log_variances(arch, shape.tokens(arch))
    return tuple(StageStats(i + 1, v, s.in_channels)
                 for i, (v, s) in enumerate(zip(logs, arch.stages)))


# -- scale normalization ------------------------------------------------------

def scale_normalize(x: np.ndarray) -> tuple[np.ndarray, float]:
    """Divide ``x`` by its standard deviation.

    Returns the scaled array and ``ln`` of the pre-scaling (population)
    variance. Raises :class:`DegenerateVarianceError` for zero or non-finite
    variance.
    """
    x = np.asarray(x)
    if x.size < 2:
        raise DegenerateVarianceError("degenerate variance: need at least 2 elements")
    with np.errstate(over="ignore", invalid="ignore"):
        var = float(np.var(x, dtype=np.float64))
    if not math.isfinite(var) or var <= 0.0:
        raise DegenerateVarianceError(f"degenerate variance ({var})")
    return x / x.dtype.type(math.sqrt(var)), math.log(var)


def reconstruct_effective_log_variance(ledger, final_log_variance: float) -> float:
    """Log-variance the unscaled network would have produced.

    Scaling by a constant commutes with every linear map, so the unscaled
    output equals the scaled one times the product of all divided-out
    standard deviations; in log domain the ledger entries simply add.
    """
    entries = ledger.entries if isinstance(ledger, ScaleLedger) else list(ledger)
    return final_log_variance + math.fsum(entries)


# -- Monte-Carlo forward pass -------------------------------------------------

def conv2d(x: np.ndarray, weight: np.ndarray, stride: int = 1) -> np.ndarray:
    """Circular-padded 'same' convolution of an ``(H, W, C)`` map.

    ``weight`` has shape ``(k, k, C, O)``. Wrap padding keeps every output a
    sum of exactly ``k*k*C`` products, even on maps smaller than the kernel.
    """
    k = weight.shape[0]
    if k == 1:
        return x[::stride, ::stride] @ weight[0, 0]
    p = k // 2
    xp = np.pad(x, ((p, p), (p, p), (0, 0)), mode="wrap")
    win = sliding_window_view(xp, (k, k), axis=(0, 1))[::stride, ::stride]
    ho, wo, c = win.shape[:3]
    cols = win.reshape(ho * wo, c * k * k)
    w = weight.transpose(2, 0, 1, 3).reshape(c * k * k, -1)
    return (cols @ w).reshape(ho, wo, -1)


def max_pool2(x: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    return x[: h - h % 2, : w - w % 2].reshape(h // 2, 2, w // 2, 2, c).max(axis=(1, 3))


def _shortcut(x: np.ndarray, stride: int, out_channels: int) -> np.ndarray:
    # parameter-free: subsample, then zero-pad or truncate channels
    s = x[::stride, ::stride]
    c = s.shape[-1]
    if c > out_channels:
        return s[..., :out_channels]
    if c < out_channels:
        return np.pad(s, ((0, 0), (0, 0), (0, out_channels - c)))
    return s


def _gaussian(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    return rng.standard_normal(shape, dtype=dtype)


def _log_var(x: np.ndarray) -> float:
    with np.errstate(over="ignore", invalid="ignore"):
        var = float(np.var(x, dtype=np.float64))
    if math.isnan(var):
        return math.nan
    return math.log(var) if var > 0 else -math.inf


def mc_conv_stack(layers: Sequence[ConvLayer], height: int, width: int, repeats: int = 1,
                  seed: int = 0, scale: bool = True, dtype="float64") -> np.ndarray:
    """Log output variance of a plain conv stack, one value per repeat.

    With ``scale=True`` the map is normalized after every conv and the
    returned values are reconstructed effective log-variances; otherwise
    they are the raw log-variances (possibly ``inf`` after overflow).
    """
    dtype = np.dtype(dtype)
    out = np.empty(repeats)
    for r in range(repeats):
        rng = _repeat_rng(seed, r)
        x = _gaussian(rng, (height, width, layers[0].in_channels), dtype)
        ledger = ScaleLedger()
        with np.errstate(over="ignore", invalid="ignore"):
            for layer in layers:
                w = _gaussian(rng, (layer.kernel, layer.kernel, layer.in_channels,
                                    layer.out_channels), dtype)
                x = conv2d(x, w, layer.stride)
                if scale:
                    x, logvar = scale_normalize(x)
                    ledger.record(logvar)
        out[r] = reconstruct_effective_log_variance(ledger, _log_var(x))
    return out


def _repeat_rng(seed: int, repeat: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed % 2**64, repeat]))


def _forward_conv_stage(x, stage: ConvStage, rng, ledger: ScaleLedger):
    dtype = x.dtype
    if stage.has_pool:
        x = max_pool2(x)
    for unit in stage.units():
        y = x
        for conv in unit.convs():
            w = _gaussian(rng, (conv.kernel, conv.kernel, conv.in_channels, conv.out_channels),
                          dtype)
            y = conv2d(y, w, conv.stride)
        y = y + _shortcut(x, unit.stride, unit.out_channels)
        x, logvar = scale_normalize(y)
        ledger.record(logvar)
    return x


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=1, keepdims=True)
    return z


def _forward_transformer(x, stage: TransformerStage, rng, ledger: ScaleLedger):
    dtype = x.dtype
    d, ff = stage.hidden_dim, stage.dim_feedforward
    tokens = x.reshape(-1, x.shape[-1])
    h = tokens @ _gaussian(rng, (stage.in_channels, d), dtype)
    h, logvar = scale_normalize(h)
    ledger.record(logvar)
    for _ in range(stage.layers):
        q = h @ _gaussian(rng, (d, d), dtype)
        k = h @ _gaussian(rng, (d, d), dtype)
        v = h @ _gaussian(rng, (d, d), dtype)
        attn = _softmax_rows((q @ k.T) / dtype.type(math.sqrt(d)))
        h, logvar = scale_normalize(attn @ v)
        ledger.record(logvar)
        y = h @ _gaussian(rng, (d, ff), dtype) @ _gaussian(rng, (ff, d), dtype)
        h, logvar = scale_normalize(y)
        ledger.record(logvar)
    return h


def _mc_single(arch: Architecture, shape: InputShape, rng, dtype) -> list[float]:
    x = _gaussian(rng, (shape.height, shape.width, shape.channels), dtype)
    ledger = ScaleLedger()
    logs = []
    with np.errstate(over="raise", invalid="raise"):
        try:
            for stage in arch.stages:
                if isinstance(stage, ConvStage):
                    x = _forward_conv_stage(x, stage, rng, ledger)
                else:
                    x = _forward_transformer(x, stage, rng, ledger)
                logs.append(reconstruct_effective_log_variance(ledger, _log_var(x)))
        except FloatingPointError as exc:
            raise DegenerateVarianceError(f"non-finite intermediate: {exc}") from None
    return logs


def mc_stage_stats(arch: Architecture, cfg: McConfig = McConfig()) -> tuple:
    """Monte-Carlo effective log-variance at the output of each stage.

    Each repeat draws a fresh standard-Gaussian input and fresh
    standard-Gaussian weights for every projection; the per-stage values are
    averaged over repeats in log domain. Results depend only on
    ``(arch, cfg)``.
    """
    require_valid(arch)
    if arch.stages[0].in_channels != cfg.shape.channels:
        raise ValueError(f"input has {cfg.shape.channels} channels, "
                         f"C1 expects {arch.stages[0].in_channels}")
    cfg.shape.check(arch)
    dtype = np.dtype(cfg.dtype)
    runs = np.array([_mc_single(arch, cfg.shape, _repeat_rng(cfg.seed, r), dtype)
                     for r in range(cfg.repeats)])
    means = runs.mean(axis=0)
    if not np.all(np.isfinite(means)):
        raise DegenerateVarianceError("non-finite stage statistic")
    return tuple(StageStats(i + 1, float(m), s.in_channels)
                 for i, (m, s) in enumerate(zip(means, arch.stages)))


def stage_stats(arch: Architecture, scorer: str = "analytic", mc: McConfig = McConfig()) -> tuple:
    """Dispatch on scorer name: ``"analytic"`` or ``"mc"``."""
    if scorer == "analytic":
        return analytic_stage_stats(arch, mc.shape)
    if scorer in ("mc", "monte-carlo"):
        return mc_stage_stats(arch, mc)
    raise ValueError(f"unknown scorer {scorer!r}")
