"""Backbone architecture model: stage types, validation, FLOPs and file format.

An :class:`Architecture` is six stages in fixed order. C1..C5 are residual
convolution stages built from bottleneck units, C6 is a Transformer encoder
stage. Values are immutable; mutation returns new objects.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence, Union

KERNEL_CHOICES = (3, 5)
CHANNEL_QUANTUM = 8
NUM_STAGES = 6


class ArchFormatError(ValueError):
    """Malformed architecture document. ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ConvLayer:
    """A single linear convolution, the unit of the entropy accounting."""

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class BottleneckUnit:
    in_channels: int
    bottleneck: int
    out_channels: int
    kernel: int
    stride: int

    def convs(self) -> tuple[ConvLayer, ConvLayer, ConvLayer]:
        # stride sits on the k x k conv
        return (
            ConvLayer(self.in_channels, self.bottleneck, 1),
            ConvLayer(self.bottleneck, self.bottleneck, self.kernel, self.stride),
            ConvLayer(self.bottleneck, self.out_channels, 1),
        )


@dataclass(frozen=True)
class ConvStage:
    """Residual stage of ``layers`` bottleneck units.

    ``has_pool`` marks the max-pooling variant: a 2x max-pool at stage entry
    takes a factor 2 of ``stride`` and the first unit applies the rest, so the
    stage always downsamples by exactly ``stride``.
    """

    kernel: int
    in_channels: int
    out_channels: int
    stride: int
    bottleneck_width: int
    layers: int
    has_pool: bool = False

    kind = "resblock"

    @property
    def unit_stride(self) -> int:
        return self.stride // 2 if self.has_pool else self.stride

    def units(self) -> list[BottleneckUnit]:
        out = []
        c_in = self.in_channels
        for i in range(self.layers):
            out.append(BottleneckUnit(c_in, self.bottleneck_width, self.out_channels,
                                      self.kernel, self.unit_stride if i == 0 else 1))
            c_in = self.out_channels
        return out

    def conv_layers(self) -> list[ConvLayer]:
        return [conv for unit in self.units() for conv in unit.convs()]


@dataclass(frozen=True)
class TransformerStage:
    """Encoder stage: in-projection, ``layers`` attention+FFN layers, out-projection."""

    in_channels: int
    out_channels: int
    hidden_dim: int
    dim_feedforward: int
    layers: int = 1

    kind = "transformer"
    stride = 1


Stage = Union[ConvStage, TransformerStage]


@dataclass(frozen=True)
class Architecture:
    stages: tuple
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))

    def __iter__(self) -> Iterator[Stage]:
        return iter(self.stages)

    def __len__(self):
        return len(self.stages)

    def __getitem__(self, i):
        return self.stages[i]

    @property
    def conv_stages(self) -> tuple:
        return tuple(s for s in self.stages if isinstance(s, ConvStage))

    @property
    def transformer(self) -> TransformerStage:
        return self.stages[-1]

    @property
    def total_stride(self) -> int:
        return math.prod(s.stride for s in self.conv_stages)

    def conv_layers(self) -> list[ConvLayer]:
        return [conv for s in self.conv_stages for conv in s.conv_layers()]

    def replace_stage(self, index: int, stage: Stage) -> "Architecture":
        """Return a copy with ``stages[index]`` swapped, re-chaining the next stage."""
        stages = list(self.stages)
        stages[index] = stage
        if index + 1 < len(stages) and stages[index + 1].in_channels != stage.out_channels:
            stages[index + 1] = replace(stages[index + 1], in_channels=stage.out_channels)
        return Architecture(tuple(stages), self.name)

    def digest(self) -> str:
        """Content hash, independent of ``name``."""
        payload = json.dumps([_stage_to_dict(s) for s in self.stages], sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class InputShape:
    height: int = 320
    width: int = 320
    channels: int = 3

    def __post_init__(self):
        if min(self.height, self.width, self.channels) <= 0:
            raise ShapeError(f"non-positive input shape {self}")

    @classmethod
    def parse(cls, text: str) -> "InputShape":
        """Parse ``HxW`` or ``HxWxC``."""
        try:
            parts = [int(p) for p in text.lower().split("x")]
        except ValueError:
            raise ShapeError(f"cannot parse shape {text!r}") from None
        if len(parts) not in (2, 3):
            raise ShapeError(f"cannot parse shape {text!r}")
        return cls(*parts)

    def check(self, arch: Architecture) -> None:
        total = arch.total_stride
        if self.height % total or self.width % total:
            raise ShapeError(
                f"input {self.height}x{self.width} not divisible by total stride {total}")

    def tokens(self, arch: Architecture) -> int:
        total = arch.total_stride
        return (self.height // total) * (self.width // total)


@dataclass(frozen=True)
class FlopsCount:
    per_stage: tuple

    @property
    def total(self) -> int:
        return sum(self.per_stage)


@dataclass(frozen=True)
class Violation:
    stage: int  # 1-based, 0 for whole-architecture problems
    field: str
    message: str

    def __str__(self):
        where = f"C{self.stage}" if self.stage else "arch"
        return f"{where}.{self.field}: {self.message}"


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple = field(default_factory=tuple)

    def __bool__(self):
        # truthy when valid, so ``if validate(a):`` reads naturally
        return not self.violations

    def __len__(self):
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def __str__(self):
        return "\n".join(str(v) for v in self.violations) or "ok"


def _is_quantized(value) -> bool:
    return isinstance(value, int) and value > 0 and value % CHANNEL_QUANTUM == 0


def validate(arch: Architecture) -> ValidationReport:
    """Check every stage invariant and the channel chaining.

    Violations are returned, never raised. The image-facing ``in_channels`` of
    C1 only needs to be positive; every other width must be a positive
    multiple of 8.
    """
    found = []

    def bad(stage, name, message):
        found.append(Violation(stage, name, message))

    if len(arch.stages) != NUM_STAGES:
        bad(0, "stages", f"expected {NUM_STAGES} stages, got {len(arch.stages)}")
    for i, stage in enumerate(arch.stages, start=1):
        expect = TransformerStage if i == NUM_STAGES else ConvStage
        if not isinstance(stage, expect):
            bad(i, "type", f"expected {expect.kind}, got {getattr(stage, 'kind', type(stage).__name__)}")
            continue
        if isinstance(stage, ConvStage):
            if stage.kernel not in KERNEL_CHOICES:
                bad(i, "kernel", f"{stage.kernel} not in {KERNEL_CHOICES}")
            widths = ["out_channels", "bottleneck_width"]
            if i > 1:
                widths.insert(0, "in_channels")
            elif not (isinstance(stage.in_channels, int) and stage.in_channels > 0):
                bad(i, "in_channels", f"{stage.in_channels} is not a positive integer")
            for name in widths:
                if not _is_quantized(getattr(stage, name)):
                    bad(i, name, f"{getattr(stage, name)} is not a positive multiple of {CHANNEL_QUANTUM}")
            if not (isinstance(stage.stride, int) and stage.stride >= 1):
                bad(i, "stride", f"{stage.stride} is not a positive integer")
            elif stage.has_pool and stage.stride % 2:
                bad(i, "stride", f"pooled stage needs an even stride, got {stage.stride}")
        else:
            for name in ("in_channels", "out_channels", "hidden_dim", "dim_feedforward"):
                if not _is_quantized(getattr(stage, name)):
                    bad(i, name, f"{getattr(stage, name)} is not a positive multiple of {CHANNEL_QUANTUM}")
        if not (isinstance(stage.layers, int) and stage.layers >= 1):
            bad(i, "layers", f"{stage.layers} < 1")
    for i in range(1, len(arch.stages)):
        prev, cur = arch.stages[i - 1], arch.stages[i]
        if cur.in_channels != prev.out_channels:
            bad(i + 1, "in_channels",
                f"{cur.in_channels} does not chain from C{i}.out_channels={prev.out_channels}")
    return ValidationReport(tuple(found))


class InvalidArchitecture(ValueError):
    def __init__(self, report: ValidationReport):
        super().__init__(f"invalid architecture:\n{report}")
        self.report = report


def require_valid(arch: Architecture) -> None:
    report = validate(arch)
    if not report:
        raise InvalidArchitecture(report)


# -- FLOPs -----------------------------------------------------------------

def conv_flops(height: int, width: int, in_channels: int, out_channels: int,
               kernel: int, stride: int = 1) -> int:
    """Multiply-adds of one same-padded conv, counted as 2 FLOPs each."""
    return 2 * (height // stride) * (width // stride) * out_channels * kernel * kernel * in_channels


def transformer_flops(tokens: int, stage: TransformerStage) -> int:
    d, ff, s = stage.hidden_dim, stage.dim_feedforward, tokens
    per_layer = 2 * s * (4 * d * d + 2 * s * d + 2 * d * ff)
    return (2 * s * stage.in_channels * d + stage.layers * per_layer
            + 2 * s * d * stage.out_channels)


def _conv_stage_flops(stage: ConvStage, h: int, w: int) -> tuple[int, int, int]:
    total = 0
    if stage.has_pool:
        h, w = h // 2, w // 2
    for conv in stage.conv_layers():
        total += conv_flops(h, w, conv.in_channels, conv.out_channels, conv.kernel, conv.stride)
        h, w = h // conv.stride, w // conv.stride
    return total, h, w


def estimate_flops(arch: Architecture, shape: InputShape = InputShape()) -> FlopsCount:
    """FLOPs of the backbone at ``shape``.

    Convs count ``2*H_out*W_out*C_out*k*k*C_in``; pooling and residual adds
    are free. Raises :class:`ShapeError` when the input does not divide the
    total stride.
    """
    shape.check(arch)
    h, w = shape.height, shape.width
    counts = []
    for stage in arch.stages:
        if isinstance(stage, ConvStage):
            n, h, w = _conv_stage_flops(stage, h, w)
        else:
            n = transformer_flops(h * w, stage)
        counts.append(n)
    return FlopsCount(tuple(counts))


# -- interchange format -----------------------------------------------------

def _stage_to_dict(stage: Stage) -> dict:
    if isinstance(stage, ConvStage):
        return {"type": "resblock", "kernel": stage.kernel, "in": stage.in_channels,
                "out": stage.out_channels, "stride": stage.stride,
                "bottleneck": stage.bottleneck_width, "layers": stage.layers,
                "has_pool": stage.has_pool}
    return {"type": "transformer", "in": stage.in_channels, "out": stage.out_channels,
            "hidden_dim": stage.hidden_dim, "dim_feedforward": stage.dim_feedforward,
            "layers": stage.layers}


def to_document(arch: Architecture) -> dict:
    return {"name": arch.name, "stages": [_stage_to_dict(s) for s in arch.stages]}


def dumps(arch: Architecture) -> str:
    """Serialize a valid architecture to the ``.arch`` JSON text."""
    require_valid(arch)
    return json.dumps(to_document(arch), indent=2) + "\n"


_CONV_KEYS = {"kernel": "kernel", "in": "in_channels", "out": "out_channels",
              "stride": "stride", "bottleneck": "bottleneck_width", "layers": "layers"}
_TRANSFORMER_KEYS = {"in": "in_channels", "out": "out_channels", "hidden_dim": "hidden_dim",
                     "dim_feedforward": "dim_feedforward", "layers": "layers"}


def _read_int(doc: dict, key: str, path: str) -> int:
    if key not in doc:
        raise ArchFormatError(f"{path}.{key}", "missing field")
    value = doc[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ArchFormatError(f"{path}.{key}", f"expected integer, got {value!r}")
    return value


def _stage_from_dict(doc, path: str) -> Stage:
    if not isinstance(doc, dict):
        raise ArchFormatError(path, f"expected object, got {type(doc).__name__}")
    kind = doc.get("type")
    if kind == "resblock":
        kwargs = {attr: _read_int(doc, key, path) for key, attr in _CONV_KEYS.items()}
        has_pool = doc.get("has_pool", False)
        if not isinstance(has_pool, bool):
            raise ArchFormatError(f"{path}.has_pool", f"expected boolean, got {has_pool!r}")
        return ConvStage(has_pool=has_pool, **kwargs)
    if kind == "transformer":
        return TransformerStage(**{attr: _read_int(doc, key, path)
                                   for key, attr in _TRANSFORMER_KEYS.items()})
    raise ArchFormatError(f"{path}.type", f"unknown stage type {kind!r}")


def from_document(doc) -> Architecture:
    if not isinstance(doc, dict):
        raise ArchFormatError("$", "document must be an object")
    stages = doc.get("stages")
    if not isinstance(stages, list):
        raise ArchFormatError("$.stages", "missing stage list")
    if len(stages) < NUM_STAGES:
        raise ArchFormatError(f"$.stages[{len(stages)}]",
                              f"missing stage {len(stages) + 1} (C{len(stages) + 1})")
    if len(stages) > NUM_STAGES:
        raise ArchFormatError("$.stages", f"expected {NUM_STAGES} stages, got {len(stages)}")
    name = doc.get("name", "")
    if not isinstance(name, str):
        raise ArchFormatError("$.name", "expected string")
    return Architecture(tuple(_stage_from_dict(s, f"$.stages[{i}]") for i, s in enumerate(stages)),
                        name)


def loads(text: str) -> Architecture:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ArchFormatError("$", f"not valid JSON ({exc.msg} at line {exc.lineno})") from None
    return from_document(doc)


def save(arch: Architecture, path) -> None:
    Path(path).write_text(dumps(arch))


def load(path) -> Architecture:
    return loads(Path(path).read_text())


def fixture(name: str) -> Architecture:
    """Bundled search results: ``"a1"`` or ``"a2"``."""
    text = resources.files("entronas.fixtures").joinpath(f"{name.lower()}.arch").read_text()
    return loads(text)


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("entronas.fixtures").joinpath(f"{name.lower()}.arch")))


def make_architecture(convs: Sequence[Sequence[int]], transformer: Sequence[int],
                      name: str = "", pool_first: bool = True) -> Architecture:
    """Build from compact rows.

    ``convs`` rows are ``(kernel, in, out, stride, bottleneck, layers)`` and
    ``transformer`` is ``(in, out, hidden_dim, dim_feedforward, layers)``.
    """
    stages = [ConvStage(*row, has_pool=(pool_first and i == 0)) for i, row in enumerate(convs)]
    stages.append(TransformerStage(*transformer))
    return Architecture(tuple(stages), name)


def shallow_seed(name: str = "shallow") -> Architecture:
    """A small single-unit-per-stage starting point for searches."""
    return make_architecture(
        [(3, 3, 32, 4, 16, 1),
         (3, 32, 48, 1, 16, 1),
         (3, 48, 96, 2, 24, 1),
         (3, 96, 192, 2, 48, 1),
         (3, 192, 384, 2, 96, 1)],
        (384, 256, 256, 512, 1), name=name)
