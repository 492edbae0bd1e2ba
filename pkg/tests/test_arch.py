import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from entronas.arch import (
    ArchFormatError,
    ConvStage,
    InputShape,
    ShapeError,
    TransformerStage,
    conv_flops,
    dumps,
    estimate_flops,
    fixture,
    fixture_path,
    load,
    loads,
    save,
    shallow_seed,
    to_document,
    validate,
)
from entronas.evolution import mutate_arch


def test_fixtures_validate():
    for name in ("a1", "a2"):
        report = validate(fixture(name))
        assert report, str(report)
        assert len(report) == 0


def test_chaining_violation():
    a = fixture("a1")
    a = replace(a, stages=(replace(a[0], out_channels=48),) + a.stages[1:])
    assert a[1].in_channels == 32
    violations = list(validate(a))
    assert len(violations) == 1
    assert violations[0].stage == 2 and violations[0].field == "in_channels"


def test_kernel_violation():
    a = fixture("a1")
    a = replace(a, stages=a.stages[:2] + (replace(a[2], kernel=7),) + a.stages[3:])
    violations = list(validate(a))
    assert [(v.stage, v.field) for v in violations] == [(3, "kernel")]


def test_width_and_type_violations():
    a = fixture("a1")
    bad = replace(a, stages=a.stages[:3] + (replace(a[3], bottleneck_width=100),) + a.stages[4:])
    assert [(v.stage, v.field) for v in validate(bad)] == [(4, "bottleneck_width")]
    swapped = replace(a, stages=a.stages[:5] + (a[4],))
    assert any(v.field == "type" for v in validate(swapped))
    short = replace(a, stages=a.stages[:5])
    assert any(v.field == "stages" for v in validate(short))
    zero = replace(a, stages=a.stages[:5] + (replace(a[5], layers=0),))
    assert [(v.stage, v.field) for v in validate(zero)] == [(6, "layers")]


def test_conv_flops_examples():
    assert conv_flops(64, 64, 3, 32, 3, stride=4) == 442_368
    assert conv_flops(1, 1, 1, 1, 1) == 2


def _a1_spreadsheet_flops(h, w):
    """Layer-by-layer hand table for the A1 fixture, written independently."""
    rows = []  # (H_in, W_in, C_in, C_out, k, stride)
    # C1: 2x pool 320->160, then one unit with stride 2 on the 3x3 conv
    h, w = h // 2, w // 2
    rows += [(h, w, 3, 32, 1, 1), (h, w, 32, 32, 3, 2)]
    h, w = h // 2, w // 2
    rows += [(h, w, 32, 32, 1, 1)]
    stages = [  # (C_in, C_out, bottleneck, layers, stride)
        (32, 128, 40, 3, 1), (128, 448, 80, 8, 2), (448, 1280, 128, 10, 2),
        (1280, 2048, 240, 10, 2)]
    for c_in, c_out, b, layers, stride in stages:
        for u in range(layers):
            s = stride if u == 0 else 1
            rows.append((h, w, c_in if u == 0 else c_out, b, 1, 1))
            rows.append((h, w, b, b, 5, s))
            h, w = h // s, w // s
            rows.append((h, w, b, c_out, 1, 1))
    total = 0
    for hi, wi, ci, co, k, s in rows:
        total += 2 * (hi // s) * (wi // s) * co * (k * k * ci)
    tokens = h * w
    d, ff = 424, 912
    total += 2 * tokens * 2048 * d
    total += 2 * tokens * (4 * d * d + 2 * tokens * d + 2 * d * ff)
    total += 2 * tokens * d * 256
    return total


def test_a1_flops_against_spreadsheet():
    count = estimate_flops(fixture("a1"), InputShape(320, 320))
    assert count.total == _a1_spreadsheet_flops(320, 320)
    assert count.total == 19_418_483_200
    assert count.total == sum(count.per_stage)
    assert all(c >= 0 for c in count.per_stage)


def test_flops_rejects_bad_shape():
    with pytest.raises(ShapeError):
        estimate_flops(fixture("a1"), InputShape(100, 320))


def test_flops_monotone_in_layers():
    a = fixture("a1")
    base = estimate_flops(a).total
    for i in range(5):
        deeper = a.replace_stage(i, replace(a[i], layers=a[i].layers + 1))
        assert estimate_flops(deeper).total > base


def test_flops_area_scaling():
    a = fixture("a2")
    small = estimate_flops(a, InputShape(320, 320))
    big = estimate_flops(a, InputShape(640, 640))
    for i in range(5):
        assert big.per_stage[i] == 4 * small.per_stage[i]
    t = a.transformer
    from entronas.arch import transformer_flops
    assert big.per_stage[5] == transformer_flops(400, t)
    assert small.per_stage[5] == transformer_flops(100, t)


def test_round_trip_fixture(tmp_path):
    a = fixture("a1")
    assert loads(dumps(a)) == a
    save(a, tmp_path / "x.arch")
    assert load(tmp_path / "x.arch") == a


def test_a2_transformer_values():
    a = load(fixture_path("a2"))
    assert a.transformer.hidden_dim == 504
    assert a.transformer.dim_feedforward == 1024
    assert a[4].out_channels == 2000 and a[4].bottleneck_width == 304


def test_missing_stage_names_stage():
    doc = to_document(fixture("a1"))
    doc["stages"] = doc["stages"][:5]
    with pytest.raises(ArchFormatError) as err:
        loads(json.dumps(doc))
    assert "stage 6" in str(err.value)
    assert err.value.path == "$.stages[5]"


@pytest.mark.parametrize("mutate, path", [
    (lambda d: d["stages"][2].pop("kernel"), "$.stages[2].kernel"),
    (lambda d: d["stages"][1].__setitem__("layers", "3"), "$.stages[1].layers"),
    (lambda d: d["stages"][0].__setitem__("has_pool", 1), "$.stages[0].has_pool"),
    (lambda d: d["stages"][5].__setitem__("type", "mlp"), "$.stages[5].type"),
])
def test_malformed_field_paths(mutate, path):
    doc = to_document(fixture("a1"))
    mutate(doc)
    with pytest.raises(ArchFormatError) as err:
        loads(json.dumps(doc))
    assert err.value.path == path


def test_load_garbage():
    with pytest.raises(ArchFormatError):
        loads("not json")
    with pytest.raises(ArchFormatError):
        loads("[1, 2]")


def test_dumps_requires_valid():
    a = fixture("a1")
    bad = a.replace_stage(2, replace(a[2], kernel=7))
    with pytest.raises(ValueError):
        dumps(bad)


def test_shape_parse():
    assert InputShape.parse("64x96") == InputShape(64, 96, 3)
    assert InputShape.parse("32x32x1").channels == 1
    with pytest.raises(ShapeError):
        InputShape.parse("64")


def test_digest_ignores_name():
    a = fixture("a1")
    assert replace(a, name="other").digest() == a.digest()
    assert a.digest() != fixture("a2").digest()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20))
def test_round_trip_mutated(seed, steps):
    rng = np.random.default_rng(seed)
    a = fixture("a1") if seed % 2 else shallow_seed()
    for _ in range(steps):
        a = mutate_arch(a, rng)
    assert loads(dumps(a)) == a


def test_stage_types_fixed():
    a = fixture("a1")
    assert all(isinstance(s, ConvStage) for s in a.stages[:5])
    assert isinstance(a[5], TransformerStage)
    assert a.total_stride == 32
    assert a[0].has_pool and not any(s.has_pool for s in a.stages[1:5])
