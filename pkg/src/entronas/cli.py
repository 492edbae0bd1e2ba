"""Command-line entry point.

Exit codes: 0 success, 1 invalid architecture, 2 configuration error,
3 scoring failure. Every command that takes ``--out DIR`` writes a
``manifest.json`` next to its outputs; passing that manifest back as
``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import __version__
from .analysis import (
    bivariate_sweep,
    correlation_table_csv,
    conv_entropy,
    sample_dataset,
    uniformize,
)
from .arch import (
    ArchFormatError,
    InputShape,
    InvalidArchitecture,
    ShapeError,
    estimate_flops,
    fixture,
    from_document,
    loads,
    shallow_seed,
    to_document,
    validate,
)
from .entropy import DegenerateVarianceError, McConfig, stage_stats
from .evolution import SearchConfig, SearchConfigError, evolve
from .fitness import FitnessWeights, fitness, stage_score

EXIT_OK, EXIT_INVALID, EXIT_CONFIG, EXIT_SCORING = 0, 1, 2, 3

DEFAULTS = {
    "scorer": "mc",
    "repeats": 8,
    "seed": 0,
    "shape": "320x320",
    "weights": "A1",
    "population": 64,
    "iterations": 20000,
    "flops_budget": None,
    "workers": 1,
    "batch_size": 1,
    "init": "clone",
    "mutable_stages": None,
    "mutable_params": None,
    "n": 10000,
    "perms": 1000,
    "walk_length": 10,
}


class ConfigError(Exception):
    pass


class ArchFileError(Exception):
    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


def load_arch(ref):
    """Architecture from a path, an inline document, or a builtin name."""
    if isinstance(ref, dict):
        doc = ref
    elif isinstance(ref, str) and ref.lower() in ("a1", "a2") and not Path(ref).exists():
        return fixture(ref)
    elif isinstance(ref, str) and ref.lower() == "shallow" and not Path(ref).exists():
        return shallow_seed()
    else:
        try:
            text = Path(ref).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read architecture {ref!r}: {exc}") from None
        try:
            arch = loads(text)
        except ArchFormatError as exc:
            raise ArchFileError(str(exc)) from None
        return _checked(arch)
    try:
        return _checked(from_document(doc))
    except ArchFormatError as exc:
        raise ArchFileError(str(exc)) from None


def _checked(arch):
    report = validate(arch)
    if not report:
        raise ArchFileError("invalid architecture", [str(v) for v in report])
    return arch


def _read_config(path):
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    # a manifest carries its resolved config under "config"
    if "command" in doc and isinstance(doc.get("config"), dict):
        doc = doc["config"]
    return doc


def resolve(args, keys) -> dict:
    """Flags override config-file fields override defaults."""
    file_cfg = _read_config(getattr(args, "config", None))
    out = {}
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in file_cfg:
            out[key] = file_cfg[key]
        else:
            out[key] = DEFAULTS.get(key)
    unknown = set(file_cfg) - set(keys)
    if unknown:
        raise ConfigError(f"unknown config fields: {sorted(unknown)}")
    return out


def _shape(text) -> InputShape:
    try:
        return InputShape.parse(text)
    except ShapeError as exc:
        raise ConfigError(str(exc)) from None


def _weights(text) -> FitnessWeights:
    try:
        return FitnessWeights.parse(str(text))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _mc(cfg) -> McConfig:
    if int(cfg["repeats"]) < 1:
        raise ConfigError("repeats must be >= 1")
    return McConfig(int(cfg["repeats"]), int(cfg["seed"]), _shape(cfg["shape"]))


def _scorer(name) -> str:
    if name in ("mc", "monte-carlo"):
        return "mc"
    if name == "analytic":
        return "analytic"
    raise ConfigError(f"unknown scorer {name!r}")


def _check_shape(arch, shape):
    try:
        shape.check(arch)
    except ShapeError as exc:
        raise ConfigError(str(exc)) from None


def _write_outputs(out_dir, command, cfg, seed, started, files: dict):
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (out / name).write_text(text)
    manifest = {"command": command, "config": cfg, "seed": seed, "version": __version__,
                "started": started, "finished": time.time(), "outputs": sorted(files)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# -- commands -----------------------------------------------------------------

def cmd_score(args) -> int:
    started = time.time()
    cfg = resolve(args, ["arch", "scorer", "repeats", "seed", "shape", "weights"])
    if cfg["arch"] is None:
        raise ConfigError("no architecture given")
    arch = load_arch(cfg["arch"])
    cfg["arch"] = to_document(arch)
    mc = _mc(cfg)
    _check_shape(arch, mc.shape)
    scorer = _scorer(cfg["scorer"])
    weights = _weights(cfg["weights"])
    stats = stage_stats(arch, scorer, mc)
    fv = fitness(stats, weights)
    flops = estimate_flops(arch, mc.shape)
    report = {
        "name": arch.name, "scorer": scorer, "weights": list(weights.a), "shape": cfg["shape"],
        "stages": [{"stage": f"C{s.stage_index}", "log_effective_variance": s.log_effective_variance,
                    "in_channels": s.in_channels, "z": stage_score(s), "flops": f}
                   for s, f in zip(stats, flops.per_stage)],
        "fitness": fv.value, "flops": flops.total,
    }
    lines = [f"architecture {arch.name or arch.digest()}  scorer={scorer}  "
             f"weights={weights.label()}  shape={cfg['shape']}",
             f"{'stage':<6}{'ln var':>14}{'Z_prime':>14}{'FLOPs':>16}"]
    for row in report["stages"]:
        lines.append(f"{row['stage']:<6}{row['log_effective_variance']:>14.6f}"
                     f"{row['z']:>14.6f}{row['flops']:>16d}")
    lines.append(f"Z(G) = {fv.value:.6f}")
    lines.append(f"FLOPs = {flops.total}")
    print("\n".join(lines))
    _write_outputs(args.out, "score", cfg, mc.seed, started,
                   {"report.json": json.dumps(report, indent=2) + "\n"})
    return EXIT_OK


def _search_config(cfg) -> SearchConfig:
    if cfg["seed_arch"] is None:
        raise ConfigError("search needs seed_arch")
    arch = load_arch(cfg["seed_arch"])
    mc = _mc(cfg)
    _check_shape(arch, mc.shape)
    if cfg["flops_budget"] is None:
        raise ConfigError("search needs flops_budget")
    stages = cfg["mutable_stages"]
    params = cfg["mutable_params"]
    try:
        return SearchConfig(
            seed_arch=arch, flops_budget=int(float(cfg["flops_budget"])),
            population=int(cfg["population"]), iterations=int(cfg["iterations"]),
            weights=_weights(cfg["weights"]), scorer=_scorer(cfg["scorer"]), mc=mc,
            seed=int(cfg["seed"]),
            mutable_stages=None if stages is None else tuple(int(i) - 1 for i in stages),
            mutable_params=None if params is None else tuple(params),
            init=cfg["init"], batch_size=int(cfg["batch_size"]), workers=int(cfg["workers"]))
    except SearchConfigError as exc:
        raise ConfigError(str(exc)) from None


def cmd_search(args) -> int:
    started = time.time()
    keys = ["seed_arch", "scorer", "repeats", "seed", "shape", "weights", "population",
            "iterations", "flops_budget", "workers", "batch_size", "init",
            "mutable_stages", "mutable_params"]
    cfg = resolve(args, keys)
    sc = _search_config(cfg)
    cfg["seed_arch"] = to_document(sc.seed_arch)
    try:
        result = evolve(sc)
    except SearchConfigError as exc:
        raise ConfigError(str(exc)) from None
    best = result.best
    print(f"best fitness {result.best_fitness.value:.6f}  digest {best.digest()}  "
          f"FLOPs {estimate_flops(best, sc.mc.shape).total}  "
          f"rejected {result.history.records[-1].rejected if len(result.history) else 0}")
    doc = to_document(best)
    doc["name"] = doc["name"] or "best"
    _write_outputs(args.out, "search", cfg, sc.seed, started,
                   {"best.arch": json.dumps(doc, indent=2) + "\n",
                    "history.jsonl": result.history.to_jsonl()})
    return EXIT_OK


def cmd_correlate(args) -> int:
    started = time.time()
    keys = ["seed_arch", "n", "weights", "scorer", "repeats", "seed", "shape", "flops_budget",
            "perms", "walk_length"]
    cfg = resolve(args, keys)
    if args.scorer is None and "scorer" not in _read_config(args.config):
        cfg["scorer"] = "analytic"
    cfg["seed_arch"] = cfg["seed_arch"] or "shallow"
    arch = load_arch(cfg["seed_arch"])
    cfg["seed_arch"] = to_document(arch)
    mc = _mc(cfg)
    _check_shape(arch, mc.shape)
    budget = cfg["flops_budget"]
    if budget is None:
        budget = estimate_flops(fixture("a1"), mc.shape).total
    cfg["flops_budget"] = int(float(budget))
    try:
        ds = sample_dataset(arch, int(cfg["n"]), _weights(cfg["weights"]), _scorer(cfg["scorer"]),
                            int(cfg["seed"]), flops_budget=cfg["flops_budget"], mc=mc,
                            walk_length=int(cfg["walk_length"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    table = ds.correlations(int(cfg["perms"]), int(cfg["seed"]))
    print(f"{'parameter':<18}{'rho':>9}  {'p':>8}")
    for r in table:
        print(f"{r.parameter:<18}{r.rho:>9.3f}{r.stars:<3}{r.p_value:>8.4f}")
    _write_outputs(args.out, "correlate", cfg, int(cfg["seed"]), started,
                   {"dataset.csv": ds.to_csv(), "correlations.csv": correlation_table_csv(table)})
    return EXIT_OK


def cmd_sweep(args) -> int:
    started = time.time()
    cfg = resolve(args, ["fixed", "weights", "shape", "perms", "seed"])
    if cfg["fixed"] is None:
        raise ConfigError("sweep needs --fixed ARCH")
    arch = load_arch(cfg["fixed"])
    cfg["fixed"] = to_document(arch)
    shape = _shape(cfg["shape"])
    _check_shape(arch, shape)
    result = bivariate_sweep(arch, _weights(cfg["weights"]), shape)
    table = result.correlations(int(cfg["perms"]), int(cfg["seed"]))
    print(f"{len(result)} grid points")
    for r in table:
        print(f"{r.parameter:<18}{r.rho:>9.3f}{r.stars:<3}{r.p_value:>8.4f}")
    _write_outputs(args.out, "sweep", cfg, int(cfg["seed"]), started,
                   {"sweep.csv": result.to_csv(), "correlations.csv": correlation_table_csv(table)})
    return EXIT_OK


def cmd_uniformize(args) -> int:
    started = time.time()
    cfg = resolve(args, ["arch"])
    if cfg["arch"] is None:
        raise ConfigError("no architecture given")
    arch = load_arch(cfg["arch"])
    cfg["arch"] = to_document(arch)
    net = uniformize(arch)
    original = conv_entropy(arch)
    doc = {"type": "uniform", "source": arch.name, "layers": net.layers,
           "channels": net.channels, "kernel": net.kernel,
           "transformer": to_document(arch)["stages"][-1],
           "conv_entropy": net.conv_entropy(), "source_conv_entropy": original}
    print(f"L={net.layers}  c_bar={net.channels:.6f}  k_bar={net.kernel:.6f}")
    print(f"conv entropy: original {original:.9f}  uniform {net.conv_entropy():.9f}")
    _write_outputs(args.out, "uniformize", cfg, 0, started,
                   {"uniform.json": json.dumps(doc, indent=2) + "\n"})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="entronas", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scoring=True, config_flag=True):
        if config_flag:
            p.add_argument("--config", help="JSON config or a manifest from an earlier run")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        if scoring:
            p.add_argument("--scorer", choices=["analytic", "mc"])
            p.add_argument("--repeats", type=int)
            p.add_argument("--shape", help="HxW scoring resolution")
            p.add_argument("--weights", help="A1, A2 or six comma-separated numbers")

    p = sub.add_parser("score", help="score one architecture")
    p.add_argument("arch", nargs="?")
    common(p)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("search", help="run the evolutionary search")
    p.add_argument("config", nargs="?", help="search config (JSON) or manifest")
    p.add_argument("--seed-arch", dest="seed_arch")
    p.add_argument("--flops-budget", dest="flops_budget", type=float)
    p.add_argument("--population", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    common(p, config_flag=False)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("correlate", help="sample architectures and rank-correlate with fitness")
    p.add_argument("--seed-arch", dest="seed_arch")
    p.add_argument("--n", type=int)
    p.add_argument("--flops-budget", dest="flops_budget", type=float)
    p.add_argument("--perms", type=int)
    p.add_argument("--walk-length", dest="walk_length", type=int)
    common(p)
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("sweep", help="fixed-CNN sweep over Transformer widths")
    p.add_argument("--fixed", required=False)
    p.add_argument("--shape")
    p.add_argument("--weights")
    p.add_argument("--perms", type=int)
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("uniformize", help="geometric-mean uniform equivalent of an architecture")
    p.add_argument("arch", nargs="?")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_uniformize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ArchFileError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for v in exc.violations:
            print(f"  {v}", file=sys.stderr)
        return EXIT_INVALID
    except InvalidArchitecture as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateVarianceError as exc:
        print(f"scoring failed: {exc}", file=sys.stderr)
        return EXIT_SCORING


if __name__ == "__main__":
    sys.exit(main())
