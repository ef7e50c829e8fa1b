"""Command-line front end: profile, run, bound, sweep, page-sim.

Every command prints one canonical JSON document on stdout. Measured
durations live under a separate ``timing`` key and are excluded from the
``report_digest``, so reports are reproducible byte for byte.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path
from typing import Sequence

from . import bound as bound_mod
from .dispatch import (
    DEFAULT_FLOOR_RATIO,
    Mode,
    bpw_sweep,
    layer_sweep,
    plan_for_mode,
    quantize_model,
    run_plan,
    select_mode,
    threshold_sweep,
    hot_set,
)
from .model import ModelSpec, ToyModel, build_toy_model, graded_outliers, inject_outlier
from .model import model_from_weights, normalize_weights, read_weight_container
from .pager import (
    DEFAULT_PMI_THRESHOLD,
    TierConfig,
    decode_trace,
    flatten_trace,
    init_placement,
    layer_units,
    pmi_clusters,
    simulate,
)
from .profiler import (
    DEFAULT_EPSILON,
    DEFAULT_TAU,
    FORMAT_VERSION,
    CalibrationSet,
    Scorer,
    _canonical,
    atomic_write,
    cache_get_or_profile,
    load_profile,
    profile as run_profile,
    profile_digest,
    serialize_profile,
    synthetic_calibration,
)

EXIT_USAGE = 2
EXIT_MISMATCH = 3


class CliError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def _emit(obj: dict) -> None:
    sys.stdout.write(_canonical(obj).decode() + "\n")


def _report(command: str, body: dict, timing: dict | None = None) -> dict:
    report = {"command": command, "format_version": FORMAT_VERSION, **body}
    return {
        "report": report,
        "report_digest": hashlib.sha256(_canonical(report)).hexdigest(),
        "timing": timing or {},
    }


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# shared model / calibration arguments


def _add_model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--layers", type=int, default=8)
    g.add_argument("--hidden", type=int, default=64)
    g.add_argument("--ffn", type=int, default=128)
    g.add_argument("--heads", type=int, default=4)
    g.add_argument("--vocab", type=int, default=256)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument(
        "--outlier",
        action="append",
        default=[],
        metavar="LAYER:SLOT:FACTOR",
        help="scale one slot of one layer (repeatable)",
    )
    g.add_argument("--graded", action="store_true", help="scale every FFN by a seeded geometric ladder")
    g.add_argument("--weights", type=Path, help="load weights from a container file instead")


def _add_calib_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("calibration")
    g.add_argument("--calib", type=Path, help="JSON file {prompts: [[ids...]], labels: [...]}")
    g.add_argument("--prompts", type=int, default=12, help="synthetic prompt count when --calib is absent")
    g.add_argument("--calib-seed", type=int, default=0)


def build_model(args) -> ToyModel:
    if args.weights is not None:
        if not args.weights.exists():
            raise CliError(f"weights file not found: {args.weights}", EXIT_USAGE)
        raw, spec = read_weight_container(args.weights)
        if spec is None:
            raise CliError("weights file carries no model spec", EXIT_USAGE)
        model = model_from_weights(spec, normalize_weights(raw, spec))
    else:
        spec = ModelSpec(args.layers, args.hidden, args.ffn, args.heads, args.vocab, seed=args.seed)
        model = build_toy_model(spec)
    if args.graded:
        model = graded_outliers(model, seed=model.spec.seed)
    for text in args.outlier:
        try:
            layer, slot, factor = text.split(":")
            model = inject_outlier(model, int(layer), slot, float(factor))
        except (ValueError, KeyError, IndexError) as exc:
            raise CliError(f"bad --outlier {text!r}: {exc}", EXIT_USAGE) from None
    return model


def build_calibration(args, model: ToyModel) -> CalibrationSet:
    if args.calib is None:
        return synthetic_calibration(model.spec.vocab_size, args.prompts, seed=args.calib_seed)
    if not args.calib.exists():
        raise CliError(f"calibration file not found: {args.calib}", EXIT_USAGE)
    try:
        obj = json.loads(args.calib.read_text())
        return CalibrationSet.from_lists(obj["prompts"], obj.get("labels", ()))
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError(f"bad calibration file {args.calib}: {exc}", EXIT_USAGE) from None


def _load_profile_file(path: Path):
    if not path.exists():
        raise CliError(f"profile file not found: {path}", EXIT_USAGE)
    data = path.read_bytes()
    return load_profile(data), profile_digest(data)


def _check_key(profile, model: ToyModel) -> None:
    key = model.architecture_key()
    if profile.architecture_key != key:
        raise CliError(
            "profile architecture_key does not match model: "
            f"profile={profile.architecture_key} model={key}",
            EXIT_MISMATCH,
        )


# ---------------------------------------------------------------------------
# commands


def cmd_profile(args) -> int:
    model = build_model(args)
    calib = build_calibration(args, model)
    start = time.perf_counter()
    if args.no_cache:
        prof = run_profile(model, calib, args.scorer, args.tau, args.epsilon)
        hit, ms = False, (time.perf_counter() - start) * 1000.0
    else:
        prof, hit, ms = cache_get_or_profile(
            args.cache_dir, model, calib, args.scorer, args.tau, args.epsilon
        )
    data = serialize_profile(prof)
    if args.out is not None:
        atomic_write(args.out, data)
    body = {
        "architecture_key": prof.architecture_key,
        "profile_digest": profile_digest(data),
        "w4a16_layers": prof.w4a16_layers(),
        "out": str(args.out) if args.out else None,
    }
    _emit(_report("profile", body, {"cache_hit": hit, "profiling_ms": ms}))
    return 0


def cmd_run(args) -> int:
    model = build_model(args)
    timing = {}
    if args.profile_from is not None:
        prof, digest = _load_profile_file(args.profile_from)
        _check_key(prof, model)
    else:
        calib = build_calibration(args, model)
        prof, hit, ms = cache_get_or_profile(
            args.cache_dir, model, calib, args.scorer, DEFAULT_TAU if args.tau is None else args.tau
        )
        digest = profile_digest(serialize_profile(prof))
        timing.update(cache_hit=hit, profiling_ms=ms)
    sizes = model.layer_bytes()
    budget = sum(sizes) if args.budget is None else args.budget
    tau = args.tau if args.tau is not None else prof.tau
    if args.mode == "auto":
        plan = select_mode(prof, budget, sizes, args.awq_viable, args.floor_ratio, tau)
    else:
        hot = hot_set(prof, budget, sizes)
        plan = plan_for_mode(prof, Mode.parse(args.mode), hot, budget, args.floor_ratio, tau)
    if args.tokens:
        tokens = args.tokens
    else:
        tokens = synthetic_calibration(model.spec.vocab_size, 1, seed=args.calib_seed).prompts[0]
    qmodel = quantize_model(model) if args.quantize else None
    pager = None
    if plan.mode is Mode.A_PAGED:
        units = layer_units(model.num_layers, [b // 2 for b in sizes for _ in (0, 1)])
        hot_bytes = budget if args.hot_bytes is None else args.hot_bytes
        warm_bytes = sum(sizes) if args.warm_bytes is None else args.warm_bytes
        pager = init_placement(prof.normalized_scores, units, TierConfig(hot_bytes, warm_bytes))
    start = time.perf_counter()
    result = run_plan(model, plan, list(tokens), qmodel, pager)
    timing["run_ms"] = (time.perf_counter() - start) * 1000.0
    body = {
        "model_spec_digest": model.spec.digest(),
        "architecture_key": model.architecture_key(),
        "profile_digest": digest,
        "plan": plan.summary(),
        "metrics": {
            "divergence": result.divergence,
            "bpw": qmodel.bits_per_weight if qmodel else 32.0,
            "pager": result.pager_stats,
        },
        "tokens": list(tokens),
    }
    _emit(_report("run", body, timing))
    return 0


def cmd_bound(args) -> int:
    try:
        if args.target is not None:
            n = bound_mod.min_prompts(args.layers, args.k, args.delta, args.sigma, args.target)
            p = bound_mod.RecoveryParams(args.layers, args.k, args.delta, args.sigma, n)
            body = {"min_prompts": n, "target": args.target}
        else:
            p = bound_mod.RecoveryParams(args.layers, args.k, args.delta, args.sigma, args.prompts)
            body = {}
    except bound_mod.BoundError as exc:
        raise CliError(str(exc), EXIT_USAGE) from None
    body.update(
        layers=p.layers,
        k=p.k,
        delta=p.delta,
        sigma=p.sigma,
        prompts=p.prompts,
        exponent=p.exponent,
        failure_bound=bound_mod.failure_bound(p),
    )
    _emit(_report("bound", body))
    return 0


def cmd_sweep(args) -> int:
    model = build_model(args)
    calib = build_calibration(args, model)
    prof = None
    if args.profile_from is not None:
        prof, _ = _load_profile_file(args.profile_from)
        _check_key(prof, model)
    start = time.perf_counter()
    if args.kind == "threshold":
        rep = threshold_sweep(model, calib, args.taus, prof)
    elif args.kind == "layers":
        rep = layer_sweep(model, calib, args.ratios, prof)
    else:
        rep = bpw_sweep(model, calib, args.bits, prof)
    ms = (time.perf_counter() - start) * 1000.0
    _emit(_report("sweep", rep.to_json(), {"sweep_ms": ms}))
    return 0


def _read_trace(spec: str, layers: int) -> list:
    if spec.startswith("synthetic:decode:"):
        try:
            passes = int(spec.rsplit(":", 1)[1])
        except ValueError:
            raise CliError(f"bad synthetic trace {spec!r}", EXIT_USAGE) from None
        return decode_trace(layers, passes)
    path = Path(spec)
    if not path.exists():
        raise CliError(f"trace file not found: {path}", EXIT_USAGE)
    try:
        steps = json.loads(path.read_text())
        return [frozenset(step) for step in steps]
    except (ValueError, TypeError) as exc:
        raise CliError(f"bad trace file {path}: {exc}", EXIT_USAGE) from None


def cmd_pagesim(args) -> int:
    trace = _read_trace(args.trace, args.layers)
    if not trace:
        raise CliError("trace is empty", EXIT_USAGE)
    n_sub = 2 * args.layers
    sizes = {i: args.subblock_bytes for i in range(n_sub)}
    units = pmi_clusters(trace, args.pmi_threshold, sizes)
    total = n_sub * args.subblock_bytes
    hot = total if args.hot_bytes is None else args.hot_bytes
    warm = total if args.warm_bytes is None else args.warm_bytes
    scores = None
    if args.profile_from is not None:
        prof, _ = _load_profile_file(args.profile_from)
        if prof.num_layers != args.layers:
            raise CliError(f"profile has {prof.num_layers} layers, --layers is {args.layers}", EXIT_USAGE)
        scores = prof.normalized_scores
    state = init_placement(scores, units, TierConfig(hot, warm))
    start = time.perf_counter()
    stats = simulate(state, flatten_trace(trace))
    ms = (time.perf_counter() - start) * 1000.0
    body = {
        "layers": args.layers,
        "units": len(units),
        "unit_members": [list(u.names) for u in units],
        "hot_bytes": hot,
        "warm_bytes": warm,
        "stats": stats.to_json(),
        "warnings": state.warnings,
    }
    _emit(_report("page-sim", body, {"sim_ms": ms}))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerplan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="compute (or fetch from cache) an importance profile")
    _add_model_args(p)
    _add_calib_args(p)
    p.add_argument("--scorer", choices=[s.value for s in Scorer], default=Scorer.COMBINED.value)
    p.add_argument("--tau", type=float, default=DEFAULT_TAU)
    p.add_argument("--epsilon", type=float, default=DEFAULT_EPSILON)
    p.add_argument("--out", type=Path)
    p.add_argument("--cache-dir", type=Path, help="defaults to $LAYERPLAN_CACHE_DIR")
    p.add_argument("--no-cache", action="store_true")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("run", help="plan and execute a desk-scale run")
    _add_model_args(p)
    _add_calib_args(p)
    p.add_argument("--profile-from", type=Path)
    p.add_argument("--scorer", choices=[s.value for s in Scorer], default=Scorer.COMBINED.value)
    p.add_argument("--tau", type=float)
    p.add_argument("--budget", type=int, help="hot-tier bytes (default: whole model)")
    p.add_argument("--mode", choices=["auto", "A", "B", "C"], default="auto")
    p.add_argument("--floor-ratio", type=float, default=DEFAULT_FLOOR_RATIO)
    p.add_argument("--awq-viable", action="store_true")
    p.add_argument("--quantize", action="store_true", help="execute through the Q4_0 kernels")
    p.add_argument("--tokens", type=_ints)
    p.add_argument("--hot-bytes", type=int)
    p.add_argument("--warm-bytes", type=int)
    p.add_argument("--cache-dir", type=Path)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bound", help="top-k recovery failure bound")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--sigma", type=float, required=True)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--prompts", type=int)
    g.add_argument("--target", type=float)
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("sweep", help="threshold, active-layer or bpw sweep")
    _add_model_args(p)
    _add_calib_args(p)
    p.add_argument("--kind", choices=["threshold", "layers", "bpw"], default="threshold")
    p.add_argument("--taus", type=_floats, default=[0.0, 0.3, 0.7, 2.0])
    p.add_argument("--ratios", type=_floats, default=[1.0, 0.75, 0.5, 0.25])
    p.add_argument("--bits", type=_ints, default=[4, 3, 2, 1])
    p.add_argument("--profile-from", type=Path)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("page-sim", help="three-tier paging simulation")
    p.add_argument("--layers", type=int, default=16)
    p.add_argument("--hot-bytes", type=int, help="default: every sub-block fits")
    p.add_argument("--warm-bytes", type=int, help="default: every sub-block fits")
    p.add_argument("--subblock-bytes", type=int, default=1)
    p.add_argument("--trace", default="synthetic:decode:270", help="JSON file or synthetic:decode:N")
    p.add_argument("--pmi-threshold", type=float, default=DEFAULT_PMI_THRESHOLD)
    p.add_argument("--profile-from", type=Path)
    p.set_defaults(func=cmd_pagesim)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"layerplan {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, IndexError, KeyError, OSError) as exc:
        print(f"layerplan {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
