"""Command-line entry point for attack, defense, analysis, and benchmarks.

Subcommands: attack (revive pruned layers from NPY dumps), defend (Gaussian
obfuscation of pruned slots), analyze detect|surface|p (excess-mass detector,
detectability CSV grid, single detection probability), bench synth (seeded
synthetic campaign), ideal (signs-vs-magnitudes study).

Values may come from a TOML file via --config; explicit flags win. Every
report embeds the tool version and the fully resolved configuration, so a run
can be reproduced from its report alone. Exit codes: 0 success, 1 usage error
(bad flags, bad values, missing inputs), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .completion import CompletionConfig
from .defense import (
    DefenseParams,
    default_window,
    detect_probability,
    detectability_surface,
    estimate_sigma_u,
    excess_mass_detector,
    gaussian_obfuscate,
    surface_to_csv,
)
from .revival import (
    AttackReport,
    LayerAttackError,
    RevivalPlan,
    attack_layer,
    attack_model,
    extract_mask,
)
from .synthbench import (
    BenchConfig,
    BenchReport,
    SynthSpec,
    _plain,
    default_noise_std,
    gen_lowrank_matrix,
    gen_mask,
    ideal_case_study,
    metric_tables,
    report_to_dict,
    run_bench_cell,
)
from .tensor_io import EmptyLayerSetError, LayerSet, load_layer_set, read_matrix, save_layer_set

IDEAL_ALL = ("true_mag_random_sign", "true_sign_sampled_mag", "true_sign_nms")


class UsageError(Exception):
    """Bad flag value, unusable config entry, or missing input."""


# --------------------------------------------------------- config resolution

_COMPLETION_DEFAULTS = {
    "algorithm": "ist_svd",
    "lambda_path": None,
    "rank_cap": 256,
    "max_iters": 100,
    "rel_tol": 1e-4,
    "oversample": 10,
    "power_iters": 2,
    "sketch_seed": 0,
}

_ATTACK_DEFAULTS = {
    "in_dir": None,
    "glob": "*.npy",
    "out_dir": None,
    "topk": 0.6,
    "magnitude": "neuron_max",
    "pool_axis": "column",
    "plan_seed": 0,
    "jobs": 1,
    "report": None,
    **_COMPLETION_DEFAULTS,
}

_DEFEND_DEFAULTS = {
    "in_dir": None,
    "glob": "*.npy",
    "out_dir": None,
    "sigma_m": None,
    "seed": 0,
    "report": None,
}

_BENCH_DEFAULTS = {
    "rows": 200,
    "cols": 100,
    "rank": 5,
    "noise_std": None,
    "target_sigma": 0.02,
    "mask_mode": "uniform",
    "mask_frac": 0.2,
    "row_frac": None,
    "within_row_frac": None,
    "col_frac": None,
    "topk": 0.6,
    "magnitude": "neuron_max",
    "pool_axis": "column",
    "ks": (0.2, 0.4, 0.6, 0.8, 0.9),
    "seeds": 10,
    "master_seed": 0,
    "defense_sigmas": (),
    "jobs": 1,
    "report": None,
    "tables_dir": None,
    **_COMPLETION_DEFAULTS,
}

_IDEAL_DEFAULTS = {
    "rows": 200,
    "cols": 100,
    "rank": 5,
    "noise_std": None,
    "target_sigma": 0.02,
    "mask_frac": 0.2,
    "matrix_seed": 0,
    "mask_seed": 1,
    "pool_axis": "column",
    "variant": "all",
    "seed": 0,
    "report": None,
}


def _load_config_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from exc
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"malformed config file {path}: {exc}") from exc


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Layer defaults < config file < explicit flags into one plain dict."""
    out = dict(defaults)
    config_path = getattr(args, "config", None)
    if config_path is not None:
        file_vals = _load_config_file(config_path)
        unknown = sorted(set(file_vals) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        out.update(file_vals)
    for name in defaults:
        flag = getattr(args, name, None)
        if flag is not None:
            out[name] = flag
    return out


def _norm(value) -> str:
    return str(value).replace("-", "_")


def _float_tuple(value, what: str) -> tuple[float, ...]:
    if isinstance(value, str):
        parts = [p for p in value.split(",") if p.strip()]
    elif isinstance(value, (int, float)):
        parts = [value]
    elif isinstance(value, (list, tuple)):
        parts = list(value)
    else:
        raise UsageError(f"{what} must be a number list, got {value!r}")
    try:
        return tuple(float(p) for p in parts)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad {what}: {exc}") from exc


def _parse_grid(value, geometric: bool, what: str) -> tuple[float, ...]:
    """A grid flag: either one number or start:stop:count."""
    if isinstance(value, (int, float)):
        return (float(value),)
    parts = str(value).split(":")
    try:
        if len(parts) == 1:
            return (float(parts[0]),)
        if len(parts) != 3:
            raise ValueError("expected NUMBER or START:STOP:COUNT")
        start, stop, count = float(parts[0]), float(parts[1]), int(parts[2])
        if count < 1:
            raise ValueError("COUNT must be >= 1")
        if count == 1:
            return (start,)
        space = np.geomspace if geometric else np.linspace
        return tuple(float(v) for v in space(start, stop, count))
    except ValueError as exc:
        raise UsageError(f"bad {what} grid {value!r}: {exc}") from exc


def _require(vals: dict, key: str, flag: str):
    if vals[key] is None:
        raise UsageError(f"{flag} is required")
    return vals[key]


def _input_dir(vals: dict, flag: str = "--in") -> Path:
    path = Path(_require(vals, "in_dir", flag))
    if not path.is_dir():
        raise UsageError(f"input directory {path} does not exist")
    return path


def _load_inputs(in_dir: Path, pattern: str) -> LayerSet:
    """A glob matching nothing is a usage error; unreadable files are not."""
    try:
        return load_layer_set(in_dir, pattern)
    except EmptyLayerSetError as exc:
        raise UsageError(str(exc)) from exc


def _completion_config(vals: dict) -> CompletionConfig:
    lam = vals["lambda_path"]
    return CompletionConfig(
        algorithm=_norm(vals["algorithm"]),
        lambda_path=None if lam is None else tuple(float(v) for v in lam),
        rank_cap=int(vals["rank_cap"]),
        max_iters_per_lambda=int(vals["max_iters"]),
        rel_tol=float(vals["rel_tol"]),
        svd_oversample=int(vals["oversample"]),
        svd_power_iters=int(vals["power_iters"]),
        seed=int(vals["sketch_seed"]),
    )


# -------------------------------------------------------------- report output


def emit_report(report: dict, path) -> None:
    """Pretty-printed UTF-8 JSON, keys in insertion order, NaN rejected."""
    text = json.dumps(report, indent=2, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def _report(command: str, config: dict, results) -> dict:
    return {
        "tool": "maskrevive",
        "version": __version__,
        "command": command,
        "config": _plain(config),
        "results": _plain(results),
    }


# ----------------------------------------------------------------- commands


def _attack_set(layers: LayerSet, cfg, plan, jobs: int):
    if jobs <= 1 or len(layers) <= 1:
        return attack_model(layers, cfg, plan)

    def one(layer):
        try:
            return attack_layer(layer, cfg, plan)
        except Exception as exc:
            raise LayerAttackError(layer.name, exc) from exc

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        pairs = list(pool.map(one, list(layers)))
    reports = tuple(r for _, r in pairs)
    report = AttackReport(
        layers=reports,
        total_pruned=sum(r.retained + r.zeroed for r in reports),
        total_retained=sum(r.retained for r in reports),
        total_wall_time=sum(r.wall_time for r in reports),
    )
    return LayerSet(tuple(m for m, _ in pairs)), report


def cmd_attack(args) -> int:
    vals = _resolve(args, _ATTACK_DEFAULTS)
    try:
        in_dir = _input_dir(vals)
        out_dir = Path(_require(vals, "out_dir", "--out"))
        plan = RevivalPlan(
            k_fraction=float(vals["topk"]),
            magnitude_strategy=_norm(vals["magnitude"]),
            pool_axis=_norm(vals["pool_axis"]),
            seed=int(vals["plan_seed"]),
        )
        cfg = _completion_config(vals)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    layers = _load_inputs(in_dir, vals["glob"])
    revived, report = _attack_set(layers, cfg, plan, int(vals["jobs"]))
    save_layer_set(revived, out_dir)
    if vals["report"] is not None:
        emit_report(_report("attack", vals, report), vals["report"])
    print(
        f"attacked {len(report.layers)} layer(s): retained "
        f"{report.total_retained} of {report.total_pruned} pruned entries "
        f"in {report.total_wall_time:.2f}s"
    )
    return 0


def cmd_defend(args) -> int:
    vals = _resolve(args, _DEFEND_DEFAULTS)
    try:
        in_dir = _input_dir(vals)
        out_dir = Path(_require(vals, "out_dir", "--out"))
        sigma_m = float(_require(vals, "sigma_m", "--sigma-m"))
        if sigma_m <= 0:
            raise ValueError("--sigma-m must be > 0")
        base_seed = int(vals["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    layers = _load_inputs(in_dir, vals["glob"])
    defended = []
    rows = []
    for idx, layer in enumerate(layers):
        mask = extract_mask(layer)
        if mask.n_pruned == 0:
            defended.append(layer)
            rows.append({"layer": layer.name, "pruned": 0, "sigma_u": None})
            continue
        seed = int(np.random.SeedSequence((base_seed, idx)).generate_state(1, dtype=np.uint64)[0])
        defended.append(gaussian_obfuscate(layer, mask, sigma_m, seed=seed))
        rows.append(
            {
                "layer": layer.name,
                "pruned": mask.n_pruned,
                "sigma_u": estimate_sigma_u(layer, mask),
            }
        )
    save_layer_set(LayerSet(tuple(defended)), out_dir)
    if vals["report"] is not None:
        emit_report(_report("defend", vals, {"layers": rows}), vals["report"])
    filled = sum(r["pruned"] for r in rows)
    print(f"defended {len(rows)} layer(s): filled {filled} pruned entries with sigma_m={sigma_m:g}")
    return 0


def cmd_analyze_p(args) -> int:
    try:
        params = DefenseParams(
            sigma_m=args.sigma_m, sigma_u=args.sigma_u, alpha=args.alpha, w=args.w
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    p = detect_probability(params)
    print(repr(p))
    if args.report is not None:
        config = {"alpha": args.alpha, "sigma_m": args.sigma_m, "sigma_u": args.sigma_u, "w": args.w}
        emit_report(_report("analyze p", config, {"p": p}), args.report)
    return 0


def cmd_analyze_detect(args) -> int:
    path = Path(args.in_path)
    if not path.is_file():
        raise UsageError(f"input file {path} does not exist")
    m = read_matrix(path)
    w = args.w
    if w is None:
        mask = extract_mask(m)
        w = default_window(estimate_sigma_u(m, mask))
    elif w <= 0:
        raise UsageError("--w must be > 0")
    score = excess_mass_detector(m, w)
    print(repr(score))
    if args.report is not None:
        config = {"in_path": str(path), "w": w}
        emit_report(_report("analyze detect", config, {"score": score}), args.report)
    return 0


def cmd_analyze_surface(args) -> int:
    try:
        alphas = _parse_grid(args.alpha, geometric=False, what="--alpha")
        sigmas = _parse_grid(args.sigma_m, geometric=True, what="--sigma-m")
        grid = detectability_surface(alphas, sigmas, args.sigma_u, args.w)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    surface_to_csv(grid, args.out)
    print(f"wrote {args.out}: {len(alphas)} alpha x {len(sigmas)} sigma_m grid")
    if args.report is not None:
        config = {
            "alpha": list(alphas),
            "sigma_m": list(sigmas),
            "sigma_u": args.sigma_u,
            "w": args.w,
            "out": str(args.out),
        }
        emit_report(_report("analyze surface", config, {"cells": len(alphas) * len(sigmas)}), args.report)
    return 0


def cmd_bench_synth(args) -> int:
    vals = _resolve(args, _BENCH_DEFAULTS)
    try:
        config = BenchConfig(
            rows=int(vals["rows"]),
            cols=int(vals["cols"]),
            rank=int(vals["rank"]),
            noise_std=None if vals["noise_std"] is None else float(vals["noise_std"]),
            target_sigma=float(vals["target_sigma"]),
            mask_mode=_norm(vals["mask_mode"]),
            mask_frac=float(vals["mask_frac"]),
            row_frac=None if vals["row_frac"] is None else float(vals["row_frac"]),
            within_row_frac=(
                None if vals["within_row_frac"] is None else float(vals["within_row_frac"])
            ),
            col_frac=None if vals["col_frac"] is None else float(vals["col_frac"]),
            k_fraction=float(vals["topk"]),
            magnitude_strategy=_norm(vals["magnitude"]),
            pool_axis=_norm(vals["pool_axis"]),
            ks=_float_tuple(vals["ks"], "--ks"),
            n_seeds=int(vals["seeds"]),
            master_seed=int(vals["master_seed"]),
            defense_sigmas=_float_tuple(vals["defense_sigmas"], "--defense-sigmas"),
            completion=_completion_config(vals),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    jobs = int(vals["jobs"])
    t0 = time.perf_counter()
    if jobs <= 1:
        cells = [run_bench_cell(config, i) for i in range(config.n_seeds)]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(lambda i: run_bench_cell(config, i), range(config.n_seeds)))
    report = BenchReport(config, tuple(cells), time.perf_counter() - t0)
    if vals["report"] is not None:
        emit_report(_report("bench synth", vals, report_to_dict(report)), vals["report"])
    if vals["tables_dir"] is not None:
        tables_dir = Path(vals["tables_dir"])
        tables_dir.mkdir(parents=True, exist_ok=True)
        for name, text in metric_tables(report).items():
            (tables_dir / f"{name}.csv").write_text(text, encoding="utf-8")
    failures = [c for c in report.cells if c.error is not None]
    ok = [c for c in report.cells if c.error is None]
    if ok:
        mean_all = float(np.mean([c.sign_accuracy_all for c in ok]))
        mean_ret = float(np.mean([c.sign_accuracy_retained for c in ok]))
        print(
            f"bench: {len(ok)}/{len(report.cells)} cells ok, mean sign accuracy "
            f"{mean_all:.4f} (all) / {mean_ret:.4f} (retained) in {report.total_wall_time:.2f}s"
        )
    for cell in failures:
        print(f"cell {cell.index} failed: {cell.error}", file=sys.stderr)
    return 0


def cmd_ideal(args) -> int:
    vals = _resolve(args, _IDEAL_DEFAULTS)
    try:
        rank = int(vals["rank"])
        noise = (
            default_noise_std(rank) if vals["noise_std"] is None else float(vals["noise_std"])
        )
        spec = SynthSpec(
            rows=int(vals["rows"]),
            cols=int(vals["cols"]),
            rank=rank,
            noise_std=noise,
            target_sigma=float(vals["target_sigma"]),
            seed=int(vals["matrix_seed"]),
        )
        truth = gen_lowrank_matrix(spec)
        mask = gen_mask(
            truth, "uniform", frac=float(vals["mask_frac"]), seed=int(vals["mask_seed"])
        )
        variant = _norm(vals["variant"])
        variants = IDEAL_ALL if variant == "all" else (variant,)
        plan = RevivalPlan(pool_axis=_norm(vals["pool_axis"]))
        records = [
            ideal_case_study(truth, mask, v, plan, seed=int(vals["seed"]))[1] for v in variants
        ]
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    for rec in records:
        print(f"{rec.variant}: sign accuracy {rec.sign_accuracy:.4f} over {rec.n_pruned} entries")
    if vals["report"] is not None:
        emit_report(_report("ideal", vals, {"records": records}), vals["report"])
    return 0


# ------------------------------------------------------------------- parser


def _add_completion_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--algorithm", help="ist_svd or softimpute")
    p.add_argument("--rank-cap", type=int, dest="rank_cap")
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.add_argument("--rel-tol", type=float, dest="rel_tol")
    p.add_argument("--oversample", type=int)
    p.add_argument("--power-iters", type=int, dest="power_iters")
    p.add_argument("--sketch-seed", type=int, dest="sketch_seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskrevive",
        description="Revive pruned weights by matrix completion; defend and detect.",
    )
    parser.add_argument("--version", action="version", version=f"maskrevive {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    attack = sub.add_parser("attack", help="revive pruned entries of stored layers")
    attack.add_argument("--in", dest="in_dir", help="directory of NPY layer dumps")
    attack.add_argument("--glob", help="filename pattern (default *.npy)")
    attack.add_argument("--out", dest="out_dir", help="directory for revived layers")
    attack.add_argument("--topk", type=float, help="fraction of pruned entries to revive")
    attack.add_argument("--magnitude", help="neuron-max | neuron-average | neuron-sample | layer-sample")
    attack.add_argument("--pool-axis", dest="pool_axis", help="row or column")
    attack.add_argument("--plan-seed", type=int, dest="plan_seed")
    attack.add_argument("--jobs", type=int, help="parallel layers (default 1)")
    attack.add_argument("--report", help="write a JSON run report here")
    attack.add_argument("--config", help="TOML file of defaults (flags override)")
    _add_completion_flags(attack)
    attack.set_defaults(func=cmd_attack)

    defend = sub.add_parser("defend", help="refill pruned slots with Gaussian noise")
    defend.add_argument("--in", dest="in_dir")
    defend.add_argument("--glob")
    defend.add_argument("--out", dest="out_dir")
    defend.add_argument("--sigma-m", type=float, dest="sigma_m", help="obfuscation noise std")
    defend.add_argument("--seed", type=int)
    defend.add_argument("--report")
    defend.add_argument("--config")
    defend.set_defaults(func=cmd_defend)

    analyze = sub.add_parser("analyze", help="defense analytics")
    asub = analyze.add_subparsers(dest="analysis", required=True)

    ap = asub.add_parser("p", help="closed-form detection probability for one parameter set")
    ap.add_argument("--alpha", type=float, required=True, help="pruning fraction")
    ap.add_argument("--sigma-m", type=float, dest="sigma_m", required=True)
    ap.add_argument("--sigma-u", type=float, dest="sigma_u", required=True)
    ap.add_argument("--w", type=float, required=True, help="detection window half-width")
    ap.add_argument("--report")
    ap.set_defaults(func=cmd_analyze_p)

    ad = asub.add_parser("detect", help="excess-mass detector score of a stored matrix")
    ad.add_argument("--in", dest="in_path", required=True, help="NPY matrix file")
    ad.add_argument("--w", type=float, help="window half-width (default: sigma_u/10 estimate)")
    ad.add_argument("--report")
    ad.set_defaults(func=cmd_analyze_detect)

    asurf = asub.add_parser("surface", help="detectability grid over alpha x sigma_m")
    asurf.add_argument("--alpha", required=True, help="NUMBER or START:STOP:COUNT (linear)")
    asurf.add_argument("--sigma-m", dest="sigma_m", required=True, help="NUMBER or START:STOP:COUNT (geometric)")
    asurf.add_argument("--sigma-u", type=float, dest="sigma_u", required=True)
    asurf.add_argument("--w", type=float, required=True)
    asurf.add_argument("--out", required=True, help="CSV output path")
    asurf.add_argument("--report")
    asurf.set_defaults(func=cmd_analyze_surface)

    bench = sub.add_parser("bench", help="benchmark campaigns")
    bsub = bench.add_subparsers(dest="bench_kind", required=True)
    bs = bsub.add_parser("synth", help="synthetic ground-truth attack/defense campaign")
    bs.add_argument("--rows", type=int)
    bs.add_argument("--cols", type=int)
    bs.add_argument("--rank", type=int)
    bs.add_argument("--noise-std", type=float, dest="noise_std")
    bs.add_argument("--target-sigma", type=float, dest="target_sigma")
    bs.add_argument("--mask-mode", dest="mask_mode", help="uniform | rows-partial | block")
    bs.add_argument("--mask-frac", type=float, dest="mask_frac")
    bs.add_argument("--row-frac", type=float, dest="row_frac")
    bs.add_argument("--within-row-frac", type=float, dest="within_row_frac")
    bs.add_argument("--col-frac", type=float, dest="col_frac")
    bs.add_argument("--topk", type=float)
    bs.add_argument("--magnitude")
    bs.add_argument("--pool-axis", dest="pool_axis")
    bs.add_argument("--ks", help="comma-separated curve fractions")
    bs.add_argument("--seeds", type=int, help="number of bench cells")
    bs.add_argument("--master-seed", type=int, dest="master_seed")
    bs.add_argument("--defense-sigmas", dest="defense_sigmas", help="comma-separated sigma_m sweep")
    bs.add_argument("--jobs", type=int, help="parallel cells (default 1)")
    bs.add_argument("--report")
    bs.add_argument("--tables-dir", dest="tables_dir", help="write per-metric CSV tables here")
    bs.add_argument("--config")
    _add_completion_flags(bs)
    bs.set_defaults(func=cmd_bench_synth)

    ideal = sub.add_parser("ideal", help="signs-vs-magnitudes idealized revivals")
    ideal.add_argument("--rows", type=int)
    ideal.add_argument("--cols", type=int)
    ideal.add_argument("--rank", type=int)
    ideal.add_argument("--noise-std", type=float, dest="noise_std")
    ideal.add_argument("--target-sigma", type=float, dest="target_sigma")
    ideal.add_argument("--mask-frac", type=float, dest="mask_frac")
    ideal.add_argument("--matrix-seed", type=int, dest="matrix_seed")
    ideal.add_argument("--mask-seed", type=int, dest="mask_seed")
    ideal.add_argument("--pool-axis", dest="pool_axis")
    ideal.add_argument(
        "--variant", help="true-mag-random-sign | true-sign-sampled-mag | true-sign-nms | all"
    )
    ideal.add_argument("--seed", type=int)
    ideal.add_argument("--report")
    ideal.add_argument("--config")
    ideal.set_defaults(func=cmd_ideal)

    return parser


def run(argv=None) -> int:
    """Parse and dispatch; returns the process exit code instead of exiting."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
