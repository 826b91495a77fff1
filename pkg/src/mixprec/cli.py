"""Batch pipeline driver: gen-model, sensitivity, allocate, evaluate.

Every subcommand is a pure function of its flags, input files, and seeds;
re-running a stage reproduces byte-identical artifacts. Exit codes:
0 success, 2 usage, 3 validation, 4 infeasible budget, 5 I/O.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import allocator, manifest as mf, metrics, sensitivity, toy_model
from .errors import (
    ConfigError,
    InfeasibleBudgetError,
    InputError,
    ParameterError,
    ShapeError,
    UndefinedMetricError,
    ValidationError,
)
from .sensitivity import ACTIVATION, WEIGHT
from .tensor_core import derive_seed

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_VALIDATION = 3
EXIT_INFEASIBLE = 4
EXIT_IO = 5


def _int_at_least(minimum: int, what: str):
    def parse(text: str) -> int:
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{what} must be an integer")
        if value < minimum:
            raise argparse.ArgumentTypeError(f"{what} must be >= {minimum}")
        return value

    return parse


def _even_int_at_least(minimum: int, what: str):
    base = _int_at_least(minimum, what)

    def parse(text: str) -> int:
        value = base(text)
        if value % 2:
            raise argparse.ArgumentTypeError(f"{what} must be even")
        return value

    return parse


def _bits_list(text: str) -> list[int]:
    try:
        bits = sorted({int(tok) for tok in text.split(",") if tok.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError("bits must be a comma-separated list of integers")
    if not bits or any(b not in (2, 4, 8) for b in bits):
        raise argparse.ArgumentTypeError("bits must be a non-empty subset of 2,4,8")
    return bits


def _target_bits(text: str) -> float | None:
    if text.lower() in ("fp", "fp16", "none"):
        return None
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("target bits must be a number or 'fp'")
    if not 2 <= value <= 8:
        raise argparse.ArgumentTypeError("target bits must lie in [2, 8]")
    return value


def _fraction(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("fraction must be a number")
    if not 0 <= value < 1:
        raise argparse.ArgumentTypeError("fraction must lie in [0, 1)")
    return value


def _ratio_grid(text: str) -> tuple[float, ...]:
    try:
        lo, hi, n = text.split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError:
        raise argparse.ArgumentTypeError("ratio grid must look like LO:HI:N")
    if n < 1 or lo <= 0 or hi < lo:
        raise argparse.ArgumentTypeError("ratio grid needs 0 < LO <= HI and N >= 1")
    if n == 1:
        return (lo,)
    step = (hi - lo) / (n - 1)
    return tuple(lo + i * step for i in range(n))


def _fmt(value: float) -> str:
    return repr(float(value))


# ---------------------------------------------------------------- gen-model


def run_gen_model(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = toy_model.build_toy_unet(
        seed=args.seed,
        width=args.width,
        depth=args.depth,
        spatial=args.spatial,
        latent_channels=args.latent_channels,
        text_tokens=args.tokens,
        text_channels=args.text_channels,
        time_dim=args.time_dim,
    )
    problems = toy_model.audit_shapes(model)
    if problems:
        raise ValidationError("model cost audit failed: " + "; ".join(problems))

    seeds = {
        "model": args.seed,
        "calibration": args.calib_seed if args.calib_seed is not None else derive_seed(args.seed, "calibration"),
        "proxy": args.proxy_seed if args.proxy_seed is not None else derive_seed(args.seed, "proxy"),
        "eval": args.eval_seed if args.eval_seed is not None else derive_seed(args.seed, "eval"),
    }
    params = {
        "width": args.width,
        "depth": args.depth,
        "spatial": args.spatial,
        "latent_channels": args.latent_channels,
        "text_tokens": args.tokens,
        "text_channels": args.text_channels,
        "time_dim": args.time_dim,
        "inputs": args.inputs,
        "bits": args.bits,
        "bos_aware": args.bos_aware,
        "target_bits": args.target_bits,
        "act_target_bits": args.act_target_bits,
        "retain_fp": args.retain_fp,
        "proxy_inputs": args.proxy_inputs,
        "eval_inputs": args.eval_inputs,
        "n_budgets": args.n_budgets,
        "delta_avg_bits": args.delta_bits,
        "jobs": args.jobs,
    }
    data = mf.default_manifest(params, seeds)
    toy_model.save_model(model, out_dir / data["model"]["json"], out_dir / data["model"]["weights_dir"])
    mf.record_checksums(data, out_dir, mf.model_artifact_paths(data, model.layer_order))
    mf.save_manifest(data, out_dir / "manifest.json")
    print(f"model: {len(model.layer_order)} layers -> {out_dir / data['model']['json']}")
    print(f"manifest: {out_dir / 'manifest.json'}")
    return EXIT_OK


def _load_model_checked(data: dict, root: Path) -> toy_model.ToyModel:
    model_json = root / data["model"]["json"]
    weights_dir = root / data["model"]["weights_dir"]
    if not model_json.exists():
        raise ValidationError(f"model JSON missing: {model_json}")
    with open(model_json) as f:
        meta = json.load(f)
    layer_ids = [row["id"] for row in meta["layers"]]
    mf.verify_artifacts(data, root, mf.model_artifact_paths(data, layer_ids))
    return toy_model.load_model(model_json, weights_dir)


# --------------------------------------------------------------- sensitivity


def run_sensitivity(args) -> int:
    data, root = mf.load_manifest(args.manifest)
    model = _load_model_checked(data, root)
    params = data["params"]
    n_inputs = args.inputs if args.inputs is not None else params["inputs"]
    bits = args.bits if args.bits is not None else params["bits"]
    bos_aware = params["bos_aware"] if args.bos_aware is None else args.bos_aware
    jobs = args.jobs if args.jobs is not None else params.get("jobs", 1)

    inputs = toy_model.make_input_set(data["seeds"]["calibration"], n_inputs, model)
    kinds = [WEIGHT, ACTIVATION] if args.kind == "both" else [args.kind]
    written = []
    for kind in kinds:
        table = sensitivity.analyze(
            model, inputs, bit_widths=bits, tensor_kind=kind, bos_aware=bos_aware, jobs=jobs
        )
        table.validate_complete(model.layer_order, bits, kind)
        rel = data["artifacts"][f"sensitivity_{kind}"]
        with open(root / rel, "w") as f:
            f.write(table.to_jsonl())
        written.append(rel)
        print(f"sensitivity[{kind}]: {len(table.entries)} entries -> {root / rel}")
    mf.record_checksums(data, root, written)
    mf.save_manifest(data, root / Path(args.manifest).name)
    return EXIT_OK


# ------------------------------------------------------------------ allocate


def _load_table(data: dict, root: Path, kind: str) -> sensitivity.SensitivityTable:
    rel = data["artifacts"][f"sensitivity_{kind}"]
    path = root / rel
    if not path.exists():
        raise ValidationError(f"sensitivity table missing: {rel} (run the sensitivity stage first)")
    mf.verify_artifacts(data, root, [rel])
    with open(path) as f:
        return sensitivity.SensitivityTable.from_jsonl(f.read())


def run_allocate(args) -> int:
    data, root = mf.load_manifest(args.manifest)
    model = _load_model_checked(data, root)
    params = data["params"]
    weight_target = args.target_bits if args.target_bits is not _UNSET else params["target_bits"]
    act_target = args.act_target_bits if args.act_target_bits is not _UNSET else params["act_target_bits"]
    retain = args.retain_fp if args.retain_fp is not None else params["retain_fp"]
    bits = tuple(params["bits"])
    bos_aware = bool(params["bos_aware"])
    if weight_target is None and act_target is None:
        raise ValidationError("nothing to allocate: both weight and activation targets are FP")

    common = dict(
        bit_widths=bits,
        n_budgets=args.n_budgets if args.n_budgets is not None else params.get("n_budgets", 5),
        delta_avg_bits=args.delta_bits if args.delta_bits is not None else params.get("delta_avg_bits", 0.25),
        proxy_inputs=params.get("proxy_inputs", 8),
        proxy_seed=data["seeds"]["proxy"],
        bos_aware=bos_aware,
    )
    weight_options = allocator.AllocOptions(ratio_grid=args.ratio_grid, **common)
    act_options = allocator.AllocOptions(
        ratio_grid=args.act_ratio_grid, retain_fraction=retain, **common
    )

    weight_table = _load_table(data, root, WEIGHT) if weight_target is not None else None
    act_table = _load_table(data, root, ACTIVATION) if act_target is not None else None
    act_ranges = None
    if act_target is not None:
        calib_inputs = toy_model.make_input_set(data["seeds"]["calibration"], params["inputs"], model)
        act_ranges = toy_model.calibrate_activations(model, calib_inputs, bos_aware=bos_aware)

    config, results = allocator.allocate_mixed(
        model,
        weight_table=weight_table,
        act_table=act_table,
        weight_target=weight_target,
        act_target=act_target,
        weight_options=weight_options,
        act_options=act_options,
        act_ranges=act_ranges,
    )

    config_rel = data["artifacts"]["config"]
    with open(root / config_rel, "w") as f:
        json.dump(config.to_json_dict(), f, sort_keys=True, indent=2)
        f.write("\n")

    # Frontier over the weight sweep when weights were allocated, else activations.
    frontier_kind = WEIGHT if weight_target is not None else ACTIVATION
    res = results[frontier_kind]
    frontier = allocator.pareto_frontier(res.sweep)
    cfg_dir_rel = data["artifacts"]["frontier_configs_dir"]
    cfg_dir = root / cfg_dir_rel
    cfg_dir.mkdir(parents=True, exist_ok=True)
    model_costs = toy_model.model_layer_summary(model)
    written = [config_rel]
    frontier_rel = data["artifacts"]["frontier"]
    with open(root / frontier_rel, "w") as f:
        f.write("avg_bits,score,config_path\n")
        for point in frontier:
            cell_cfg = res.sweep_configs[point.ref]
            cell = allocator.BitWidthConfig(
                config=cell_cfg,
                fp_retained=res.config.fp_retained,
                summary=allocator.cost_summary(cell_cfg, model_costs),
            )
            rel = f"{cfg_dir_rel}/{frontier_kind}_{point.ref:03d}.json"
            with open(root / rel, "w") as g:
                json.dump(cell.to_json_dict(), g, sort_keys=True, indent=2)
                g.write("\n")
            written.append(rel)
            f.write(f"{_fmt(point.avg_bits)},{_fmt(point.score)},{rel}\n")
    written.append(frontier_rel)
    mf.record_checksums(data, root, written)
    mf.save_manifest(data, root / Path(args.manifest).name)
    s = config.summary
    print(
        f"allocate: avg W{s['avg_weight_bits']:.3g} A{s['avg_act_bits']:.3g} "
        f"storage {s['storage_opt_ratio']:.2f}x compute {s['compute_opt_ratio']:.2f}x -> {root / config_rel}"
    )
    print(f"frontier: {len(frontier)} points -> {root / frontier_rel}")
    return EXIT_OK


# ------------------------------------------------------------------ evaluate


def run_evaluate(args) -> int:
    data, root = mf.load_manifest(args.manifest)
    model = _load_model_checked(data, root)
    params = data["params"]
    config_rel = args.config if args.config is not None else data["artifacts"]["config"]
    config_path = root / config_rel
    if not config_path.exists():
        raise ValidationError(f"config missing: {config_rel} (run the allocate stage first)")
    if args.config is None:
        mf.verify_artifacts(data, root, [config_rel])
    with open(config_path) as f:
        bw = allocator.BitWidthConfig.from_json_dict(json.load(f))
    bw.config.validate(model.layer_order)

    bos_aware = bool(params["bos_aware"])
    n_eval = args.inputs if args.inputs is not None else params["eval_inputs"]
    eval_inputs = toy_model.make_input_set(data["seeds"]["eval"], n_eval, model)
    act_ranges = None
    if bw.config.wants_act_quant():
        calib_inputs = toy_model.make_input_set(data["seeds"]["calibration"], params["inputs"], model)
        act_ranges = toy_model.calibrate_activations(model, calib_inputs, bos_aware=bos_aware)

    refs = sensitivity.fp_references(model, eval_inputs, bos_aware=bos_aware)
    rows = []
    for i, ((latent, emb, t), ref) in enumerate(zip(eval_inputs, refs)):
        out = toy_model.forward(
            model, latent, emb, t, config=bw.config, bos_aware=bos_aware, act_ranges=act_ranges
        )
        rng = float(ref.max() - ref.min())
        w = metrics.SsimWeights.for_data_range(rng if rng > 0 else 1.0)
        rows.append(
            {
                "index": i,
                "ssim": metrics.ssim(ref, out, w).value,
                "sqnr_db": metrics.sqnr_db(ref, out).value,
            }
        )
    base_rows = []
    for i, ref in enumerate(refs):
        rng = float(ref.max() - ref.min())
        w = metrics.SsimWeights.for_data_range(rng if rng > 0 else 1.0)
        base_rows.append(
            {"ssim": metrics.ssim(ref, ref, w).value, "sqnr_db": metrics.sqnr_db(ref, ref).value}
        )

    def mean(key, rs):
        return sum(r[key] for r in rs) / len(rs)

    report = {
        "config_path": str(config_rel),
        "bos_aware": bos_aware,
        "n_inputs": n_eval,
        "metrics": {"ssim_mean": mean("ssim", rows), "sqnr_db_mean": mean("sqnr_db", rows)},
        "baseline": {"ssim_mean": mean("ssim", base_rows), "sqnr_db_mean": mean("sqnr_db", base_rows)},
        "per_input": rows,
        "summary": bw.summary,
    }
    report["deltas"] = {
        "ssim": report["metrics"]["ssim_mean"] - report["baseline"]["ssim_mean"],
        "sqnr_db": report["metrics"]["sqnr_db_mean"] - report["baseline"]["sqnr_db_mean"],
    }

    suffix = ".json" if args.format == "json" else ".csv"
    report_rel = str(Path(data["artifacts"]["report"]).with_suffix(suffix))
    if args.format == "json":
        with open(root / report_rel, "w") as f:
            json.dump(report, f, sort_keys=True, indent=2)
            f.write("\n")
    else:
        with open(root / report_rel, "w") as f:
            f.write("index,ssim,sqnr_db\n")
            for r in rows:
                f.write(f"{r['index']},{_fmt(r['ssim'])},{_fmt(r['sqnr_db'])}\n")
            f.write(f"mean,{_fmt(report['metrics']['ssim_mean'])},{_fmt(report['metrics']['sqnr_db_mean'])}\n")
    data["artifacts"]["report"] = report_rel
    mf.record_checksums(data, root, [report_rel])
    mf.save_manifest(data, root / Path(args.manifest).name)
    print(
        f"evaluate: ssim {report['metrics']['ssim_mean']:.4f} "
        f"sqnr {report['metrics']['sqnr_db_mean']:.2f} dB -> {root / report_rel}"
    )
    return EXIT_OK


# ------------------------------------------------------------------ pipeline


def run_pipeline(args) -> int:
    if args.manifest is None:
        rc = run_gen_model(args)
        if rc:
            return rc
        args.manifest = str(Path(args.out_dir) / "manifest.json")
    ns = argparse.Namespace(
        manifest=args.manifest, kind="both", inputs=None, bits=None, bos_aware=None, jobs=None
    )
    rc = run_sensitivity(ns)
    if rc:
        return rc
    ns = argparse.Namespace(
        manifest=args.manifest,
        target_bits=_UNSET,
        act_target_bits=_UNSET,
        retain_fp=None,
        n_budgets=None,
        delta_bits=None,
        ratio_grid=None,
        act_ratio_grid=None,
    )
    rc = run_allocate(ns)
    if rc:
        return rc
    ns = argparse.Namespace(manifest=args.manifest, config=None, format="json", inputs=None)
    return run_evaluate(ns)


# ---------------------------------------------------------------------- main

_UNSET = object()


def _add_gen_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=7, help="master seed for weights")
    p.add_argument("--width", type=_int_at_least(2, "--width"), default=8)
    p.add_argument("--depth", type=_int_at_least(1, "--depth"), default=1)
    p.add_argument("--spatial", type=_even_int_at_least(4, "--spatial"), default=16)
    p.add_argument("--latent-channels", type=_int_at_least(1, "--latent-channels"), default=4)
    p.add_argument("--tokens", type=_int_at_least(2, "--tokens"), default=8)
    p.add_argument("--text-channels", type=_int_at_least(2, "--text-channels"), default=16)
    p.add_argument("--time-dim", type=_even_int_at_least(2, "--time-dim"), default=16)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--inputs", type=_int_at_least(1, "--inputs"), default=32,
                   help="calibration/sensitivity input count")
    p.add_argument("--bits", type=_bits_list, default=[2, 4, 8])
    p.add_argument("--bos-aware", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--target-bits", type=_target_bits, default=4.0)
    p.add_argument("--act-target-bits", type=_target_bits, default=8.0)
    p.add_argument("--retain-fp", type=_fraction, default=0.01)
    p.add_argument("--proxy-inputs", type=_int_at_least(1, "--proxy-inputs"), default=8)
    p.add_argument("--eval-inputs", type=_int_at_least(1, "--eval-inputs"), default=16)
    p.add_argument("--n-budgets", type=_int_at_least(1, "--n-budgets"), default=5)
    p.add_argument("--delta-bits", type=float, default=0.25)
    p.add_argument("--calib-seed", type=int, default=None)
    p.add_argument("--proxy-seed", type=int, default=None)
    p.add_argument("--eval-seed", type=int, default=None)
    p.add_argument("--jobs", type=_int_at_least(1, "--jobs"), default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixprec", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="build the toy network and seed a pipeline manifest")
    _add_gen_model_flags(p)
    p.set_defaults(func=run_gen_model)

    p = sub.add_parser("sensitivity", help="per-layer sensitivity tables")
    p.add_argument("--manifest", required=True)
    p.add_argument("--kind", choices=[WEIGHT, ACTIVATION, "both"], default="both")
    p.add_argument("--inputs", type=_int_at_least(1, "--inputs"), default=None)
    p.add_argument("--bits", type=_bits_list, default=None)
    p.add_argument("--bos-aware", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--jobs", type=_int_at_least(1, "--jobs"), default=None)
    p.set_defaults(func=run_sensitivity)

    p = sub.add_parser("allocate", help="bit-width allocation under a budget")
    p.add_argument("--manifest", required=True)
    p.add_argument("--target-bits", type=_target_bits, default=_UNSET,
                   help="average weight bits, or 'fp' to leave weights unquantized")
    p.add_argument("--act-target-bits", type=_target_bits, default=_UNSET)
    p.add_argument("--retain-fp", type=_fraction, default=None,
                   help="fraction of most-sensitive activation layers kept at FP16")
    p.add_argument("--n-budgets", type=_int_at_least(1, "--n-budgets"), default=None)
    p.add_argument("--delta-bits", type=float, default=None)
    p.add_argument("--ratio-grid", type=_ratio_grid, default=None, metavar="LO:HI:N")
    p.add_argument("--act-ratio-grid", type=_ratio_grid, default=None, metavar="LO:HI:N")
    p.set_defaults(func=run_allocate)

    p = sub.add_parser("evaluate", help="score a config against the FP baseline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", default=None, help="config JSON (default: manifest's)")
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.add_argument("--inputs", type=_int_at_least(1, "--inputs"), default=None)
    p.set_defaults(func=run_evaluate)

    p = sub.add_parser("pipeline", help="gen-model + sensitivity + allocate + evaluate")
    group = p.add_argument_group("existing manifest")
    group.add_argument("--manifest", default=None, help="re-run all stages of an existing manifest")
    _add_gen_model_flags_optional(p)
    p.set_defaults(func=run_pipeline)

    return parser


def _add_gen_model_flags_optional(p: argparse.ArgumentParser) -> None:
    # Same flags as gen-model but --out-dir is only required without --manifest.
    _add_gen_model_flags(p)
    for action in p._actions:
        if action.dest == "out_dir":
            action.required = False


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "pipeline" and args.manifest is None and args.out_dir is None:
        parser.error("pipeline needs --manifest or --out-dir")
    try:
        return args.func(args)
    except InfeasibleBudgetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ValidationError, ConfigError, ParameterError, InputError, ShapeError, UndefinedMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
