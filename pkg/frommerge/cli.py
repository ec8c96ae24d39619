"""CLI for merging checkpoints and LoRA adapters."""

import argparse
import json
import logging
import os
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any, NoReturn

from frommerge.checkpoint import (
    Checkpoint,
    atomic_write_bytes,
    read_container,
    read_lora_dir,
    serialize_container,
    write_container,
    write_lora_dir,
)
from frommerge.errors import CheckpointIOError, FromMergeError, ValidationError
from frommerge.harness import (
    LORA_METHOD,
    SweepConfig,
    SynthSpec,
    default_synth_spec,
    emit_report,
    generate_synthetic,
    sweep_k,
    synthetic_adapters,
)
from frommerge.load import WRITE_MODES, load_sweep
from frommerge.lora import LoraMergeConfig, apply_adapter, merge_adapters
from frommerge.merge import MergeConfig, MergeMethod, NormScope, apply_delta, extract_task_vector, merge_task_vectors
from frommerge.settings import (
    CONVERGED_REL_TOL,
    DEFAULT_ALPHA,
    DEFAULT_ALPHA_GRID,
    DEFAULT_DARE_DROP_P,
    DEFAULT_INIT_SIGMA,
    DEFAULT_K,
    DEFAULT_K_GRID,
    DEFAULT_LOG_LEVEL,
    DEFAULT_LORA_APPLY_ALPHA,
    DEFAULT_LORA_K,
    DEFAULT_LOSS_TOL,
    DEFAULT_MAX_ITERS,
    DEFAULT_METHOD,
    DEFAULT_NORM_SCOPE,
    DEFAULT_RCOND,
    DEFAULT_SEED,
    DEFAULT_SWEEP_METHODS,
    DEFAULT_THREADS,
    LOG_LEVEL_ENV,
)
from frommerge.tensor import frobenius_norm

# Configure logging
logger = logging.getLogger(__name__)

_LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def setup_logging(level: str | None = None, verbose: bool = False) -> None:
    """
    Configure logging for the application.

    Args:
        level: One of error, info or debug (FROM_MERGE_LOG); unknown values mean info
        verbose: If True, force DEBUG
    """
    log_level = logging.DEBUG if verbose else _LOG_LEVELS.get((level or DEFAULT_LOG_LEVEL).lower(), logging.INFO)
    logging.basicConfig(
        level=log_level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        stream=sys.stderr,
    )
    logging.getLogger().setLevel(log_level)


class CliArgumentParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors are validation errors (exit code 1)."""

    def error(self, message: str) -> NoReturn:
        raise ValidationError(f"{self.prog}: {message}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def _str_list(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _layer_shape(text: str) -> tuple[str, int, int]:
    try:
        name, d1, d2 = text.rsplit(":", 2)
        return name, int(d1), int(d2)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected name:rows:cols, got {text!r}") from e


def build_parser() -> CliArgumentParser:
    """Build the argument parser with every subcommand."""
    common = CliArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"Seed for all randomness (default: {DEFAULT_SEED})")
    common.add_argument(
        "--threads", type=int, default=DEFAULT_THREADS, help="Per-layer worker threads; results do not depend on it"
    )
    common.add_argument("--config", type=str, default=None, help="JSON file of argument defaults; flags win")
    common.add_argument("-v", "--verbose", action="store_true", help="Enable verbose logging (DEBUG level)")

    parser = CliArgumentParser(prog="from-merge", description="Frobenius-norm weighted model merging")
    subparsers = parser.add_subparsers(dest="command", help="Command to run")

    # Merge command
    merge_parser = subparsers.add_parser("merge", parents=[common], help="Merge fully fine-tuned checkpoints")
    merge_parser.add_argument("--base", type=str, default=None, help="Base checkpoint")
    merge_parser.add_argument("--model", action="append", default=None, help="Fine-tuned checkpoint (repeatable)")
    merge_parser.add_argument("--out", type=str, default=None, help="Merged checkpoint to write")
    merge_parser.add_argument("--report", type=str, default=None, help="Merge report JSON (default: <out>.report.json)")
    merge_parser.add_argument(
        "--method",
        type=str,
        default=DEFAULT_METHOD,
        choices=[m.value for m in MergeMethod],
        help=f"Merge method (default: {DEFAULT_METHOD})",
    )
    merge_parser.add_argument("--k", type=float, default=DEFAULT_K, help=f"Norm exponent k (default: {DEFAULT_K})")
    merge_parser.add_argument(
        "--alpha", type=float, default=DEFAULT_ALPHA, help=f"Linear weighting coefficient (default: {DEFAULT_ALPHA})"
    )
    merge_parser.add_argument(
        "--norm-scope",
        type=str,
        default=DEFAULT_NORM_SCOPE,
        choices=[s.value for s in NormScope],
        help=f"Where norms are measured (default: {DEFAULT_NORM_SCOPE})",
    )
    merge_parser.add_argument(
        "--dare-drop-p", type=float, default=DEFAULT_DARE_DROP_P, help="DARE drop probability for dare_* methods"
    )
    merge_parser.add_argument("--grams", action="append", default=None, help="Gram container per model (regmean)")
    merge_parser.add_argument("--rcond", type=float, default=DEFAULT_RCOND, help="Pseudoinverse cutoff")
    merge_parser.add_argument("--record-timings", action="store_true", help="Write timings into the report")

    # LoRA merge command
    lora_parser = subparsers.add_parser("lora-merge", parents=[common], help="Merge LoRA adapters")
    lora_parser.add_argument("--adapter", action="append", default=None, help="Adapter directory (repeatable)")
    lora_parser.add_argument("--out", type=str, default=None, help="Output adapter directory")
    lora_parser.add_argument("--trace", type=str, default=None, help="Trace JSON (default: <out>/merge_trace.json)")
    lora_parser.add_argument("--rank", type=int, default=None, help="Output rank (default: rank of the first adapter)")
    lora_parser.add_argument("--k", type=float, default=DEFAULT_LORA_K, help=f"Norm exponent k (default: {DEFAULT_LORA_K})")
    lora_parser.add_argument("--max-iters", type=int, default=DEFAULT_MAX_ITERS, help="Iteration cap")
    lora_parser.add_argument("--init-sigma", type=float, default=DEFAULT_INIT_SIGMA, help="Std of the initial A")
    lora_parser.add_argument("--loss-tol", type=float, default=DEFAULT_LOSS_TOL, help="Loss rise tolerated before stopping")
    lora_parser.add_argument("--rcond", type=float, default=DEFAULT_RCOND, help="Pseudoinverse cutoff")
    lora_parser.add_argument("--oracle", action="store_true", help="Record the global optimum in the trace")
    lora_parser.add_argument("--base", type=str, default=None, help="Base checkpoint for --apply-out")
    lora_parser.add_argument("--apply-out", type=str, default=None, help="Write base + alpha * merged adapter here")
    lora_parser.add_argument(
        "--alpha", type=float, default=DEFAULT_LORA_APPLY_ALPHA, help="Coefficient used with --apply-out"
    )

    # Synth command
    synth_parser = subparsers.add_parser("synth", parents=[common], help="Generate synthetic fixtures")
    synth_parser.add_argument("--out-dir", type=str, default=None, help="Directory for the fixtures")
    synth_parser.add_argument("--layer", type=_layer_shape, action="append", default=None, help="name:rows:cols")
    synth_parser.add_argument("--n-models", type=int, default=None, help="Number of fine-tuned models")
    synth_parser.add_argument("--norm-profile", type=_float_list, default=None, help="Task vector norms, e.g. 3,1")
    synth_parser.add_argument("--overlap", type=float, default=None, help="Pairwise cosine of task vectors")
    synth_parser.add_argument("--intrinsic-rank", type=int, default=None, help="Rank of every task vector")
    synth_parser.add_argument("--lora-rank", type=int, default=None, help="Also write LoRA adapters of this rank")

    # Sweep command
    sweep_parser = subparsers.add_parser("sweep", parents=[common], help="Run a k sweep")
    sweep_parser.add_argument("--base", type=str, default=None, help="Base checkpoint (default: synthetic)")
    sweep_parser.add_argument("--model", action="append", default=None, help="Fine-tuned checkpoint (repeatable)")
    sweep_parser.add_argument("--out", type=str, default=None, help="CSV report; JSON is written next to it")
    sweep_parser.add_argument("--k-grid", type=_float_list, default=list(DEFAULT_K_GRID), help="Comma-separated k values")
    sweep_parser.add_argument(
        "--methods", type=_str_list, default=list(DEFAULT_SWEEP_METHODS), help="Comma-separated methods"
    )
    sweep_parser.add_argument("--lora-rank", type=int, default=None, help="Add the lora method at this rank")
    sweep_parser.add_argument("--alpha-grid", type=_float_list, default=list(DEFAULT_ALPHA_GRID), help="Alpha search grid")
    sweep_parser.add_argument("--alpha", type=float, default=DEFAULT_ALPHA, help="Coefficient for task arithmetic")
    sweep_parser.add_argument("--dare-drop-p", type=float, default=DEFAULT_DARE_DROP_P, help="DARE drop probability")
    sweep_parser.add_argument("--duckdb", type=str, default=None, help="Also load the cells into this DuckDB file")
    sweep_parser.add_argument("--mode", type=str, default="merge", choices=list(WRITE_MODES), help="DuckDB write mode")

    # Inspect command
    inspect_parser = subparsers.add_parser("inspect", parents=[common], help="Summarize a container file")
    inspect_parser.add_argument("path", nargs="?", default=None, help="Container to inspect")
    inspect_parser.add_argument("--base", type=str, default=None, help="Report norms of path minus this base")

    return parser


def _subparser(parser: CliArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction) and command in action.choices:
            return action.choices[command]
    raise ValidationError(f"unknown command {command!r}")


def _load_config(path: str) -> dict[str, Any]:
    try:
        values = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as e:
        raise CheckpointIOError(f"cannot read config file {path}: {e}") from e
    except UnicodeDecodeError as e:
        raise ValidationError(f"config file {path} is not valid UTF-8: {e.reason}") from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"config file {path} is not valid JSON: {e.msg}") from e
    if not isinstance(values, dict):
        raise ValidationError(f"config file {path} must hold a JSON object")
    return {key.replace("-", "_"): value for key, value in values.items()}


def parse_args(parser: CliArgumentParser, argv: Sequence[str] | None = None) -> argparse.Namespace:
    """
    Parse argv, layering a --config file between built-in defaults and flags.

    Raises:
        ValidationError: On usage errors or unknown config keys
    """
    args = parser.parse_args(argv)
    if args.command is None or not args.config:
        return args
    values = _load_config(args.config)
    sub = _subparser(parser, args.command)
    known = set(vars(sub.parse_args([])))
    unknown = sorted(set(values) - known - {"config"})
    if unknown:
        raise ValidationError(f"config file {args.config} has unknown keys for {args.command}: {unknown}")
    sub.set_defaults(**values)
    layered = parser.parse_args(argv)
    # Append actions extend their default, so a repeated flag must replace the file's list.
    for action in sub._actions:
        if isinstance(action, argparse._AppendAction) and getattr(args, action.dest) is not None:
            setattr(layered, action.dest, getattr(args, action.dest))
    return layered


def _require(args: argparse.Namespace, *names: str) -> None:
    missing = [f"--{name.replace('_', '-')}" for name in names if not getattr(args, name)]
    if missing:
        raise ValidationError(f"{args.command}: missing required arguments {missing}")


def _write_json(path: str | Path, payload: Any) -> None:
    atomic_write_bytes(path, (json.dumps(payload, indent=2) + "\n").encode("utf-8"))


def cmd_merge(args: argparse.Namespace) -> int:
    """Merge fully fine-tuned checkpoints and write the result plus a report."""
    _require(args, "base", "model", "out")
    cfg = MergeConfig(
        method=args.method,
        k=args.k,
        alpha=args.alpha,
        norm_scope=args.norm_scope,
        dare_drop_p=args.dare_drop_p,
        seed=args.seed,
        rcond=args.rcond,
    ).validate()
    if cfg.method == MergeMethod.REGMEAN and len(args.grams or []) != len(args.model):
        raise ValidationError("regmean needs one --grams container per --model")
    out = Path(args.out)
    report_path = Path(args.report) if args.report else out.with_suffix(".report.json")

    logger.info("Starting merge of %d models into %s", len(args.model), out)
    base = read_container(args.base)
    vectors = [extract_task_vector(base, read_container(path), label=path) for path in args.model]
    grams = [read_container(path).matrices() for path in args.grams] if args.grams else None
    merged, report = merge_task_vectors(vectors, cfg, grams, threads=args.threads)
    output = apply_delta(base, merged, cfg.delta_alpha())
    output = Checkpoint(
        tensors=output.tensors, metadata={**output.metadata, "merge_method": str(cfg.method), "merge_k": repr(cfg.k)}
    )

    payload = serialize_container(output)
    atomic_write_bytes(out, payload)
    _write_json(report_path, report.to_dict(include_timings=args.record_timings))
    logger.info("Merge completed successfully: %s, report %s", out, report_path)
    return 0


def cmd_lora_merge(args: argparse.Namespace) -> int:
    """Merge LoRA adapters and write the merged adapter plus the loss trace."""
    _require(args, "adapter", "out")
    if args.apply_out and not args.base:
        raise ValidationError("--apply-out needs --base")
    if args.rank is not None and args.rank <= 0:
        raise ValidationError(f"--rank must be positive, got {args.rank}")
    adapters = [read_lora_dir(path) for path in args.adapter]
    cfg = LoraMergeConfig(
        rank_out=args.rank or adapters[0].rank,
        k=args.k,
        max_iters=args.max_iters,
        init_sigma=args.init_sigma,
        seed=args.seed,
        rcond=args.rcond,
        loss_tol=args.loss_tol,
        converged_tol=CONVERGED_REL_TOL,
    ).validate()
    base = read_container(args.base) if args.base else None

    merged, traces = merge_adapters(adapters, cfg, threads=args.threads, with_oracle=args.oracle)
    applied = apply_adapter(base, merged, args.alpha) if base is not None and args.apply_out else None

    out = Path(args.out)
    trace_path = Path(args.trace) if args.trace else out / "merge_trace.json"
    write_lora_dir(merged, out)
    _write_json(
        trace_path,
        {
            "config": {"k": cfg.k, "rank_out": cfg.rank_out, "max_iters": cfg.max_iters, "seed": cfg.seed},
            "layers": [traces[layer].to_dict() for layer in merged.layers()],
        },
    )
    if applied is not None:
        write_container(applied, args.apply_out)
    logger.info("LoRA merge completed successfully: %s", out)
    return 0


def _synth_spec(args: argparse.Namespace) -> SynthSpec:
    default = default_synth_spec(args.seed)
    profile = tuple(args.norm_profile) if args.norm_profile else None
    n_models = args.n_models or (len(profile) if profile else default.n_models)
    if profile is None:
        profile = default.norm_profile if n_models == default.n_models else tuple(float(n_models - i) for i in range(n_models))
    return SynthSpec(
        layer_shapes=tuple(tuple(shape) for shape in args.layer) if args.layer else default.layer_shapes,
        n_models=n_models,
        norm_profile=profile,
        overlap=default.overlap if args.overlap is None else args.overlap,
        intrinsic_rank=args.intrinsic_rank,
        seed=args.seed,
    ).validate()


def cmd_synth(args: argparse.Namespace) -> int:
    """Generate a synthetic base model, fine-tuned models and optional adapters."""
    _require(args, "out_dir")
    spec = _synth_spec(args)
    if args.lora_rank is not None and args.lora_rank <= 0:
        raise ValidationError(f"--lora-rank must be positive, got {args.lora_rank}")
    base, finetuned = generate_synthetic(spec)
    adapters = synthetic_adapters(spec, args.lora_rank) if args.lora_rank else []

    out_dir = Path(args.out_dir)
    write_container(base, out_dir / "base.safetensors")
    for i, ckpt in enumerate(finetuned):
        write_container(ckpt, out_dir / f"model_{i}.safetensors")
    for i, adapter in enumerate(adapters):
        write_lora_dir(adapter, out_dir / f"adapter_{i}")
    _write_json(
        out_dir / "synth_spec.json",
        {
            "layer_shapes": [list(shape) for shape in spec.layer_shapes],
            "n_models": spec.n_models,
            "norm_profile": list(spec.norm_profile),
            "overlap": spec.overlap,
            "intrinsic_rank": spec.intrinsic_rank,
            "seed": spec.seed,
        },
    )
    print(f"Wrote base + {len(finetuned)} models ({len(adapters)} adapters) to {out_dir}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    """Run the k sweep and write the CSV and JSON reports."""
    _require(args, "out")
    methods = list(args.methods)
    if args.lora_rank is not None and LORA_METHOD not in methods:
        methods.append(LORA_METHOD)
    merge_cfg = MergeConfig(seed=args.seed, alpha=args.alpha, dare_drop_p=args.dare_drop_p).validate()
    lora_cfg = LoraMergeConfig(rank_out=args.lora_rank, seed=args.seed).validate() if args.lora_rank else None
    cfg = SweepConfig(merge=merge_cfg, lora=lora_cfg, alpha_grid=tuple(args.alpha_grid), threads=args.threads)

    if args.base:
        _require(args, "model")
        base = read_container(args.base)
        finetuned = [read_container(path) for path in args.model]
    else:
        base, finetuned = generate_synthetic(default_synth_spec(args.seed))

    result = sweep_k(base, finetuned, args.k_grid, methods, cfg)
    emit_report(result, args.out)
    if args.duckdb:
        load_sweep(result, mode=args.mode, db_path=args.duckdb)
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    """Print names, dtypes, shapes and norms of every tensor in a container."""
    _require(args, "path")
    ckpt = read_container(args.path)
    matrices = ckpt.matrices()
    if args.base:
        matrices = extract_task_vector(read_container(args.base), ckpt).deltas
    for key, value in sorted(ckpt.metadata.items()):
        print(f"# {key} = {value}")
    for name, tensor in ckpt.tensors.items():
        shape = "x".join(str(d) for d in tensor.shape) or "scalar"
        print(f"{name:40} | {tensor.dtype:3} | shape={shape:12} | norm={frobenius_norm(matrices[name]):.9f}")
    return 0


COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    "merge": cmd_merge,
    "lora-merge": cmd_lora_merge,
    "synth": cmd_synth,
    "sweep": cmd_sweep,
    "inspect": cmd_inspect,
}


def main(argv: Sequence[str] | None = None) -> int:
    """
    Main CLI entry point.

    Returns:
        0 on success, 1 on validation errors, 2 on I/O errors, 3 on numeric errors
    """
    parser = build_parser()
    try:
        args = parse_args(parser, argv)
    except FromMergeError as e:
        setup_logging(os.getenv(LOG_LEVEL_ENV))
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code

    # Setup logging based on environment and verbosity
    setup_logging(os.getenv(LOG_LEVEL_ENV), verbose=getattr(args, "verbose", False))

    if args.command is None:
        parser.print_help()
        return 1
    try:
        return COMMANDS[args.command](args)
    except FromMergeError as e:
        logger.error("Command %s failed: %s", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
