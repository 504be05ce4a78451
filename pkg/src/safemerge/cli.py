"""Command-line interface.

Configuration precedence: explicit flags > JSON config file (--config) >
environment (SAFEMERGE_WORKERS for --workers) > built-in defaults. The
config file is a flat JSON object keyed by long option names with dashes
replaced by underscores, e.g. {"tau": 0.5, "weights": [0.8, 0.2]}.

Exit codes: 0 success, 2 usage or policy error, 3 I/O or data-format error,
4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .adapter_io import (
    ADAPTER_WEIGHTS_NAME,
    CheckpointSource,
    NamingProfile,
    file_digest,
    load_adapter,
    write_adapter,
)
from .errors import (
    DegenerateSubspaceError,
    DimensionError,
    FormatError,
    MissingKeyError,
    NumericError,
    PairingError,
    PolicyError,
    SafemergeError,
)
from .fixtures import FixtureSpec, generate_fixture
from .merging import CONCAT, LINEAR, RANK_MODES, STRATEGIES, MergePolicy
from .pipeline import (
    EvalScores,
    SweepGrid,
    run_analyze,
    run_resta,
    run_safelora,
    run_safemerge,
    safety_score,
    sweep,
    write_report_csv,
    write_report_json,
    write_sweep_csv,
)

_EPILOG = """\
configuration precedence: flags > --config JSON > SAFEMERGE_WORKERS env (workers only) > defaults.
exit codes: 0 ok, 2 usage/policy error, 3 I/O or format error, 4 numeric error.
default policy: linear strategy, weights 0.8 0.2, tau 0.5, concat rank mode.
"""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="safemerge",
        description="Selectively merge, project, or rewrite LoRA adapters "
        "guided by per-layer alignment scores.",
        epilog=_EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--workers", type=int, help="worker threads (default: 1)")
        p.add_argument(
            "--strip-prefix",
            help="prefix stripped from adapter tensor names "
            "(default: 'base_model.model.')",
        )
        p.add_argument(
            "--key-map",
            help="JSON file mapping canonical adapter keys to full-weight keys",
        )

    def scoring_inputs(p: argparse.ArgumentParser) -> None:
        p.add_argument("--fine-tuned", help="fine-tuned adapter directory")
        p.add_argument("--aligned", help="aligned (e.g. instruct) weights: file, dir, or index")
        p.add_argument("--unaligned", help="unaligned (e.g. base) weights: file, dir, or index")

    def policy_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--strategy", choices=STRATEGIES, help="merge strategy (default: linear)")
        p.add_argument("--tau", type=float, help="score threshold in [0, 1] (default: 0.5)")
        p.add_argument(
            "--weights",
            nargs=2,
            type=float,
            metavar=("WF", "WS"),
            help="fine-tuned and safe weights (default: 0.8 0.2)",
        )
        p.add_argument("--density", type=float, help="kept fraction for dare_linear/ties (default: 1.0)")
        p.add_argument("--seed", type=int, help="seed for dare_linear masking (default: 0)")
        p.add_argument(
            "--rank-mode",
            choices=RANK_MODES,
            help="output rank handling (default: concat for linear, restore otherwise)",
        )
        p.add_argument("--target-rank", type=int, help="rank for restore mode (default: input rank)")

    p = sub.add_parser("analyze", help="score layers; write a report, no output adapter")
    common(p)
    scoring_inputs(p)
    p.add_argument("--report", help="report JSON path (default: analyze_report.json)")
    p.add_argument("--csv", help="optional per-layer CSV path")

    p = sub.add_parser("merge", help="selectively merge flagged layers with a safe adapter")
    common(p)
    scoring_inputs(p)
    policy_flags(p)
    p.add_argument("--safe", help="safe adapter directory")
    p.add_argument("--output", help="output adapter directory")
    p.add_argument("--report", help="report JSON path (default: <output>/merge_report.json)")

    p = sub.add_parser("project", help="replace flagged layers with their subspace projection")
    common(p)
    scoring_inputs(p)
    p.add_argument("--tau", type=float, help="score threshold in [0, 1] (default: 0.5)")
    p.add_argument("--output", help="output adapter directory")
    p.add_argument("--report", help="report JSON path (default: <output>/project_report.json)")

    p = sub.add_parser("resta", help="merge a negated harmful adapter into every layer")
    common(p)
    p.add_argument("--fine-tuned", help="fine-tuned adapter directory")
    p.add_argument("--harmful", help="harmful adapter directory")
    p.add_argument("--alpha", type=float, help="weight on the negated harmful delta (> 0)")
    p.add_argument("--dare-density", type=float, help="optional DARE density in (0, 1]")
    p.add_argument("--dare-seed", type=int, help="seed for DARE masking (default: 0)")
    p.add_argument("--rank-mode", choices=RANK_MODES, help="output rank handling")
    p.add_argument("--target-rank", type=int, help="rank for restore mode")
    p.add_argument("--negate", choices=("a", "b"), help="which factor to negate (default: b)")
    p.add_argument("--output", help="output adapter directory")
    p.add_argument("--report", help="report JSON path (default: <output>/resta_report.json)")

    p = sub.add_parser("sweep", help="summarize merge outcomes over a policy grid")
    common(p)
    scoring_inputs(p)
    p.add_argument("--safe", help="safe adapter directory")
    p.add_argument("--taus", nargs="+", type=float, help="thresholds to sweep")
    p.add_argument(
        "--weights-grid",
        nargs="+",
        metavar="WF,WS",
        help="weight pairs, e.g. 0.8,0.2 0.5,0.5 (default: 0.8,0.2)",
    )
    p.add_argument("--strategies", nargs="+", choices=STRATEGIES, help="strategies (default: linear)")
    p.add_argument("--densities", nargs="+", type=float, help="densities (default: 1.0)")
    p.add_argument("--seed", type=int, help="seed for dare_linear masking (default: 0)")
    p.add_argument("--csv", help="summary CSV path (default: sweep.csv)")

    p = sub.add_parser("score", help="aggregate safety score from two harmfulness rates")
    p.add_argument("--direct-harm", type=float, required=True, help="DirectHarm rate in [0, 100]")
    p.add_argument("--hexphi", type=float, required=True, help="HexPhi rate in [0, 100]")

    p = sub.add_parser("gen-fixtures", help="write a synthetic, seeded fixture tree")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--layers", type=int, default=4, help="transformer layer count")
    p.add_argument("--d-out", type=int, default=32)
    p.add_argument("--d-in", type=int, default=32)
    p.add_argument("--rank", type=int, default=4)
    p.add_argument("--alpha", type=float, default=8.0, help="lora_alpha for all adapters")
    p.add_argument("--modules", nargs="+", default=["q_proj", "v_proj"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--orthogonal", type=int, default=0, help="layers planted orthogonal (score 0)")
    p.add_argument("--inside", type=int, default=0, help="layers planted inside the subspace")
    p.add_argument("--zero", type=int, default=0, help="layers planted with zero update (score 1)")
    p.add_argument("--shards", type=int, default=1, help="shard count for weight files")

    return parser


class _Config:
    """Flag > config file > env/default resolution."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.values: dict = {}
        config_path = getattr(args, "config", None)
        if config_path:
            try:
                self.values = json.loads(Path(config_path).read_text())
            except OSError as exc:
                raise FormatError(f"cannot read config {config_path}: {exc}") from exc
            except json.JSONDecodeError as exc:
                raise FormatError(f"malformed config JSON {config_path}: {exc}") from exc
            if not isinstance(self.values, dict):
                raise FormatError(f"config {config_path} must hold a JSON object")

    def get(self, name: str, default=None):
        flag = getattr(self.args, name, None)
        if flag is not None:
            return flag
        if name in self.values:
            return self.values[name]
        return default

    def require(self, name: str):
        value = self.get(name)
        if value is None:
            raise PolicyError(
                f"missing required option --{name.replace('_', '-')} "
                "(pass the flag or set it in --config)"
            )
        return value

    def workers(self) -> int:
        value = self.get("workers")
        if value is None:
            value = os.environ.get("SAFEMERGE_WORKERS", 1)
        try:
            workers = int(value)
        except (TypeError, ValueError):
            raise PolicyError(f"worker count must be an integer, got {value!r}")
        if workers < 1:
            raise PolicyError(f"worker count must be >= 1, got {workers}")
        return workers

    def profile(self) -> NamingProfile:
        key_map = None
        key_map_path = self.get("key_map")
        if key_map_path:
            try:
                key_map = json.loads(Path(key_map_path).read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise FormatError(f"cannot read key map {key_map_path}: {exc}") from exc
        strip = self.get("strip_prefix", "base_model.model.")
        return NamingProfile(strip_prefix=strip, key_map=key_map)


def _open_inputs(cfg: _Config, *extra_required: str):
    # validate the whole required-path group before touching any file
    fine_tuned_path = cfg.require("fine_tuned")
    aligned_path = cfg.require("aligned")
    unaligned_path = cfg.require("unaligned")
    for name in extra_required:
        cfg.require(name)
    profile = cfg.profile()
    fine_tuned = load_adapter(fine_tuned_path, profile)
    aligned = CheckpointSource.open(aligned_path, profile)
    unaligned = CheckpointSource.open(unaligned_path, profile)
    return fine_tuned, aligned, unaligned, profile


def _policy_from(cfg: _Config) -> MergePolicy:
    strategy = cfg.get("strategy", LINEAR)
    weights = cfg.get("weights", [0.8, 0.2])
    if len(weights) != 2:
        raise PolicyError(f"--weights needs exactly two values, got {weights}")
    rank_mode = cfg.get("rank_mode")
    if rank_mode is None:
        rank_mode = CONCAT if strategy == LINEAR else "restore"
    return MergePolicy(
        strategy=strategy,
        w_f=float(weights[0]),
        w_s=float(weights[1]),
        density=float(cfg.get("density", 1.0)),
        seed=int(cfg.get("seed", 0)),
        tau=float(cfg.get("tau", 0.5)),
        rank_mode=rank_mode,
        target_rank=cfg.get("target_rank"),
    )


def _print_score_table(report) -> None:
    width = max((len(d.key) for d in report.decisions), default=3)
    print(f"{'key':<{width}}  {'rho':>10}  tag")
    for d in report.decisions:
        rho = f"{d.rho:.6f}" if d.rho is not None else "-"
        print(f"{d.key:<{width}}  {rho:>10}  {d.degenerate_reason or '-'}")
    mean = report.mean_rho()
    print(f"{report.total_count} layers; mean rho {mean:.6f}" if mean is not None else "")


def _adapter_digest(path: str | Path) -> str:
    p = Path(path)
    weights = p / ADAPTER_WEIGHTS_NAME if p.is_dir() else p
    return file_digest(weights)


def cmd_analyze(cfg: _Config) -> int:
    fine_tuned, aligned, unaligned, profile = _open_inputs(cfg)
    report = run_analyze(
        fine_tuned, aligned, unaligned, workers=cfg.workers(), key_map=profile.weight_key
    )
    report_path = write_report_json(report, cfg.get("report", "analyze_report.json"))
    csv_path = cfg.get("csv")
    if csv_path:
        write_report_csv(report, csv_path)
        print(f"csv: {csv_path}")
    _print_score_table(report)
    print(f"report: {report_path}")
    return 0


def cmd_merge(cfg: _Config) -> int:
    fine_tuned, aligned, unaligned, profile = _open_inputs(cfg, "safe", "output")
    safe = load_adapter(cfg.require("safe"), profile)
    policy = _policy_from(cfg)
    output = Path(cfg.require("output"))
    bundle, report = run_safemerge(
        fine_tuned,
        safe,
        aligned,
        unaligned,
        policy,
        workers=cfg.workers(),
        key_map=profile.weight_key,
    )
    write_adapter(bundle, output, profile)
    report_path = write_report_json(report, cfg.get("report", output / "merge_report.json"))
    print(f"merged {report.merged_count}/{report.total_count} layers "
          f"(strategy={policy.strategy}, tau={policy.tau})")
    print(f"input adapter sha256:  {_adapter_digest(cfg.require('fine_tuned'))}")
    print(f"output adapter sha256: {_adapter_digest(output)}")
    print(f"report: {report_path}")
    return 0


def cmd_project(cfg: _Config) -> int:
    fine_tuned, aligned, unaligned, profile = _open_inputs(cfg, "output")
    tau = float(cfg.get("tau", 0.5))
    output = Path(cfg.require("output"))
    bundle, report = run_safelora(
        fine_tuned, aligned, unaligned, tau, workers=cfg.workers(), key_map=profile.weight_key
    )
    write_adapter(bundle, output, profile)
    report_path = write_report_json(report, cfg.get("report", output / "project_report.json"))
    print(f"projected {report.merged_count}/{report.total_count} layers (tau={tau})")
    print(f"input adapter sha256:  {_adapter_digest(cfg.require('fine_tuned'))}")
    print(f"output adapter sha256: {_adapter_digest(output)}")
    print(f"report: {report_path}")
    return 0


def cmd_resta(cfg: _Config) -> int:
    for name in ("fine_tuned", "harmful", "alpha", "output"):
        cfg.require(name)
    profile = cfg.profile()
    sft = load_adapter(cfg.require("fine_tuned"), profile)
    harmful = load_adapter(cfg.require("harmful"), profile)
    alpha = float(cfg.require("alpha"))
    dare = None
    density = cfg.get("dare_density")
    if density is not None:
        dare = (float(density), int(cfg.get("dare_seed", 0)))
    rank_mode = cfg.get("rank_mode")
    if rank_mode is None:
        rank_mode = CONCAT if dare is None else "restore"
    output = Path(cfg.require("output"))
    bundle, report = run_resta(
        sft,
        harmful,
        alpha,
        dare=dare,
        rank_mode=rank_mode,
        target_rank=cfg.get("target_rank"),
        negate=cfg.get("negate", "b"),
        workers=cfg.workers(),
    )
    write_adapter(bundle, output, profile)
    report_path = write_report_json(report, cfg.get("report", output / "resta_report.json"))
    print(f"rewrote {report.total_count} layers (alpha={alpha}, dare={dare})")
    print(f"output adapter sha256: {_adapter_digest(output)}")
    print(f"report: {report_path}")
    return 0


def cmd_sweep(cfg: _Config) -> int:
    fine_tuned, aligned, unaligned, profile = _open_inputs(cfg, "safe", "taus")
    safe = load_adapter(cfg.require("safe"), profile)
    taus = cfg.require("taus")
    raw_weights = cfg.get("weights_grid", ["0.8,0.2"])
    weights = []
    for item in raw_weights:
        if isinstance(item, str):
            parts = item.split(",")
        else:
            parts = list(item)
        if len(parts) != 2:
            raise PolicyError(f"weight pair must have two values, got {item!r}")
        weights.append((float(parts[0]), float(parts[1])))
    grid = SweepGrid(
        taus=tuple(float(t) for t in taus),
        weights=tuple(weights),
        strategies=tuple(cfg.get("strategies", [LINEAR])),
        densities=tuple(float(d) for d in cfg.get("densities", [1.0])),
        seed=int(cfg.get("seed", 0)),
    )
    rows, _ = sweep(
        fine_tuned, safe, aligned, unaligned, grid, workers=cfg.workers(),
        key_map=profile.weight_key,
    )
    csv_path = write_sweep_csv(rows, cfg.get("csv", "sweep.csv"))
    print(f"{len(rows)} grid points -> {csv_path}")
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    value = safety_score(EvalScores(args.direct_harm, args.hexphi))
    print(f"{value:.2f}")
    return 0


def cmd_gen_fixtures(args: argparse.Namespace) -> int:
    spec = FixtureSpec(
        num_layers=args.layers,
        d_out=args.d_out,
        d_in=args.d_in,
        rank=args.rank,
        lora_alpha=args.alpha,
        target_modules=tuple(args.modules),
        seed=args.seed,
        orthogonal=args.orthogonal,
        inside=args.inside,
        zero=args.zero,
        shards=args.shards,
    )
    generate_fixture(spec, args.out)
    print(f"fixture written to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "score":
            return cmd_score(args)
        if args.command == "gen-fixtures":
            return cmd_gen_fixtures(args)
        cfg = _Config(args)
        handler = {
            "analyze": cmd_analyze,
            "merge": cmd_merge,
            "project": cmd_project,
            "resta": cmd_resta,
            "sweep": cmd_sweep,
        }[args.command]
        return handler(cfg)
    except PolicyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"run 'safemerge {args.command} --help' for usage", file=sys.stderr)
        return 2
    except (FormatError, PairingError, MissingKeyError, DimensionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, DegenerateSubspaceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except SafemergeError as exc:  # catch-all for the package's own errors
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
