"""Command-line interface.

Subcommands: `incpl synth` (generate a synthetic task), `incpl run` (one
evaluation stream), `incpl matrix` (ablation grids), `incpl report`
(re-emit stored reports as a CSV summary). Exit code 0 on success, 2 on
configuration errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from .adaptation import MODES, AdaptationConfig, StreamConfig, run_stream
from .backbone import BackendConfig, ToyBackend
from .context_store import LABEL_MODES, STRATEGIES
from .data import load_manifest
from .errors import ConfigurationError, InCPLError
from .harness import (
    MATRIX_AXES,
    SyntheticTaskSpec,
    emit_report,
    generate_synthetic,
    run_matrix,
)
from .prompts import DEFAULT_TEMPLATE, VARIANTS
from .report import load_report, summary_row, SUMMARY_FIELDS
from .token_net import init_token_net, load_token_net, save_token_net


def _build_backend(args) -> ToyBackend:
    if args.backend == "adapter":
        raise ConfigurationError(
            "the adapter backend is constructed programmatically "
            "(incpl.backbone.AdapterBackend); the CLI only runs the toy backend"
        )
    if getattr(args, "backend_config", None):
        cfg = BackendConfig.from_text(Path(args.backend_config).read_text(encoding="utf-8"))
    else:
        cfg = BackendConfig()
    return ToyBackend(cfg, precision=args.precision)


def _resolve_manifests(args) -> tuple:
    dataset = Path(args.dataset)
    if dataset.is_dir():
        test_path = dataset / "test.jsonl"
        labeled_path = Path(args.labeled) if args.labeled else dataset / "labeled.jsonl"
    else:
        test_path = dataset
        if not args.labeled:
            raise ConfigurationError("--labeled is required when --dataset is a manifest file")
        labeled_path = Path(args.labeled)
    return load_manifest(test_path, split="test"), load_manifest(labeled_path, split="labeled-pool")


def _stream_config(args) -> StreamConfig:
    return StreamConfig(
        adaptation=AdaptationConfig(
            mode=args.mode,
            lam=args.lam,
            lr=args.lr,
            visual_steps=args.steps,
            seed=args.seed,
        ),
        n_context=args.n_context,
        strategy=args.strategy,
        label_mode=args.label_mode,
        template=args.template,
        variant=args.variant,
        pool_seed=args.pool_seed,
        ablation=args.ablation,
    )


def _add_stream_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=("toy", "adapter"), default="toy")
    p.add_argument("--backend-config", help="plain-text key/value backend config file")
    p.add_argument("--precision", choices=("float64", "float32"), default="float64")
    p.add_argument("--dataset", required=True, help="test manifest file or task directory")
    p.add_argument("--labeled", help="labeled-pool manifest (defaults to labeled.jsonl in a task dir)")
    p.add_argument("--pool-seed", type=int, default=0)
    p.add_argument("--n-context", type=int, default=5)
    p.add_argument("--lambda", dest="lam", type=float, default=0.4)
    p.add_argument("--lr", type=float, default=5e-3)
    p.add_argument("--steps", type=int, default=1, help="visual optimization steps per sample")
    p.add_argument("--mode", choices=MODES, default="visual-only")
    p.add_argument("--strategy", choices=STRATEGIES, default="random")
    p.add_argument("--label-mode", choices=LABEL_MODES, default="gold")
    p.add_argument("--template", default=DEFAULT_TEMPLATE)
    p.add_argument("--variant", choices=VARIANTS, default="language-aware")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ablation", action="store_true",
                   help="allow oracle/same label modes (evaluation-only gold access)")


def _cmd_run(args) -> int:
    backend = _build_backend(args)
    test, labeled = _resolve_manifests(args)
    cfg = _stream_config(args)
    if args.theta_in:
        theta = load_token_net(args.theta_in, dtype=backend.dtype)
    else:
        theta = init_token_net(backend.config.d_l, backend.config.d_v, args.seed, dtype=backend.dtype)
    report = run_stream(backend, test, labeled, cfg, theta=theta)
    out = Path(args.out)
    report.write(out)
    if args.step_log:
        with Path(args.step_log).open("w", encoding="utf-8") as fh:
            for sample in report.samples:
                for step, breakdown in enumerate(sample.loss_trace):
                    fh.write(json.dumps({"sample": sample.id, "step": step, **breakdown}) + "\n")
    if args.theta_out:
        save_token_net(theta, args.theta_out)
    acc = "n/a" if report.accuracy is None else f"{report.accuracy:.4f}"
    print(f"samples={report.total} accuracy={acc} report={out} digest={report.digest()}")
    return 0


def _cmd_synth(args) -> int:
    spec = SyntheticTaskSpec(
        n_classes=args.classes,
        samples_per_class=args.per_class,
        cluster_separation=args.separation,
        noise_scale=args.noise,
        seed=args.seed,
        labeled_fraction=args.labeled_fraction,
    )
    backend_cfg = None
    if args.backend_config:
        backend_cfg = BackendConfig.from_text(Path(args.backend_config).read_text(encoding="utf-8"))
    labeled, test = generate_synthetic(spec, args.out, backend_config=backend_cfg, precision=args.precision)
    info = json.loads((Path(args.out) / "task.json").read_text(encoding="utf-8"))
    print(
        f"labeled={len(labeled.records)} test={len(test.records)} "
        f"zero_shot={info['zero_shot_accuracy']:.4f} out={args.out}"
    )
    return 0


def _cmd_matrix(args) -> int:
    backend = _build_backend(args)
    test, labeled = _resolve_manifests(args)
    base = _stream_config(args)
    values = None
    if args.values:
        raw = [v.strip() for v in args.values.split(",") if v.strip()]
        values = [int(v) for v in raw] if args.axis == "n_context" else raw
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed]
    result = run_matrix(
        backend, test, labeled, base, args.axis,
        values=values, seeds=seeds, out_dir=args.out,
    )
    print(f"axis={args.axis} cells={len(result.cells)} errors={len(result.errors)} out={args.out}")
    for key in sorted(result.reports):
        acc = result.reports[key].accuracy
        print(f"  {key}: accuracy={'n/a' if acc is None else f'{acc:.4f}'}")
    for key in sorted(result.errors):
        print(f"  {key}: error: {result.errors[key]}")
    if result.ordering_warning:
        print(f"  warning: {result.ordering_warning}")
    return 0


def _cmd_report(args) -> int:
    import csv as _csv

    paths: list[Path] = []
    for item in args.inputs:
        p = Path(item)
        if p.is_dir():
            paths.extend(sorted(p.glob("*.json")))
        else:
            paths.append(p)
    if not paths:
        raise ConfigurationError("no report files found")
    rows = [summary_row(p.stem, load_report(p)) for p in paths]
    out = Path(args.out)
    if args.format == "csv":
        with out.open("w", encoding="utf-8", newline="") as fh:
            writer = _csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
            writer.writeheader()
            writer.writerows(rows)
    else:
        out.write_text(json.dumps(rows, indent=2) + "\n", encoding="utf-8")
    print(f"reports={len(rows)} out={out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="incpl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one online evaluation stream")
    _add_stream_flags(p_run)
    p_run.add_argument("--out", required=True, help="report JSON path")
    p_run.add_argument("--step-log", help="also write per-step loss breakdowns as JSON lines")
    p_run.add_argument("--theta-in", help="resume the token net from a saved tensor file")
    p_run.add_argument("--theta-out", help="save the final token net for later resumption")
    p_run.set_defaults(func=_cmd_run)

    p_synth = sub.add_parser("synth", help="generate a synthetic desk-scale task")
    p_synth.add_argument("--classes", type=int, default=8)
    p_synth.add_argument("--per-class", type=int, default=25)
    p_synth.add_argument("--separation", type=float, default=1.0)
    p_synth.add_argument("--noise", type=float, default=0.15)
    p_synth.add_argument("--labeled-fraction", type=float, default=0.2)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--backend-config")
    p_synth.add_argument("--precision", choices=("float64", "float32"), default="float64")
    p_synth.add_argument("--out", required=True, help="task output directory")
    p_synth.set_defaults(func=_cmd_synth)

    p_matrix = sub.add_parser("matrix", help="run an ablation grid")
    _add_stream_flags(p_matrix)
    p_matrix.add_argument("--axis", choices=MATRIX_AXES, required=True)
    p_matrix.add_argument("--values", help="comma-separated axis values (axis-specific default otherwise)")
    p_matrix.add_argument("--seeds", help="comma-separated stream seeds (default: --seed)")
    p_matrix.add_argument("--out", required=True, help="output directory for cell reports + summary.csv")
    p_matrix.set_defaults(func=_cmd_matrix)

    p_report = sub.add_parser("report", help="summarize stored reports")
    p_report.add_argument("inputs", nargs="+", help="report files or directories")
    p_report.add_argument("--format", choices=("json", "csv"), default="csv")
    p_report.add_argument("--out", required=True)
    p_report.set_defaults(func=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    torch.set_num_threads(1)  # keeps report digests stable across machines
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except InCPLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
