"""Command-line surface: one subcommand per stage plus the accounting utilities."""

import argparse
import json
import logging
from pathlib import Path
from typing import List, Optional

from core.accountant import CLASSIC, IMPROVED, best_order, calibrate_sigma, compute_epsilon, RDPCurve
from core.dp_optimizer import steps_for_epochs
from core.pipeline import StagePipeline, verify_stamp
from data import DatasetArchive, IdxFetcher, generate_shapes, ingest
from ui.report import write_report
from utils.config import AppConfig, load_run_config
from utils.errors import ConfigError

logger = logging.getLogger(__name__)

STAGE_COMMANDS = ("train-ae", "pretrain-dm", "finetune-dp", "sample", "eval")


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpldm", description=f"{AppConfig.APP_TITLE} {AppConfig.VERSION}")
    parser.add_argument("--log-level", default=AppConfig.LOG_LEVEL)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the built-in shapes benchmark")
    p.add_argument("out")
    p.add_argument("--n", type=int, default=4096)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--domain", choices=("public", "private"), default="public")
    p.add_argument("--gap", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ingest", help="image directory, archive or IDX file -> dataset archive")
    p.add_argument("source", nargs="?")
    p.add_argument("out")
    p.add_argument("--idx", help="IDX image file (alternative to source)")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--pad-to", type=int, default=32)
    p.add_argument("--limit", type=int)

    p = sub.add_parser("fetch-idx", help="download IDX files")
    p.add_argument("url", nargs="?")
    p.add_argument("dest")
    p.add_argument("--standard", action="store_true", help="fetch the four standard files into dest")
    p.add_argument("--mirror")

    for name in STAGE_COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        if name == "finetune-dp":
            p.add_argument("--resume", action="store_true")
        elif name == "sample":
            p.add_argument("--count", type=int)
            p.add_argument("--labels", type=_int_list)
            p.add_argument("--model", choices=("finetuned", "pretrained"), default="finetuned")
        elif name == "eval":
            p.add_argument("metric", choices=("fid", "dpfid", "classifier"))
            p.add_argument("--candidates", nargs="*", default=[])
            p.add_argument("--mean-only", action="store_true")
            p.add_argument("--zero-noise", action="store_true")

    p = sub.add_parser("account", help="epsilon of a subsampled Gaussian run")
    p.add_argument("--q", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--sigma", type=float, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--conversion", choices=(IMPROVED, CLASSIC), default=IMPROVED)

    p = sub.add_parser("calibrate", help="noise multiplier for a target epsilon")
    p.add_argument("--target-epsilon", type=float, required=True)
    p.add_argument("--delta", type=float, default=1e-5)
    p.add_argument("--q", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-sizes", type=_int_list)
    p.add_argument("--conversion", choices=(IMPROVED, CLASSIC), default=IMPROVED)

    p = sub.add_parser("verify", help="recompute the epsilon stamped into a checkpoint")
    p.add_argument("checkpoint")

    p = sub.add_parser("report", help="render a PDF summary of an output directory")
    p.add_argument("--config")
    p.add_argument("--output-dir")
    p.add_argument("--dest")
    return parser


def emit(result) -> None:
    print(json.dumps(result, indent=2, sort_keys=True, default=str))


def _rate_and_steps(args, batch_size: Optional[int] = None):
    if batch_size is not None or args.q is None:
        b = batch_size if batch_size is not None else getattr(args, "batch_size", None)
        if not (b and args.n and (args.steps or args.epochs)):
            raise ConfigError("give --q and --steps, or --n with a batch size and --steps/--epochs")
        return b / args.n, args.steps or steps_for_epochs(args.epochs, args.n, b)
    if not args.steps:
        raise ConfigError("--q needs --steps")
    return args.q, args.steps


def cmd_account(args) -> dict:
    q, steps = _rate_and_steps(args)
    eps = compute_epsilon(q, args.sigma, steps, args.delta, args.conversion)
    result = {"q": q, "sigma": args.sigma, "steps": steps, "delta": args.delta, "epsilon": eps}
    if args.sigma > 0:
        result["order"] = best_order(RDPCurve.for_mechanism(q, args.sigma).compose(steps),
                                     args.delta, args.conversion)
    return result


def cmd_calibrate(args) -> dict:
    if args.batch_sizes:
        rows = []
        for b in args.batch_sizes:
            q, steps = _rate_and_steps(args, batch_size=b)
            sigma = calibrate_sigma(q, steps, args.delta, args.target_epsilon, args.conversion)
            rows.append({"batch_size": b, "q": q, "steps": steps, "sigma": sigma})
        return {"target_epsilon": args.target_epsilon, "delta": args.delta, "rows": rows}
    q, steps = _rate_and_steps(args)
    sigma = calibrate_sigma(q, steps, args.delta, args.target_epsilon, args.conversion)
    return {"q": q, "steps": steps, "target_epsilon": args.target_epsilon, "delta": args.delta,
            "sigma": sigma}


def cmd_ingest(args) -> dict:
    source = args.idx or args.source
    if not source:
        raise ConfigError("ingest needs a source or --idx")
    archive = ingest(source, idx_labels=args.labels, pad_to=args.pad_to, limit=args.limit)
    digest = archive.save(args.out)
    return {"archive": args.out, "hash": digest, "count": len(archive),
            "shape": [archive.height, archive.width, archive.channels], "classes": archive.num_classes}


def cmd_stage(args) -> dict:
    pipeline = StagePipeline(load_run_config(args.config))
    if args.command == "finetune-dp":
        result = pipeline.run("finetune-dp", resume=args.resume)
        print(f"(epsilon, delta) = ({result['epsilon']:.4f}, {result['delta']:g})")
        return result
    if args.command == "sample":
        return pipeline.run("sample", count=args.count, labels=args.labels, which=args.model)
    if args.command == "eval":
        if args.metric == "dpfid":
            return pipeline.run("eval-dpfid", candidates=args.candidates, mean_only=args.mean_only,
                                zero_noise=args.zero_noise)
        return {args.metric: pipeline.run(f"eval-{args.metric}")}
    return pipeline.run(args.command)


def dispatch(args) -> dict:
    if args.command in STAGE_COMMANDS:
        return cmd_stage(args)
    if args.command == "synth":
        archive: DatasetArchive = generate_shapes(args.n, args.size, args.domain, args.gap, args.seed)
        return {"archive": args.out, "hash": archive.save(args.out), "classes": archive.class_counts()}
    if args.command == "ingest":
        return cmd_ingest(args)
    if args.command == "fetch-idx":
        fetcher = IdxFetcher(mirror=args.mirror)
        if args.standard:
            return {k: str(v) for k, v in fetcher.fetch_standard(args.dest).items()}
        if not args.url:
            raise ConfigError("fetch-idx needs a url or --standard")
        return {"path": str(fetcher.fetch(args.url, args.dest))}
    if args.command == "account":
        return cmd_account(args)
    if args.command == "calibrate":
        return cmd_calibrate(args)
    if args.command == "verify":
        return verify_stamp(args.checkpoint)
    if args.command == "report":
        if args.config:
            out = load_run_config(args.config).output_path
        elif args.output_dir:
            out = Path(args.output_dir)
        else:
            raise ConfigError("report needs --config or --output-dir")
        return {"report": str(write_report(out, args.dest))}
    raise ConfigError(f"unknown command {args.command!r}")
