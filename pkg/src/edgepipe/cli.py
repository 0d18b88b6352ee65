"""edgepipe command line: profile | allocate | train | report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench
from .config import ARMS, ROLES, RunConfig, validate
from .errors import EdgePipeError, EmptyLaneSet, IncompleteTable, InvalidConfig, LaneFailure
from .lanes import LayerDims, ProfileTable, discover_lanes, profile
from .scheduler import allocate

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("edgepipe")


class UsageError(Exception):
    pass


def _load_config(args) -> RunConfig:
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from None
    for key in ("arm", "seed", "role", "stage"):
        value = getattr(args, key, None)
        if value is not None:
            doc[key] = value
    if getattr(args, "out", None):
        doc.setdefault("output", {})["dir"] = str(args.out)
    problems = validate(doc)
    if problems:
        raise UsageError("invalid config:\n  " + "\n  ".join(problems))
    return RunConfig.from_dict(doc)


def cmd_profile(args) -> int:
    run = _load_config(args)
    if not 0 <= args.device < len(run.devices):
        raise UsageError(f"--device {args.device} out of range (config has {len(run.devices)})")
    cfg = run.model
    with discover_lanes(run.devices[args.device].lanes) as lanes:
        try:
            table = profile(
                lanes,
                cfg.heads,
                LayerDims(cfg.d_head, cfg.seq_len, run.train.batch_size),
                run.profile.repetitions,
                run.profile.warmup,
                seed=run.seed,
            )
        except LaneFailure as exc:
            raise UsageError(str(exc)) from None
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "profile.json"
    path.write_text(table.dumps())
    print(f"profiled {table.M} lane(s) x {table.K} heads -> {path}")
    for lane in table.lanes:
        j = lane["id"]
        print(f"  lane {j} {lane['name'] or lane['kind']}: T[k=1]={table.T(j, 1):.3f} ms  T[k={table.K}]={table.T(j, table.K):.3f} ms ({table.mode(j, table.K)})")
    return EXIT_OK


def cmd_allocate(args) -> int:
    path = Path(args.table)
    if not path.is_file():
        raise UsageError(f"profile table not found: {path}")
    try:
        table = ProfileTable.loads(path.read_text())
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{path}: not a profile table ({exc})") from None
    try:
        plan = allocate(table, args.heads, epsilon=args.epsilon, sigma=args.sigma)
    except (IncompleteTable, ValueError) as exc:
        raise UsageError(str(exc)) from None
    text = plan.dumps()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_train(args) -> int:
    from . import session

    run = _load_config(args)
    if run.role == "worker":
        session.serve_worker(run, run.stage)
        return EXIT_OK

    def progress(r):
        last = r.stages[-1]["events"]
        losses = [e["loss"] for e in last if "loss" in e]
        log.info("round %d ranges=%s mean loss %.4f", r.epoch, r.partition["ranges"], sum(losses) / max(len(losses), 1))

    train = session.train_coordinator if run.role == "coordinator" else session.train_all_in_one
    result = train(run, progress)
    summary = bench.write_metrics(run.output_dir, run, result)
    latency = "n/a" if summary["latency_ms"] is None else f"{summary['latency_ms']:.3f}"
    print(
        f"{run.arm}: {summary['stages']} stage(s), {summary['steps']} steps, "
        f"latency {latency} ms/batch (model {summary['predicted_latency_ms']:.3f}), "
        f"loss {summary['first_loss']:.4f} -> {summary['last_loss']:.4f}, out={run.output_dir}"
    )
    return EXIT_OK


def cmd_report(args) -> int:
    missing = [p for p in args.metrics if not Path(p).is_file()]
    if missing:
        raise UsageError(f"metrics file(s) not found: {', '.join(missing)}")
    rows = bench.report_rows(args.metrics)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            bench.write_report(rows, fh)
    bench.write_report(rows, sys.stdout)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgepipe", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="profile one device's lanes and write profile.json")
    p.add_argument("--config", required=True)
    p.add_argument("--device", type=int, default=0)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("allocate", help="run the head allocator on a profile table")
    p.add_argument("--table", required=True)
    p.add_argument("--heads", type=int, help="K (default: the table's K)")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--sigma", type=float)
    p.add_argument("--out", help="plan JSON path")
    p.set_defaults(func=cmd_allocate)

    p = sub.add_parser("train", help="train one arm and write metrics.jsonl, summary.json, model.ckpt")
    p.add_argument("--config", required=True)
    p.add_argument("--arm", choices=ARMS)
    p.add_argument("--seed", type=int)
    p.add_argument("--role", choices=ROLES)
    p.add_argument("--stage", type=int, help="stage index for --role worker")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("report", help="compare metrics files (first one is the baseline) as CSV")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--out", help="CSV path (also printed)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, InvalidConfig, EmptyLaneSet) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EdgePipeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
