"""Arm metrics: analytic latency model, steady-state measurement, metrics files and reports."""

from __future__ import annotations

import csv
import json
import statistics
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig
from .model import SyntheticTask, build_model, evaluate, save_checkpoint
from .pipeline import BACKWARD, StageCost
from .session import TrainingResult

METRICS_FILE = "metrics.jsonl"
SUMMARY_FILE = "summary.json"
CHECKPOINT_FILE = "model.ckpt"


def predict_period(attention_ms: Sequence[float], sizes: Sequence[int], cost: StageCost) -> float:
    """Steady-state time between consecutive batch completions under 1F1B.

    Stage s spends F_s = blocks_s * (attention + other) on a forward and
    backward_factor * F_s on a backward. The period is the largest of each
    stage's own busy time per batch and, for every stage, its round trip to
    the end of the pipe divided by the S - s batches it keeps in flight.
    """
    S = len(sizes)
    busy = [n * (a + cost.other_ms_per_block) * (1 + cost.backward_factor) for a, n in zip(attention_ms, sizes)]
    bounds = list(busy)
    for s in range(S):
        trip = sum(busy[s:]) + 2 * (S - 1 - s) * cost.link_ms
        bounds.append(trip / (S - s))
    return max(bounds)


def steady_state_latency(events: Sequence[dict], num_stages: int) -> Optional[float]:
    """Mean interval between stage-0 backward completions, per round, skipping warmup and drain.

    Returns None when no round is long enough to have a steady state.
    """
    intervals = []
    rounds = sorted({e.get("epoch", 0) for e in events})
    for r in rounds:
        ends = sorted(e["end_ms"] for e in events if e["stage"] == 0 and e["phase"] == BACKWARD and e.get("epoch", 0) == r)
        gaps = np.diff(ends)
        keep = gaps[num_stages : len(gaps) - num_stages + 1] if num_stages > 1 else gaps
        intervals.extend(keep.tolist())
    return float(np.mean(intervals)) if intervals else None


def stage_peaks(events: Sequence[dict]) -> dict[int, int]:
    peaks: dict[int, int] = {}
    for e in events:
        peaks[e["stage"]] = max(peaks.get(e["stage"], 0), e["peak_bytes"])
    return dict(sorted(peaks.items()))


def summarize(run: RunConfig, result: TrainingResult, eval_batches: int = 8) -> dict:
    last = result.rounds[-1]
    events = [e for r in result.rounds for s in r.stages for e in s["events"]]
    predicted = predict_period([s["attention_ms"] for s in last.stages], [hi - lo for lo, hi in last.partition["ranges"]], run.cost)
    measured = steady_state_latency(events, result.num_stages)
    losses = result.losses()
    task = SyntheticTask(run.model, size=run.train.dataset_size, seed=run.seed)
    holdout = list(task.batches(run.train.batch_size, epoch=10**6))[:eval_batches]
    init_loss, init_acc = evaluate(build_model(run.model), holdout)
    final_loss, final_acc = evaluate(result.model, holdout)
    peaks = stage_peaks(events)
    return {
        "arm": run.arm,
        "seed": run.seed,
        "stages": result.num_stages,
        "steps": len(losses),
        "partition": last.partition,
        "predicted_latency_ms": predicted,
        "latency_ms": measured,
        "peak_bytes": {str(s): b for s, b in peaks.items()},
        "analytic_bytes": {str(s["stage"]): s["analytic"]["total"] for s in last.stages},
        "max_stage_peak_bytes": max(peaks.values()),
        "mean_stage_peak_bytes": statistics.fmean(peaks.values()),
        "first_loss": losses[0],
        "last_loss": losses[-1],
        "eval_initial": {"loss": init_loss, "accuracy": init_acc},
        "eval_final": {"loss": final_loss, "accuracy": final_acc},
        "devices": result.devices,
    }


def write_metrics(out_dir, run: RunConfig, result: TrainingResult) -> dict:
    """metrics.jsonl (run header, partitions, trace events), summary.json and the checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(run, result)
    with open(out / METRICS_FILE, "w") as fh:
        fh.write(json.dumps({"type": "run", "arm": run.arm, "seed": run.seed, "stages": result.num_stages, "config": run.to_dict()}) + "\n")
        for r in result.rounds:
            fh.write(json.dumps({"type": "partition", "epoch": r.epoch, **r.partition}) + "\n")
            for s in r.stages:
                for e in s["events"]:
                    fh.write(json.dumps(e) + "\n")
        fh.write(json.dumps({"type": "summary", **summary}) + "\n")
    (out / SUMMARY_FILE).write_text(json.dumps(summary, indent=2))
    save_checkpoint(out / CHECKPOINT_FILE, result.model)
    return summary


def load_metrics(path) -> tuple[dict, list[dict], Optional[dict]]:
    header, events, summary = {}, [], None
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            doc = json.loads(line)
            kind = doc.get("type")
            if kind == "run":
                header = doc
            elif kind == "summary":
                summary = doc
            elif kind is None:
                events.append(doc)
    return header, events, summary


REPORT_COLUMNS = [
    "file",
    "arm",
    "stages",
    "latency_ms",
    "speedup",
    "max_stage_peak_bytes",
    "memory_ratio",
    "mean_stage_peak_bytes",
    "mean_memory_ratio",
]


def report_rows(paths: Sequence) -> list[dict]:
    """One row per metrics file; ratios are relative to the first file."""
    rows = []
    for p in paths:
        header, events, _ = load_metrics(p)
        stages = header.get("stages", 1 + max((e["stage"] for e in events), default=0))
        peaks = stage_peaks(events)
        rows.append(
            {
                "file": str(p),
                "arm": header.get("arm", ""),
                "stages": stages,
                "latency_ms": steady_state_latency(events, stages),
                "max_stage_peak_bytes": max(peaks.values()),
                "mean_stage_peak_bytes": statistics.fmean(peaks.values()),
            }
        )
    base = rows[0]
    for row in rows:
        # no steady state (rounds too short for the pipe depth) -> no speedup
        ok = base["latency_ms"] and row["latency_ms"]
        row["speedup"] = base["latency_ms"] / row["latency_ms"] if ok else None
        row["memory_ratio"] = row["max_stage_peak_bytes"] / base["max_stage_peak_bytes"]
        row["mean_memory_ratio"] = row["mean_stage_peak_bytes"] / base["mean_stage_peak_bytes"]
    return rows


def write_report(rows: Sequence[dict], fh) -> None:
    writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in REPORT_COLUMNS})
