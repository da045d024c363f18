"""Machine-readable metrics emission: one CSV and one JSON mirror.

Columns are fixed (run_id, stage, epoch, step, metric_name, value, seed)
and metric values are serialized with nine significant digits, so repeated
runs of a deterministic pipeline produce byte-identical files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass


@dataclass(frozen=True)
class MetricRow:
    run_id: str
    stage: str
    epoch: int
    step: int
    metric_name: str
    value: float
    seed: int


CSV_HEADER = "run_id,stage,epoch,step,metric_name,value,seed"


def _format_value(v: float) -> str:
    return format(float(v), ".9g")


def emit_metrics(rows: list[MetricRow], csv_path, json_path) -> None:
    """Write rows to a CSV and a JSON array; refuses non-finite values."""
    for row in rows:
        if not math.isfinite(row.value):
            raise ValueError(f"non-finite metric value for {row.metric_name!r}")

    lines = [CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r.run_id},{r.stage},{r.epoch},{r.step},{r.metric_name},{_format_value(r.value)},{r.seed}"
        )
    with open(csv_path, "w", newline="\n") as f:
        f.write("\n".join(lines) + "\n")

    parts = []
    for r in rows:
        parts.append(
            "{"
            + f'"run_id": {json.dumps(r.run_id)}, "stage": {json.dumps(r.stage)}, '
            + f'"epoch": {r.epoch}, "step": {r.step}, '
            + f'"metric_name": {json.dumps(r.metric_name)}, '
            + f'"value": {_format_value(r.value)}, "seed": {r.seed}'
            + "}"
        )
    with open(json_path, "w", newline="\n") as f:
        if parts:
            f.write("[\n  " + ",\n  ".join(parts) + "\n]\n")
        else:
            f.write("[]\n")


def parse_metrics_csv(path) -> list[MetricRow]:
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines or lines[0] != CSV_HEADER:
        raise ValueError(f"{path}: unexpected metrics header")
    rows = []
    for ln in lines[1:]:
        run_id, stage, epoch, step, name, value, seed = ln.split(",")
        rows.append(MetricRow(run_id, stage, int(epoch), int(step), name, float(value), int(seed)))
    return rows
