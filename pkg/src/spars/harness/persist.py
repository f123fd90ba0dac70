"""Checkpoints (SPW1 weights plus a JSON sidecar) and CSV/JSON metric files."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .. import formats
from ..classifier import ClassifierNet
from ..errors import ParameterError
from ..selfplay import PolicyNet


def save_net(net, path):
    """Write weights to ``path`` and architecture fields to ``path.json``."""
    path = Path(path)
    formats.write_weights(path, net.state_arrays())
    meta = {"kind": "policy" if isinstance(net, PolicyNet) else "classifier",
            "input_dims": list(net.input_dims), "channels": list(net.channels),
            "fc_widths": list(net.fc_widths)}
    if isinstance(net, ClassifierNet):
        meta["smoothing"] = net.smoothing
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=1))


def load_net(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    common = dict(channels=tuple(meta["channels"]), fc_widths=tuple(meta["fc_widths"]))
    if meta["kind"] == "policy":
        net = PolicyNet(tuple(meta["input_dims"]), **common)
    elif meta["kind"] == "classifier":
        net = ClassifierNet(tuple(meta["input_dims"]), smoothing=meta["smoothing"], **common)
    else:
        raise ParameterError(f"unknown checkpoint kind {meta['kind']!r}")
    net.load_state_arrays(formats.read_weights(path))
    return net


def write_csv(path, header, rows):
    """``rows`` are sequences or dicts keyed by ``header``; floats use repr for exact round-trips."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            values = [row[h] for h in header] if isinstance(row, dict) else row
            w.writerow([_fmt(v) for v in values])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def aggregate(values):
    """Mean, population std and count of a list of numbers."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ParameterError("cannot aggregate an empty list")
    return {"mean": float(arr.mean()), "std": float(arr.std()), "n": int(arr.size)}


def export_metrics(records, path):
    """Write per-case rows to ``<path>.csv`` and the Dice/mIoU aggregate to ``<path>.json``.

    ``records`` are dicts with ``axis_value, seed, case_id, dice, miou``.
    """
    records = list(records)
    if not records:
        raise ParameterError("export_metrics needs at least one record")
    path = Path(path)
    header = ["axis_value", "seed", "case_id", "dice", "miou"]
    rows = [[_axis_str(r["axis_value"]), r["seed"], r["case_id"], r["dice"], r["miou"]] for r in records]
    write_csv(path.with_suffix(".csv"), header, rows)
    summary = {"dice": aggregate(r["dice"] for r in records),
               "miou": aggregate(r["miou"] for r in records)}
    summary.update(summary["dice"])
    write_json(path.with_suffix(".json"), summary)
    return path.with_suffix(".csv"), path.with_suffix(".json")


def _axis_str(v):
    if isinstance(v, (list, tuple)):
        return "x".join(str(int(x)) for x in v)
    return "" if v is None else v
