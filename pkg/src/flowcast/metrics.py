"""Error metrics, the historical-average baseline, and comparison reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import DataError
from .tensor import FlowTensor, FragmentIndex, format_rfc3339


def _stack(matrices) -> np.ndarray:
    arr = matrices.matrices if isinstance(matrices, FlowTensor) else np.asarray(matrices, dtype=float)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DataError(f"expected a stack of matrices, got shape {arr.shape}")
    return arr


def _aligned(pred, truth, nonzero_only: bool) -> tuple[np.ndarray, np.ndarray]:
    p, t = _stack(pred), _stack(truth)
    if p.shape != t.shape:
        raise DataError(f"prediction shape {p.shape} does not match truth {t.shape}")
    if nonzero_only:
        mask = t != 0
        if not mask.any():
            raise DataError("nonzero-only metrics requested but truth is all zero")
        return p[mask], t[mask]
    return p, t


def mae(pred, truth, nonzero_only: bool = False) -> float:
    """Mean absolute entry-wise error over all matrices."""
    p, t = _aligned(pred, truth, nonzero_only)
    return float(np.mean(np.abs(p - t)))


def rmse(pred, truth, nonzero_only: bool = False) -> float:
    """Root mean squared entry-wise error over all matrices."""
    p, t = _aligned(pred, truth, nonzero_only)
    return float(np.sqrt(np.mean((p - t) ** 2)))


def _bucket_key(fragment: FragmentIndex) -> tuple:
    return (fragment.hour, fragment.weekday, fragment.day_type)


def ha_baseline(train: FlowTensor, targets: Sequence[FragmentIndex]
                ) -> tuple[np.ndarray, list[str]]:
    """Predict each target as the mean training matrix of its (hour, weekday,
    day-type) bucket, falling back to (hour, day-type) and then to the global
    mean; fallbacks are flagged."""
    if train.n == 0:
        raise DataError("empty training tensor")
    full: dict[tuple, list[int]] = {}
    coarse: dict[tuple, list[int]] = {}
    for i, f in enumerate(train.fragments):
        full.setdefault(_bucket_key(f), []).append(i)
        coarse.setdefault((f.hour, f.day_type), []).append(i)
    global_mean = train.matrices.mean(axis=0)

    flags = []
    preds = np.empty((len(targets), train.m, train.m))
    for k, f in enumerate(targets):
        idx = full.get(_bucket_key(f))
        if idx is None:
            idx = coarse.get((f.hour, f.day_type))
            if idx is None:
                flags.append(f"{format_rfc3339(f.start)}: global-mean fallback")
                preds[k] = global_mean
                continue
            flags.append(f"{format_rfc3339(f.start)}: hour/day-type fallback")
        preds[k] = train.matrices[idx].mean(axis=0)
    return preds, flags


@dataclass
class MetricReport:
    model: str
    mae: float
    rmse: float
    per_fragment: list[dict]
    config_fingerprint: str = ""
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"model": self.model, "mae": self.mae, "rmse": self.rmse,
                "config_fingerprint": self.config_fingerprint,
                "per_fragment": self.per_fragment, "flags": self.flags}


def compare(models: dict[str, Union[np.ndarray, FlowTensor]], truth: FlowTensor,
            nonzero_only: bool = False, config_fingerprint: str = "",
            csv_path: Optional[str | Path] = None,
            json_path: Optional[str | Path] = None) -> list[MetricReport]:
    """Score each model's fragment-aligned predictions against the truth
    tensor; optionally write the per-fragment CSV and aggregate JSON."""
    reports = []
    for name, pred in models.items():
        p = _stack(pred)
        if p.shape != truth.matrices.shape:
            raise DataError(f"model {name!r}: prediction shape {p.shape} is not "
                            f"aligned with truth {truth.matrices.shape}")
        per_fragment = []
        for i, f in enumerate(truth.fragments):
            if nonzero_only and not np.any(truth.matrices[i]):
                frag_mae = frag_rmse = float("nan")  # no scored entries this hour
            else:
                frag_mae = mae(p[i], truth.matrices[i], nonzero_only)
                frag_rmse = rmse(p[i], truth.matrices[i], nonzero_only)
            per_fragment.append({
                "fragment_start": format_rfc3339(f.start),
                "hour": f.hour,
                "mae": frag_mae,
                "rmse": frag_rmse,
            })
        reports.append(MetricReport(
            model=name,
            mae=mae(p, truth.matrices, nonzero_only),
            rmse=rmse(p, truth.matrices, nonzero_only),
            per_fragment=per_fragment,
            config_fingerprint=config_fingerprint,
        ))

    if csv_path is not None:
        write_report_csv(reports, csv_path)
    if json_path is not None:
        write_report_json(reports, json_path)
    return reports


def write_report_csv(reports: list[MetricReport], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "fragment_start", "hour", "mae", "rmse"])
        for report in reports:
            for row in report.per_fragment:
                writer.writerow([report.model, row["fragment_start"], row["hour"],
                                 repr(row["mae"]), repr(row["rmse"])])


def write_report_json(reports: list[MetricReport], path: str | Path) -> None:
    doc = {r.model: {"mae": r.mae, "rmse": r.rmse,
                     "config_fingerprint": r.config_fingerprint, "flags": r.flags}
           for r in reports}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
