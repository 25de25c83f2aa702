"""Clip quality metrics, threshold gating, and per-dataset retention reports.

Input manifests are JSON-lines: either full clip records (landmark stream
inline or via a relative ``landmarks_path``) or per-dataset summary rows
``{dataset_name, hours_in, hours_kept}``. Metric means in a report
describe the raw (pre-gate) dataset.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, ContractError, GeometryError
from .synthface import CANONICAL_PARAMS, canonical_landmarks

BBOX_MARGIN = 1.25  # face crop box: tight landmark box scaled by 25 %


@dataclass
class ClipRecord:
    clip_id: str
    dataset_name: str
    duration_s: float
    landmarks: np.ndarray  # (F, N, 2)
    sync_c: float
    sync_d: float

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, dtype=np.float64)
        if self.duration_s <= 0:
            raise ContractError(f"{self.clip_id}: duration must be positive")
        if not (np.isfinite(self.sync_c) and np.isfinite(self.sync_d)):
            raise ContractError(f"{self.clip_id}: sync scores must be finite")
        if self.landmarks.ndim != 3 or self.landmarks.shape[0] < 1 or self.landmarks.shape[2] != 2:
            raise ContractError(f"{self.clip_id}: landmark stream must be (F, N, 2), nonempty")


@dataclass(frozen=True)
class GateThresholds:
    min_facial_res: tuple = (600.0, 600.0)  # strictly greater than
    min_sync_c: float = 6.0                 # strictly greater than
    max_sync_d: float = 8.5                 # strictly less than
    max_head_angle_deg: float = 30.0        # kept up to and including

    def with_overrides(self, overrides):
        known = {"facial_res", "sync_c", "sync_d", "head_angle"}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"unknown threshold names {sorted(unknown)}")
        out = self
        if "facial_res" in overrides:
            r = float(overrides["facial_res"])
            out = replace(out, min_facial_res=(r, r))
        if "sync_c" in overrides:
            out = replace(out, min_sync_c=float(overrides["sync_c"]))
        if "sync_d" in overrides:
            out = replace(out, max_sync_d=float(overrides["sync_d"]))
        if "head_angle" in overrides:
            out = replace(out, max_head_angle_deg=float(overrides["head_angle"]))
        return out


def facial_resolution(record):
    """Mean (width, height) of the margined face box across frames."""
    lms = record.landmarks
    if lms.shape[0] < 1:
        raise ContractError("empty landmark stream")
    widths = (lms[:, :, 0].max(axis=1) - lms[:, :, 0].min(axis=1)) * BBOX_MARGIN
    heights = (lms[:, :, 1].max(axis=1) - lms[:, :, 1].min(axis=1)) * BBOX_MARGIN
    return float(widths.mean()), float(heights.mean())


def _similarity_angle(template, observed):
    """In-plane rotation (radians) of the least-squares similarity fit."""
    n = len(template)
    design = np.zeros((2 * n, 4))
    target = np.zeros(2 * n)
    x, y = template[:, 0], template[:, 1]
    design[0::2, 0], design[0::2, 1], design[0::2, 2] = x, -y, 1.0
    design[1::2, 0], design[1::2, 1], design[1::2, 3] = y, x, 1.0
    target[0::2], target[1::2] = observed[:, 0], observed[:, 1]
    if np.linalg.matrix_rank(design) < 4:
        raise GeometryError("degenerate frame for similarity fit")
    (a, b, _, _), _, _, _ = np.linalg.lstsq(design, target, rcond=None)
    if np.hypot(a, b) < 1e-12:
        raise GeometryError("similarity fit collapsed to zero scale")
    return float(np.arctan2(b, a))


def head_rotation_angle(record):
    """Mean absolute in-plane rotation (degrees) against the frontal template.

    Degenerate frames are skipped; a clip with no usable frame raises.
    """
    template = canonical_landmarks(CANONICAL_PARAMS, 32)
    angles = []
    for frame in record.landmarks:
        try:
            angles.append(abs(np.rad2deg(_similarity_angle(template, frame))))
        except GeometryError:
            continue
    if not angles:
        raise ContractError(f"{record.clip_id}: every frame is degenerate")
    return float(np.mean(angles))


def gate(record, thresholds=GateThresholds()):
    """(keep, reasons): reasons lists every violated criterion."""
    reasons = []
    w, h = facial_resolution(record)
    if not (w > thresholds.min_facial_res[0] and h > thresholds.min_facial_res[1]):
        reasons.append("facial_resolution")
    if not record.sync_c > thresholds.min_sync_c:
        reasons.append("sync_c")
    if not record.sync_d < thresholds.max_sync_d:
        reasons.append("sync_d")
    if not head_rotation_angle(record) <= thresholds.max_head_angle_deg:
        reasons.append("head_angle")
    return (not reasons), reasons


@dataclass
class DatasetRow:
    hours_in: float = 0.0
    hours_kept: float = 0.0
    mean_facial_res: tuple | None = None
    mean_sync_c: float | None = None
    mean_sync_d: float | None = None
    mean_head_angle: float | None = None


@dataclass
class FilterReport:
    datasets: dict = field(default_factory=dict)  # name -> DatasetRow
    hours_in: float = 0.0
    hours_kept: float = 0.0
    retained_fraction: float = 0.0

    def __post_init__(self):
        for name, row in self.datasets.items():
            if row.hours_kept > row.hours_in + 1e-12:
                raise ContractError(f"{name}: hours_kept exceeds hours_in")


def summarize(records, thresholds=GateThresholds()):
    """Collapse clip records to (dataset_name, hours_in, hours_kept) rows."""
    order = []
    sums = {}
    for rec in sorted(records, key=lambda r: r.clip_id):
        if rec.dataset_name not in sums:
            order.append(rec.dataset_name)
            sums[rec.dataset_name] = [0.0, 0.0]
        keep, _ = gate(rec, thresholds)
        sums[rec.dataset_name][0] += rec.duration_s / 3600.0
        if keep:
            sums[rec.dataset_name][1] += rec.duration_s / 3600.0
    return [{"dataset_name": n, "hours_in": sums[n][0], "hours_kept": sums[n][1]} for n in order]


def aggregate(items, thresholds=GateThresholds()):
    """Build a FilterReport from clip records or summary rows."""
    items = list(items)
    if not items:
        raise ContractError("aggregate: empty input")
    if isinstance(items[0], ClipRecord):
        rows = {}
        stats = {}
        for rec in sorted(items, key=lambda r: r.clip_id):
            row = rows.setdefault(rec.dataset_name, DatasetRow())
            s = stats.setdefault(rec.dataset_name, {"w": [], "h": [], "c": [], "d": [], "a": []})
            keep, _ = gate(rec, thresholds)
            hours = rec.duration_s / 3600.0
            row.hours_in += hours
            if keep:
                row.hours_kept += hours
            w, h = facial_resolution(rec)
            s["w"].append(w)
            s["h"].append(h)
            s["c"].append(rec.sync_c)
            s["d"].append(rec.sync_d)
            s["a"].append(head_rotation_angle(rec))
        for name, row in rows.items():
            s = stats[name]
            row.mean_facial_res = (float(np.mean(s["w"])), float(np.mean(s["h"])))
            row.mean_sync_c = float(np.mean(s["c"]))
            row.mean_sync_d = float(np.mean(s["d"]))
            row.mean_head_angle = float(np.mean(s["a"]))
    else:
        rows = {}
        for item in items:
            if item["dataset_name"] in rows:
                raise ContractError(f"duplicate summary row for {item['dataset_name']}")
            rows[item["dataset_name"]] = DatasetRow(
                hours_in=float(item["hours_in"]), hours_kept=float(item["hours_kept"]))

    hours_in = sum(r.hours_in for r in rows.values())
    hours_kept = sum(r.hours_kept for r in rows.values())
    return FilterReport(
        datasets=rows, hours_in=hours_in, hours_kept=hours_kept,
        retained_fraction=hours_kept / hours_in if hours_in else 0.0,
    )


def report_to_dict(report):
    def row_dict(row):
        return {
            "hours_in": row.hours_in,
            "hours_kept": row.hours_kept,
            "mean_facial_res": list(row.mean_facial_res) if row.mean_facial_res else None,
            "mean_sync_c": row.mean_sync_c,
            "mean_sync_d": row.mean_sync_d,
            "mean_head_angle": row.mean_head_angle,
        }

    return {
        "datasets": {name: row_dict(row) for name, row in report.datasets.items()},
        "totals": {
            "hours_in": report.hours_in,
            "hours_kept": report.hours_kept,
            "retained_fraction": report.retained_fraction,
        },
    }


def render_report_text(report):
    """Aligned-column table plus a totals line; byte-stable for fixed input."""
    headers = ["dataset", "hours", "kept", "facial res", "sync-c", "sync-d", "head ang"]
    lines = [headers]
    for name, row in report.datasets.items():
        res = "-" if row.mean_facial_res is None else (
            f"{row.mean_facial_res[0]:.0f}x{row.mean_facial_res[1]:.0f}")
        lines.append([
            name,
            f"{row.hours_in:g}",
            f"{row.hours_kept:g}",
            res,
            "-" if row.mean_sync_c is None else f"{row.mean_sync_c:.3f}",
            "-" if row.mean_sync_d is None else f"{row.mean_sync_d:.3f}",
            "-" if row.mean_head_angle is None else f"{row.mean_head_angle:.1f}",
        ])
    widths = [max(len(r[i]) for r in lines) for i in range(len(headers))]
    rendered = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in lines]
    rendered.append(
        f"total: {report.hours_kept:g} h kept of {report.hours_in:g} h "
        f"({100.0 * report.retained_fraction:.1f}%)")
    return "\n".join(rendered) + "\n"


# ---- manifest parsing --------------------------------------------------------


def parse_manifest(path, lenient=False):
    """Read a JSON-lines manifest into ClipRecords or summary rows."""
    records = []
    summaries = []
    errors = []
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                if "hours_in" in obj:
                    summaries.append({
                        "dataset_name": obj["dataset_name"],
                        "hours_in": float(obj["hours_in"]),
                        "hours_kept": float(obj["hours_kept"]),
                    })
                    continue
                if "landmarks_path" in obj:
                    with open(os.path.join(base, obj.pop("landmarks_path"))) as lf:
                        obj["landmarks"] = json.load(lf)
                records.append(ClipRecord(
                    clip_id=obj["clip_id"], dataset_name=obj["dataset_name"],
                    duration_s=float(obj["duration_s"]), landmarks=obj["landmarks"],
                    sync_c=float(obj["sync_c"]), sync_d=float(obj["sync_d"]),
                ))
            except (KeyError, ValueError, TypeError, OSError, ContractError) as exc:
                msg = f"{path}:{lineno}: {exc}"
                if lenient:
                    errors.append(msg)
                else:
                    raise ConfigError(msg) from exc
    if records and summaries:
        raise ConfigError(f"{path}: manifest mixes clip records and summary rows")
    return (records or summaries), errors
