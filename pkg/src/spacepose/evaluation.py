"""Pose error metrics, table-style reports and bounding-box overlays."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw

from .geometry import PixelCoord, Pose, geodesic_angle

TABLE_COLUMNS = {
    "table2": ["E_x", "E_y", "E_z", "E_t"],
    "table4": ["init", "HC", "CDA", "E_t", "E_q (deg)"],
    "table5": ["E_t", "E_q (deg)"],
}
ABLATION_COLUMNS = ["init", "HC", "CDA", "E_t_mean", "E_t_std", "E_q_mean_deg", "E_q_std_deg"]


@dataclass
class MetricsReport:
    E_x: float
    E_y: float
    E_z: float
    E_t_mean: float
    E_t_std: float
    E_q_mean: float | None  # degrees
    E_q_std: float | None
    n: int
    t_errors: np.ndarray = field(default=None, repr=False)
    q_errors_deg: np.ndarray = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {"n": self.n, "E_x": self.E_x, "E_y": self.E_y, "E_z": self.E_z,
                "E_t": {"mean": self.E_t_mean, "std": self.E_t_std},
                "E_q_deg": {"mean": self.E_q_mean, "std": self.E_q_std},
                "std_kind": "population"}


def _array(x) -> np.ndarray:
    if torch.is_tensor(x):
        return x.detach().double().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def compute_metrics(preds: list[Pose], truths: list[Pose]) -> MetricsReport:
    """Per-axis, translation and rotation errors of predicted poses."""
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions for {len(truths)} ground-truth poses")
    if not preds:
        raise ValueError("cannot compute metrics on an empty set")
    return metrics_from_arrays(np.stack([p.t for p in preds]), np.stack([p.t for p in truths]),
                               np.stack([p.q for p in preds]), np.stack([p.q for p in truths]))


def metrics_from_arrays(pred_t, true_t, pred_q=None, true_q=None) -> MetricsReport:
    """Array form of :func:`compute_metrics`; rotation metrics are skipped without quaternions.

    Rotation errors are reported in degrees; dispersions are population std.
    """
    pred_t, true_t = _array(pred_t), _array(true_t)
    if pred_q is not None:
        pred_q, true_q = _array(pred_q), _array(true_q)
    if pred_t.shape != true_t.shape or pred_t.shape[0] < 1:
        raise ValueError(f"prediction/truth length mismatch: {pred_t.shape} vs {true_t.shape}")
    diff = true_t - pred_t
    per_axis = np.abs(diff).mean(axis=0)
    t_err = np.linalg.norm(diff, axis=1)
    q_err = None
    if pred_q is not None:
        if pred_q.shape != true_q.shape or pred_q.shape[0] != pred_t.shape[0]:
            raise ValueError("quaternion arrays do not match the translation arrays")
        pred_q = pred_q / np.linalg.norm(pred_q, axis=1, keepdims=True)
        true_q = true_q / np.linalg.norm(true_q, axis=1, keepdims=True)
        q_err = np.degrees(np.atleast_1d(geodesic_angle(true_q, pred_q)))
    return MetricsReport(
        E_x=float(per_axis[0]), E_y=float(per_axis[1]), E_z=float(per_axis[2]),
        E_t_mean=float(t_err.mean()), E_t_std=float(t_err.std()),
        E_q_mean=None if q_err is None else float(q_err.mean()),
        E_q_std=None if q_err is None else float(q_err.std()),
        n=int(pred_t.shape[0]), t_errors=t_err, q_errors_deg=q_err)


def _pm(mean, std, digits):
    if mean is None or (isinstance(mean, float) and math.isnan(mean)):
        return "n/a"
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def _mark(flag: bool) -> str:
    return "yes" if flag else "no"


def _fixed_width(columns, rows) -> str:
    widths = [max(len(c), *(len(r[i]) for r in rows)) for i, c in enumerate(columns)]
    line = lambda cells: " | ".join(c.ljust(w) for c, w in zip(cells, widths))  # noqa: E731
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(columns), sep] + [line(r) for r in rows]) + "\n"


def format_report(report: MetricsReport, style: str = "table2", labels: dict | None = None):
    """Render ``report`` in one of the published table layouts.

    Returns ``(text, data)``: a fixed-width table and a JSON-ready dict with the
    same columns. ``labels`` supplies ``init``/``HC``/``CDA`` for ``table4``.
    """
    if style not in TABLE_COLUMNS:
        raise ValueError(f"unknown style {style!r}; expected one of {sorted(TABLE_COLUMNS)}")
    columns = TABLE_COLUMNS[style]
    if style == "table2":
        cells = [f"{report.E_x:.4f}", f"{report.E_y:.4f}", f"{report.E_z:.4f}", f"{report.E_t_mean:.4f}"]
        data = {"E_x": report.E_x, "E_y": report.E_y, "E_z": report.E_z, "E_t": report.E_t_mean}
    else:
        et = _pm(report.E_t_mean, report.E_t_std, 3)
        eq = _pm(report.E_q_mean, report.E_q_std, 2)
        cells = [et, eq]
        data = {"E_t": {"mean": report.E_t_mean, "std": report.E_t_std},
                "E_q (deg)": {"mean": report.E_q_mean, "std": report.E_q_std}}
        if style == "table4":
            labels = labels or {}
            head = [str(labels.get("init", "n/a")), _mark(labels.get("HC", False)), _mark(labels.get("CDA", False))]
            cells = head + cells
            data = {"init": head[0], "HC": bool(labels.get("HC", False)),
                    "CDA": bool(labels.get("CDA", False)), **data}
    return _fixed_width(columns, [cells]), {"style": style, "columns": columns, "rows": [data],
                                            "std_kind": "population"}


def format_ablation(rows: list[dict]) -> str:
    """Fixed-width rendering of ablation rows using the Table 4 layout."""
    cells = []
    for r in rows:
        cells.append([r["init"], _mark(r["HC"]), _mark(r["CDA"]),
                      _pm(r["E_t_mean"], r["E_t_std"], 3), _pm(r["E_q_mean_deg"], r["E_q_std_deg"], 2)])
    return _fixed_width(TABLE_COLUMNS["table4"], cells)


def write_report(report: MetricsReport, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_json(), indent=2) + "\n")
    return path


def render_overlay(image, box, center: PixelCoord, out_path, color=(255, 40, 40), dot_radius: int = 2):
    """Draw the square ROI outline and the center dot onto a copy of ``image``.

    ``image`` is a path, a PIL image, or a 2D/3D array in ``[0, 255]`` or
    ``[0, 1]``. Edges outside the frame are clipped by the drawing surface.
    Returns the annotated RGB array.
    """
    if isinstance(image, (str, Path)):
        im = Image.open(image).convert("RGB")
    elif isinstance(image, Image.Image):
        im = image.convert("RGB")
    else:
        arr = np.asarray(image)
        if arr.dtype != np.uint8:
            arr = (np.clip(arr, 0, 1) * 255).round().astype(np.uint8)
        if arr.ndim == 3 and arr.shape[0] in (1, 3) and arr.shape[-1] not in (1, 3):
            arr = np.moveaxis(arr, 0, -1)
        if arr.ndim == 3 and arr.shape[-1] == 1:
            arr = arr[..., 0]
        im = Image.fromarray(arr).convert("RGB")
    draw = ImageDraw.Draw(im)
    left, top, right, bottom = box.corners
    # pixel k covers [k, k+1): the outline runs through the boundary pixels
    draw.rectangle([round(left), round(top), round(right) - 1, round(bottom) - 1], outline=color)
    u, v = center
    cu, cv = int(math.floor(u)), int(math.floor(v))
    draw.ellipse([cu - dot_radius, cv - dot_radius, cu + dot_radius, cv + dot_radius], fill=color)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    im.save(out_path)
    return np.asarray(im)
