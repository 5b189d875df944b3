"""DSC / Hausdorff metrics, per-task and per-ROI aggregation, and the task-ID sweep.

Conventions: both masks empty gives DSC 1 and HD 0; exactly one empty gives
DSC 0 and an undefined HD (``None``), which is left out of every mean.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def dsc(pred, gt) -> float:
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def boundary(mask) -> np.ndarray:
    """Voxels of ``mask`` with at least one 6-neighbour outside it (or off-grid)."""
    mask = np.asarray(mask, bool)
    if mask.ndim != 3:
        raise ValueError("boundary expects a 3D mask")
    return mask & ~ndimage.binary_erosion(mask, SIX_CONNECTED, border_value=0)


def surface_distances(pred, gt, spacing=(1.0, 1.0, 1.0)):
    """Directed nearest-boundary distances (pred->gt, gt->pred) in mm."""
    sp = np.asarray(spacing, dtype=np.float64)
    bp = np.argwhere(boundary(pred)) * sp
    bg = np.argwhere(boundary(gt)) * sp
    d_pg = cKDTree(bg).query(bp)[0]
    d_gp = cKDTree(bp).query(bg)[0]
    return d_pg, d_gp


def hausdorff(pred, gt, spacing=(1.0, 1.0, 1.0), percentile=None) -> Optional[float]:
    """Symmetric Hausdorff distance between mask boundaries in mm.

    ``percentile=95`` gives HD95 (max of the two directed 95th percentiles).
    """
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    pe, ge = not pred.any(), not gt.any()
    if pe and ge:
        return 0.0
    if pe or ge:
        return None
    d_pg, d_gp = surface_distances(pred, gt, spacing)
    if percentile is None:
        return float(max(d_pg.max(), d_gp.max()))
    return float(max(np.percentile(d_pg, percentile), np.percentile(d_gp, percentile)))


@dataclass
class CaseResult:
    case_id: str
    task_id: int
    dsc: Dict[int, float] = field(default_factory=dict)
    hd: Dict[int, Optional[float]] = field(default_factory=dict)

    def to_dict(self, registry=None):
        name = (lambda c: registry.global_labels[c]) if registry else str
        return {"case_id": self.case_id, "task_id": self.task_id,
                "dsc": {name(c): v for c, v in self.dsc.items()},
                "hd": {name(c): v for c, v in self.hd.items()}}


def evaluate_case(pred_masks, gt, presence, spacing=(1.0, 1.0, 1.0), case_id="case", task_id=1,
                  hd_percentile=None) -> CaseResult:
    """Metrics for the channels in ``presence`` only; inputs are ``(|L|, Z, Y, X)``."""
    pred_masks, gt = np.asarray(pred_masks, bool), np.asarray(gt, bool)
    if pred_masks.shape != gt.shape:
        raise ValueError(f"prediction {pred_masks.shape} and ground truth {gt.shape} differ")
    res = CaseResult(case_id, int(task_id))
    for c in np.flatnonzero(presence):
        c = int(c)
        res.dsc[c] = dsc(pred_masks[c], gt[c])
        res.hd[c] = hausdorff(pred_masks[c], gt[c], spacing, hd_percentile)
    return res


def _mean(values):
    vals = [v for v in values if v is not None]
    return (math.fsum(vals) / len(vals) if vals else None), len(vals)


@dataclass
class AggregateReport:
    per_task: Dict[int, dict]
    per_roi: Dict[int, dict]
    task_mean_dsc: Optional[float]
    task_mean_hd: Optional[float]
    roi_mean_dsc: Optional[float]
    roi_mean_hd: Optional[float]
    labels: List[str] = field(default_factory=list)
    task_names: Dict[int, str] = field(default_factory=dict)

    def to_dict(self):
        return {
            "per_task": {self.task_names.get(t, str(t)): v | {"task_id": t} for t, v in self.per_task.items()},
            "per_roi": {self.labels[c] if self.labels else str(c): v for c, v in self.per_roi.items()},
            "overall_tasks": {"dsc": self.task_mean_dsc, "hd": self.task_mean_hd},
            "overall_rois": {"dsc": self.roi_mean_dsc, "hd": self.roi_mean_hd},
        }

    def rows(self):
        for t, v in self.per_task.items():
            yield "task", self.task_names.get(t, str(t)), v
        for c, v in self.per_roi.items():
            yield "roi", self.labels[c] if self.labels else str(c), v

    def to_text(self):
        def fmt(x, scale=1.0):
            return "-" if x is None else f"{x * scale:.2f}"

        rows = list(self.rows())
        width = max([len(r[1]) for r in rows] + [12])
        lines = [f"{'group':<6} {'name':<{width}} {'DSC%':>7} {'HD':>8} {'n_dsc':>6} {'n_hd':>5}"]
        for kind, name, v in rows:
            lines.append(f"{kind:<6} {name:<{width}} {fmt(v['dsc'], 100):>7} {fmt(v['hd']):>8} "
                         f"{v['n_dsc']:>6} {v['n_hd']:>5}")
        lines.append(f"{'avg':<6} {'tasks':<{width}} {fmt(self.task_mean_dsc, 100):>7} {fmt(self.task_mean_hd):>8}")
        lines.append(f"{'avg':<6} {'rois':<{width}} {fmt(self.roi_mean_dsc, 100):>7} {fmt(self.roi_mean_hd):>8}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir, stem="report"):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / f"{stem}.json", "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        (out_dir / f"{stem}.txt").write_text(self.to_text())
        with open(out_dir / f"{stem}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "name", "dsc", "hd", "n_dsc", "n_hd"])
            for kind, name, v in self.rows():
                w.writerow([kind, name, v["dsc"], v["hd"], v["n_dsc"], v["n_hd"]])
        with open(out_dir / f"{stem}_roi_dsc_bars.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["roi", "dsc"])
            for kind, name, v in self.rows():
                if kind == "roi":
                    w.writerow([name, v["dsc"]])


def aggregate(results, registry=None) -> AggregateReport:
    results = list(results)
    if not results:
        raise ValueError("nothing to aggregate")
    by_task, by_roi = {}, {}
    for r in results:
        t = by_task.setdefault(r.task_id, {"dsc": [], "hd": []})
        for c in r.dsc:
            t["dsc"].append(r.dsc[c])
            t["hd"].append(r.hd.get(c))
            roi = by_roi.setdefault(c, {"dsc": [], "hd": []})
            roi["dsc"].append(r.dsc[c])
            roi["hd"].append(r.hd.get(c))

    def summarize(groups):
        out = {}
        for key in sorted(groups):
            d, nd = _mean(groups[key]["dsc"])
            h, nh = _mean(groups[key]["hd"])
            out[key] = {"dsc": d, "hd": h, "n_dsc": nd, "n_hd": nh,
                        "n_hd_undefined": len(groups[key]["hd"]) - nh}
        return out

    per_task, per_roi = summarize(by_task), summarize(by_roi)
    labels = list(registry.global_labels) if registry else []
    names = {t.id: t.name for t in registry.tasks} if registry else {}
    return AggregateReport(
        per_task, per_roi,
        _mean(v["dsc"] for v in per_task.values())[0], _mean(v["hd"] for v in per_task.values())[0],
        _mean(v["dsc"] for v in per_roi.values())[0], _mean(v["hd"] for v in per_roi.values())[0],
        labels, names)


def task_id_sweep(model, volumes, registry, patch_size=None, overlap=0.5):
    """DSC matrix ``(N tasks, |L|)``: row i is inference under task ID i+1.

    ``volumes`` yields ``(image, full_multihot)`` pairs with every label annotated.
    """
    from .inference import masks_from_logits, sliding_window_predict

    volumes = list(volumes)
    out = np.zeros((registry.num_tasks, registry.num_labels))
    for i in range(registry.num_tasks):
        per_vol = []
        for image, gt in volumes:
            masks = masks_from_logits(sliding_window_predict(model, image, i + 1, patch_size, overlap))
            per_vol.append([dsc(masks[c], gt[c]) for c in range(registry.num_labels)])
        out[i] = np.mean(per_vol, axis=0)
    return out


def write_sweep_csv(path, matrix, registry):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", "task"] + list(registry.global_labels))
        for i, row in enumerate(matrix):
            w.writerow([i + 1, registry.tasks[i].name] + [f"{x:.6f}" for x in row])
