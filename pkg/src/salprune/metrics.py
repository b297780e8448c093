"""Detection quality (AP at IoU 0.5, by object scale) and model cost accounting.

Conventions: FLOPs are counted as 2x multiply-accumulates for conv layers only;
norm and activation costs are ignored as conv-dominated. Area buckets use the
ground-truth pixel area at native image resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import BBox
from .errors import GraphError
from .graph import ModelGraph

SMALL_AREA = 32.0**2
LARGE_AREA = 96.0**2

AREA_RANGES = {
    "all": (0.0, math.inf),
    "small": (0.0, SMALL_AREA),          # area < 32^2
    "medium": (SMALL_AREA, LARGE_AREA),  # 32^2 <= area <= 96^2
    "large": (LARGE_AREA, math.inf),     # area > 96^2
}


@dataclass(frozen=True)
class Detection:
    sample_id: str
    box: BBox
    confidence: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.confidence):
            raise ValueError(f"non-finite confidence {self.confidence}")

    @property
    def class_id(self) -> int:
        return self.box.class_id

    def as_json_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "box": [self.box.x_min, self.box.y_min, self.box.x_max, self.box.y_max],
            "class_id": self.box.class_id,
            "confidence": self.confidence,
        }


def iou(a: BBox, b: BBox) -> float:
    ix = max(0.0, min(a.x_max, b.x_max) - max(a.x_min, b.x_min))
    iy = max(0.0, min(a.y_max, b.y_max) - max(a.y_min, b.y_min))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    union = a.area + b.area - inter
    return inter / union


def _in_range(area: float, area_range: tuple[float, float]) -> bool:
    lo, hi = area_range
    if hi is math.inf or hi == math.inf:
        return area > lo if lo > 0 else area >= lo
    if lo == 0.0:
        return area < hi
    return lo <= area <= hi


def _det_sort_key(d: Detection):
    # content-based tie key: equal-confidence duplicates sort identically
    return (-d.confidence, d.sample_id, d.box.x_min, d.box.y_min, d.box.x_max,
            d.box.y_max, d.box.class_id)


def match_detections(dets: list[Detection], gts: dict[str, list[BBox]], class_id: int,
                     iou_thresh: float = 0.5) -> list[tuple[Detection, BBox | None]]:
    """Greedy confidence-descending matching of one class against all its GTs.

    Each ground truth matches at most one detection; a detection matches the
    highest-IoU unclaimed ground truth at or above the threshold.
    """
    order = sorted([d for d in dets if d.class_id == class_id], key=_det_sort_key)
    claimed: dict[str, set[int]] = {}
    results: list[tuple[Detection, BBox | None]] = []
    for det in order:
        candidates = [g for g in gts.get(det.sample_id, []) if g.class_id == class_id]
        used = claimed.setdefault(det.sample_id, set())
        best_idx, best_iou = -1, iou_thresh
        for gi, g in enumerate(candidates):
            if gi in used:
                continue
            v = iou(det.box, g)
            if v >= best_iou:
                best_idx, best_iou = gi, v
        if best_idx >= 0:
            used.add(best_idx)
            results.append((det, candidates[best_idx]))
        else:
            results.append((det, None))
    return results


def precision_recall(dets: list[Detection], gts: dict[str, list[BBox]], class_id: int,
                     iou_thresh: float = 0.5,
                     area_range: tuple[float, float] = (0.0, math.inf)
                     ) -> tuple[np.ndarray, np.ndarray, int]:
    """(recall, precision) arrays in confidence order, plus the in-range GT count.

    Detections matched to an out-of-range ground truth are ignored, as are
    unmatched detections whose own box area is out of range.
    """
    n_gt = sum(
        1
        for boxes in gts.values()
        for g in boxes
        if g.class_id == class_id and _in_range(g.area, area_range)
    )
    matches = match_detections(dets, gts, class_id, iou_thresh)
    tps, fps = [], []
    for det, gt in matches:
        if gt is not None:
            if _in_range(gt.area, area_range):
                tps.append(1.0)
                fps.append(0.0)
        elif _in_range(det.box.area, area_range):
            tps.append(0.0)
            fps.append(1.0)
    if not tps or n_gt == 0:
        return np.zeros(0), np.zeros(0), n_gt
    tp = np.cumsum(tps)
    fp = np.cumsum(fps)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    return recall, precision, n_gt


def interpolated_ap(recall: np.ndarray, precision: np.ndarray, n_points: int = 101) -> float:
    """Mean of the precision envelope sampled at evenly spaced recall thresholds."""
    if recall.size == 0:
        return 0.0
    thresholds = np.linspace(0.0, 1.0, n_points)
    total = 0.0
    for t in thresholds:
        mask = recall >= t - 1e-12
        total += float(precision[mask].max()) if mask.any() else 0.0
    return total / n_points


def average_precision(dets: list[Detection], gts: dict[str, list[BBox]], class_id: int,
                      iou_thresh: float = 0.5,
                      area_range: tuple[float, float] = (0.0, math.inf),
                      n_points: int = 101) -> float | None:
    """AP for one class; None when no ground truth falls in the area range."""
    recall, precision, n_gt = precision_recall(dets, gts, class_id, iou_thresh, area_range)
    if n_gt == 0:
        return None
    return interpolated_ap(recall, precision, n_points)


def mean_ap(per_class: dict[int, float | None]) -> float | None:
    defined = [v for v in per_class.values() if v is not None]
    if not defined:
        return None
    return float(sum(defined) / len(defined))


def evaluate_detections(dets: list[Detection], gts: dict[str, list[BBox]],
                        n_classes: int, iou_thresh: float = 0.5,
                        n_points: int = 101) -> dict:
    """Per-class and per-scale AP report (the shared evaluation summary)."""
    report: dict = {"iou_thresh": iou_thresh, "n_points": n_points}
    by_scale = {}
    for name, area_range in AREA_RANGES.items():
        per_class = {
            c: average_precision(dets, gts, c, iou_thresh, area_range, n_points)
            for c in range(n_classes)
        }
        by_scale[name] = {
            "per_class": {str(c): per_class[c] for c in range(n_classes)},
            "map": mean_ap(per_class),
        }
    report["map50"] = by_scale["all"]["map"]
    report["per_class"] = by_scale["all"]["per_class"]
    report["ap_small"] = by_scale["small"]["map"]
    report["ap_medium"] = by_scale["medium"]["map"]
    report["ap_large"] = by_scale["large"]["map"]
    report["n_gts"] = {
        name: sum(
            1
            for boxes in gts.values()
            for g in boxes
            if _in_range(g.area, area_range)
        )
        for name, area_range in AREA_RANGES.items()
    }
    return report


# --------------------------------------------------------------------------
# cost accounting
# --------------------------------------------------------------------------

@dataclass
class CostReport:
    params_total: int
    flops_total: int
    per_layer: dict[str, dict[str, int]] = field(default_factory=dict)
    input_size: int | None = None
    note: str = "flops = 2 * MACs, convs only; norm/activation ignored"

    def to_json_dict(self) -> dict:
        return {
            "params_total": self.params_total,
            "flops_total": self.flops_total,
            "per_layer": self.per_layer,
            "input_size": self.input_size,
            "note": self.note,
        }


def _node_params(node) -> int:
    if node.kind in ("conv", "head"):
        p = node.out_channels * node.in_channels * node.kernel_size**2
        if node.bias:
            p += node.out_channels
        return p
    if node.kind == "norm":
        return 2 * node.out_channels
    if node.kind in ("activation", "add", "concat"):
        return 0
    raise GraphError(f"unknown node kind {node.kind!r}")


def count_params(graph: ModelGraph) -> int:
    return sum(_node_params(n) for n in graph.nodes)


def count_flops(graph: ModelGraph, input_size: int) -> int:
    sizes = graph.spatial_sizes((input_size, input_size))
    total = 0
    for n in graph.nodes:
        if n.kind in ("conv", "head"):
            h, w = sizes[n.id]
            total += 2 * n.out_channels * n.in_channels * n.kernel_size**2 * h * w
        elif n.kind not in ("norm", "activation", "add", "concat"):
            raise GraphError(f"unknown node kind {n.kind!r}")
    return total


def cost_report(graph: ModelGraph, input_size: int) -> CostReport:
    sizes = graph.spatial_sizes((input_size, input_size))
    per_layer: dict[str, dict[str, int]] = {}
    for n in graph.nodes:
        params = _node_params(n)
        flops = 0
        if n.kind in ("conv", "head"):
            h, w = sizes[n.id]
            flops = 2 * n.out_channels * n.in_channels * n.kernel_size**2 * h * w
        if params or flops:
            per_layer[n.id] = {"params": params, "flops": flops}
    return CostReport(
        params_total=sum(v["params"] for v in per_layer.values()),
        flops_total=sum(v["flops"] for v in per_layer.values()),
        per_layer=per_layer,
        input_size=input_size,
    )


# --------------------------------------------------------------------------
# report table
# --------------------------------------------------------------------------

def _pct(v: float | None) -> str:
    return "-" if v is None else f"{100.0 * v:.1f}"


def format_results_table(rows: list[dict]) -> str:
    """Text table in the usual pruning-results column layout.

    Each row: {"method", "rate", "flops", "params", "ap_small", "ap_medium",
    "ap_large", "map50"}.
    """
    header = ["Method", "Rate", "Flops (M)", "Params (K)", "AP-s (%)", "AP-m (%)",
              "AP-l (%)", "mAP (%)"]
    table = [header]
    for r in rows:
        table.append([
            str(r.get("method", "-")),
            f"{r.get('rate', 0.0):.1f}",
            f"{r['flops'] / 1e6:.2f}" if r.get("flops") is not None else "-",
            f"{r['params'] / 1e3:.2f}" if r.get("params") is not None else "-",
            _pct(r.get("ap_small")),
            _pct(r.get("ap_medium")),
            _pct(r.get("ap_large")),
            _pct(r.get("map50")),
        ])
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = []
    for idx, row in enumerate(table):
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(row, widths)))
        if idx == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
