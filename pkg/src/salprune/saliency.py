"""Gradient-based channel saliency and channel importance scoring.

Per channel, saliency is the reweighted sum of positive detection-loss
gradients over its feature map. Importance is the sum, over the relaxed box
region, of min-max-normalized positive saliency-weighted activations. Tables
are averaged over a class-balanced sample set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import DetectionSample
from .detector import ToyDetector, forward_with_taps
from .errors import ConfigurationError, SaliencyError
from .graph import ModelGraph
from .reweight import DecaySpec, ReweightMask, build_reweight_mask, uniform_mask

IMPORTANCE_EXTENTS = ("region", "full")


@dataclass(frozen=True)
class SaliencyConfig:
    use_boxes: bool = True          # False: uniform weighting, gradient signal only
    margin_ratio: float = 0.25      # 0: boxes only, no surrounding-context ring
    decay: DecaySpec = field(default_factory=DecaySpec)
    importance_extent: str = "region"
    lambda_cls: float = 1.0
    lambda_box: float = 5.0

    def __post_init__(self) -> None:
        if self.importance_extent not in IMPORTANCE_EXTENTS:
            raise ConfigurationError(
                f"importance_extent must be one of {IMPORTANCE_EXTENTS}"
            )


@dataclass
class ImportanceTable:
    layer: str
    scores: np.ndarray  # per-channel, float64, >= 0
    n_samples: int = 1


def channel_saliency(grad_map: np.ndarray, mask: ReweightMask) -> float:
    """Sum of beta-weighted positive gradients over one channel's map."""
    grad = np.asarray(grad_map, dtype=np.float64)
    if grad.shape != mask.beta.shape:
        raise ValueError(f"grad map {grad.shape} vs mask {mask.beta.shape}")
    return float(np.sum(mask.beta * np.maximum(grad, 0.0)))


def channel_importance(w: float, act_map: np.ndarray, region: np.ndarray) -> float:
    """Min-max-normalized positive response summed over the region cells.

    A constant response over the region (including w = 0) carries no signal and
    scores 0; an empty region scores 0 as well.
    """
    if w < 0:
        raise ValueError(f"saliency weight must be >= 0, got {w}")
    act = np.asarray(act_map, dtype=np.float64)
    vals = np.maximum(w * act[np.asarray(region, dtype=bool)], 0.0)
    if vals.size == 0:
        return 0.0
    lo, hi = float(vals.min()), float(vals.max())
    if hi <= lo:
        return 0.0
    return float(np.sum((vals - lo) / (hi - lo)))


def _layer_scores(activation: np.ndarray, gradient: np.ndarray, mask: ReweightMask,
                  extent: str) -> np.ndarray:
    """Per-channel importance for one tap of one sample (CxHxW inputs)."""
    c = activation.shape[0]
    beta = mask.beta
    region = mask.region if extent == "region" else np.ones_like(mask.region)
    scores = np.empty(c, dtype=np.float64)
    for k in range(c):
        w = float(np.sum(beta * np.maximum(gradient[k], 0.0)))
        scores[k] = channel_importance(w, activation[k], region)
    return scores


def compute_importance(model: ToyDetector, samples: list[DetectionSample],
                       tap_ids: list[str] | None = None,
                       config: SaliencyConfig | None = None,
                       ) -> dict[str, ImportanceTable]:
    """Average per-channel importance over the samples that carry boxes.

    Returns one table per producing conv (keyed by the conv node id), which is
    the unit the pruner consumes. Box-free samples contribute no signal and are
    skipped; if every sample is box-free there is nothing to measure.
    """
    if not samples:
        raise SaliencyError("sample set is empty")
    config = config or SaliencyConfig()
    graph = model.graph
    tap_ids = list(tap_ids) if tap_ids is not None else graph.default_tap_nodes()
    strides = graph.cumulative_strides()
    conv_for_tap = {tid: graph.producing_conv(tid).id for tid in tap_ids}

    per_sample: dict[str, list[np.ndarray]] = {cid: [] for cid in conv_for_tap.values()}
    used = 0
    skipped = 0
    for sample in samples:
        if not sample.boxes:
            skipped += 1
            continue
        _, taps, _ = forward_with_taps(
            model, sample, tap_ids,
            lambda_cls=config.lambda_cls, lambda_box=config.lambda_box,
        )
        mask_cache: dict[tuple[int, int, int], ReweightMask] = {}
        for tid, tap in taps.items():
            act = tap.activation.double().numpy()
            grad = tap.gradient.double().numpy()
            h, w = act.shape[1:]
            key = (h, w, strides[tid])
            if key not in mask_cache:
                if config.use_boxes:
                    mask_cache[key] = build_reweight_mask(
                        sample.boxes, h, w, strides[tid],
                        margin_ratio=config.margin_ratio, decay=config.decay,
                    )
                else:
                    mask_cache[key] = uniform_mask(h, w, strides[tid])
            per_sample[conv_for_tap[tid]].append(
                _layer_scores(act, grad, mask_cache[key], config.importance_extent)
            )
        used += 1

    if used == 0:
        raise SaliencyError(
            f"all {skipped} samples are box-free; saliency needs annotated samples"
        )

    tables: dict[str, ImportanceTable] = {}
    for cid, vectors in per_sample.items():
        stacked = np.stack(vectors)  # used x C
        # fixed sample order with compensated per-channel accumulation
        avg = np.array(
            [math.fsum(stacked[:, k]) / used for k in range(stacked.shape[1])]
        )
        tables[cid] = ImportanceTable(layer=cid, scores=avg, n_samples=used)
    return tables


# --------------------------------------------------------------------------
# serialization: the table schema shared by every criterion
# --------------------------------------------------------------------------

def tables_to_json_dict(tables: dict[str, ImportanceTable], meta: dict | None = None) -> dict:
    return {
        "meta": meta or {},
        "tables": {
            layer: {str(k): float(v) for k, v in enumerate(t.scores)}
            for layer, t in tables.items()
        },
        "n_samples": {layer: t.n_samples for layer, t in tables.items()},
    }


def tables_from_json_dict(data: dict) -> dict[str, ImportanceTable]:
    tables = {}
    for layer, scores in data["tables"].items():
        width = len(scores)
        arr = np.zeros(width, dtype=np.float64)
        for k, v in scores.items():
            arr[int(k)] = v
        tables[layer] = ImportanceTable(
            layer=layer, scores=arr, n_samples=data.get("n_samples", {}).get(layer, 1)
        )
    return tables


def validate_tables(tables: dict[str, ImportanceTable], graph: ModelGraph) -> None:
    for layer, t in tables.items():
        node = graph.node(layer)
        if len(t.scores) != node.out_channels:
            raise SaliencyError(
                f"table for {layer!r} has {len(t.scores)} scores, layer width is "
                f"{node.out_channels}"
            )
        if not np.all(np.isfinite(t.scores)) or np.any(t.scores < 0):
            raise SaliencyError(f"table for {layer!r} has invalid scores")
