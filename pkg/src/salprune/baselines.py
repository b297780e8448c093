"""Competing importance criteria run through the identical pruning pipeline."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError
from .graph import ModelGraph
from .saliency import ImportanceTable

CRITERIA = ("saliency", "l1", "random")


@dataclass(frozen=True)
class CriterionSpec:
    kind: str = "saliency"
    seed: int = 0  # used by the random criterion only

    def __post_init__(self) -> None:
        if self.kind not in CRITERIA:
            raise ConfigurationError(f"unknown criterion {self.kind!r}")


def l1_importance(weights: "torch.Tensor | np.ndarray", layer: str = "") -> ImportanceTable:
    """Per-filter absolute weight sum for one conv layer (Co x Ci x K x K)."""
    arr = weights.detach().cpu().numpy() if isinstance(weights, torch.Tensor) else np.asarray(weights)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite filter weights in layer {layer!r}")
    scores = np.abs(arr.reshape(arr.shape[0], -1)).sum(axis=1).astype(np.float64)
    return ImportanceTable(layer=layer, scores=scores, n_samples=1)


def random_importance(width: int, seed: int, layer: str = "") -> ImportanceTable:
    rng = np.random.default_rng(seed)
    scores = rng.uniform(1e-12, 1.0, size=width)
    return ImportanceTable(layer=layer, scores=scores, n_samples=1)


def l1_tables(model, graph: ModelGraph) -> dict[str, ImportanceTable]:
    return {
        node.id: l1_importance(model.blocks[node.id].weight, layer=node.id)
        for node in graph.nodes
        if node.kind == "conv" and node.prunable
    }


def random_tables(graph: ModelGraph, seed: int) -> dict[str, ImportanceTable]:
    tables = {}
    for idx, node in enumerate(n for n in graph.nodes if n.kind == "conv" and n.prunable):
        tables[node.id] = random_importance(
            node.out_channels, seed=int(np.random.default_rng([seed, idx]).integers(2**31)),
            layer=node.id,
        )
    return tables
