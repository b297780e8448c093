"""Spatial reweighting masks built from ground-truth boxes.

A mask assigns every feature-map cell a coefficient in [0, 1]: 1 inside any
box, a decaying value in a margin ring around it, and 0 elsewhere. Masks from
several boxes combine by pointwise maximum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import BBox
from .errors import ConfigurationError

DECAY_KINDS = ("power", "exponential", "flat_top_gaussian", "none")

# short CLI aliases
DECAY_ALIASES = {"power": "power", "exp": "exponential", "ftg": "flat_top_gaussian",
                 "none": "none"}


@dataclass(frozen=True)
class DecaySpec:
    """Ring weighting profile.

    ``s`` is the power-law exponent. ``tau_scale`` and ``sigma_scale`` size the
    exponential / flat-top profiles as multiples of the box's edge radius, so
    rings shrink and grow with their boxes.
    """

    kind: str = "power"
    s: float = 1.0
    tau_scale: float = 1.0
    sigma_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in DECAY_KINDS:
            raise ConfigurationError(f"unknown decay kind {self.kind!r}")
        if self.s <= 0 or self.tau_scale <= 0 or self.sigma_scale <= 0:
            raise ConfigurationError("decay shape parameters must be positive")


@dataclass
class ReweightMask:
    beta: np.ndarray                 # HxW float64 in [0, 1]
    region: np.ndarray               # HxW bool: union of boxes plus margins
    empty: bool = False
    node_id: str | None = None
    stride: int = 1


def decay_power(sq_dist: float, a: float, s: float) -> float:
    """min(1, a * sq_dist^-s); the profile is singular at zero distance."""
    if sq_dist <= 0.0:
        raise ValueError("power decay undefined at zero squared distance")
    return min(1.0, a * sq_dist ** (-s))


def decay_exponential(r: float, r0: float, tau: float) -> float:
    return min(1.0, math.exp(-(r - r0) / tau))


def decay_flat_top_gaussian(r: float, r0: float, sigma: float) -> float:
    if r <= r0:
        return 1.0
    return math.exp(-((r - r0) ** 2) / (2.0 * sigma**2))


def ring_coefficient(sq_dist: float, edge_radius: float, spec: DecaySpec) -> float:
    """Coefficient for a ring cell at squared distance ``sq_dist`` from the box
    center, continuous (= 1) where the ring meets the nearest box edge midpoint."""
    if spec.kind == "none":
        return 1.0
    if spec.kind == "power":
        a = (edge_radius**2) ** spec.s
        return decay_power(sq_dist, a, spec.s)
    r = math.sqrt(sq_dist)
    if spec.kind == "exponential":
        return decay_exponential(r, edge_radius, spec.tau_scale * edge_radius)
    return decay_flat_top_gaussian(r, edge_radius, spec.sigma_scale * edge_radius)


def _feature_box(box: BBox, stride: int, fh: int, fw: int) -> tuple[int, int, int, int]:
    """Outward-rounded cell-index bounds so no ground-truth pixel is dropped."""
    fx0 = max(0, min(fw - 1, math.floor(box.x_min / stride)))
    fy0 = max(0, min(fh - 1, math.floor(box.y_min / stride)))
    fx1 = max(fx0 + 1, min(fw, math.ceil(box.x_max / stride)))
    fy1 = max(fy0 + 1, min(fh, math.ceil(box.y_max / stride)))
    return fx0, fy0, fx1, fy1


def build_reweight_mask(boxes: list[BBox], feature_h: int, feature_w: int, stride: int,
                        margin_ratio: float = 0.25,
                        decay: DecaySpec | None = None,
                        node_id: str | None = None) -> ReweightMask:
    """Combine per-box coefficient maps by pointwise maximum."""
    if stride < 1:
        raise ConfigurationError(f"stride must be >= 1, got {stride}")
    if margin_ratio < 0:
        raise ConfigurationError(f"margin_ratio must be >= 0, got {margin_ratio}")
    decay = decay or DecaySpec()

    beta = np.zeros((feature_h, feature_w), dtype=np.float64)
    region = np.zeros((feature_h, feature_w), dtype=bool)
    if not boxes:
        return ReweightMask(beta=beta, region=region, empty=True, node_id=node_id,
                            stride=stride)

    for box in boxes:
        fx0, fy0, fx1, fy1 = _feature_box(box, stride, feature_h, feature_w)
        bw, bh = fx1 - fx0, fy1 - fy0
        mx = math.ceil(margin_ratio * bw) if margin_ratio > 0 else 0
        my = math.ceil(margin_ratio * bh) if margin_ratio > 0 else 0
        rx0, ry0 = max(0, fx0 - mx), max(0, fy0 - my)
        rx1, ry1 = min(feature_w, fx1 + mx), min(feature_h, fy1 + my)

        cx, cy = 0.5 * (fx0 + fx1), 0.5 * (fy0 + fy1)
        edge_radius = 0.5 * min(bw, bh)

        region[ry0:ry1, rx0:rx1] = True
        beta[fy0:fy1, fx0:fx1] = 1.0
        if mx == 0 and my == 0:
            continue
        for i in range(ry0, ry1):
            for j in range(rx0, rx1):
                if fy0 <= i < fy1 and fx0 <= j < fx1:
                    continue
                sq = (i + 0.5 - cy) ** 2 + (j + 0.5 - cx) ** 2
                coeff = ring_coefficient(sq, edge_radius, decay)
                if coeff > beta[i, j]:
                    beta[i, j] = coeff

    np.clip(beta, 0.0, 1.0, out=beta)
    return ReweightMask(beta=beta, region=region, empty=False, node_id=node_id,
                        stride=stride)


def uniform_mask(feature_h: int, feature_w: int, stride: int = 1,
                 node_id: str | None = None) -> ReweightMask:
    """All-ones mask with a full region: the no-box-information ablation arm."""
    return ReweightMask(
        beta=np.ones((feature_h, feature_w), dtype=np.float64),
        region=np.ones((feature_h, feature_w), dtype=bool),
        empty=False,
        node_id=node_id,
        stride=stride,
    )
