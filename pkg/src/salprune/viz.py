"""Saliency overlays and report figures.

Overlay pairs show one channel's saliency-weighted response without and with
box-aware reweighting. The reweighted overlay rescales the response inside the
relaxed box region (ring decay included) and leaves everything outside that
region exactly as in the plain overlay, so the two images differ only in and
around the boxes.
"""

from __future__ import annotations

import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .data import DetectionSample
from .detector import ToyDetector, forward_with_taps
from .errors import ConfigurationError
from .reweight import ReweightMask, build_reweight_mask
from .saliency import SaliencyConfig

OVERLAY_ALPHA = 0.55


def _minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def saliency_heat_pair(model: ToyDetector, sample: DetectionSample, layer: str,
                       channel: int, config: SaliencyConfig | None = None,
                       ) -> tuple[np.ndarray, np.ndarray, ReweightMask]:
    """(plain_heat, reweighted_heat, mask) at feature resolution for one channel."""
    config = config or SaliencyConfig()
    node = model.graph.node(layer)
    if node.kind != "activation":
        raise ConfigurationError(f"layer {layer!r} is not an activation output")
    width = node.out_channels
    if not (0 <= channel < width):
        raise ConfigurationError(f"channel {channel} out of range for width {width}")

    _, taps, _ = forward_with_taps(model, sample, [layer],
                                   lambda_cls=config.lambda_cls,
                                   lambda_box=config.lambda_box)
    tap = taps[layer]
    act = tap.activation[channel].double().numpy()
    grad = tap.gradient[channel].double().numpy()
    h, w = act.shape
    stride = model.graph.cumulative_strides()[layer]

    pos_grad = np.maximum(grad, 0.0)
    w_plain = float(pos_grad.sum())
    plain = _minmax(np.maximum(w_plain * act, 0.0))

    mask = build_reweight_mask(sample.boxes, h, w, stride,
                               margin_ratio=config.margin_ratio, decay=config.decay,
                               node_id=layer)
    if mask.empty:
        warnings.warn(f"sample {sample.sample_id!r} has no boxes; "
                      "reweighted saliency is identically zero")
        return plain, np.zeros_like(plain), mask

    w_rw = float((mask.beta * pos_grad).sum())
    reweighted = plain.copy()
    region_vals = np.maximum(w_rw * act[mask.region], 0.0) * mask.beta[mask.region]
    reweighted[mask.region] = _minmax(region_vals)
    return plain, reweighted, mask


def block_upsample(arr: np.ndarray, stride: int, size: int) -> np.ndarray:
    """Exact nearest-cell upsampling; keeps the mask support pixel-aligned."""
    up = np.repeat(np.repeat(arr, stride, axis=0), stride, axis=1)
    return up[:size, :size]


def render_overlay(image: np.ndarray, heat: np.ndarray, stride: int,
                   boxes=None, cmap: str = "jet") -> np.ndarray:
    """Blend a feature-space heat map onto the image; heat 0 leaves pixels intact."""
    size = image.shape[0]
    h_up = block_upsample(heat, stride, size)
    colors = plt.get_cmap(cmap)(h_up)[:, :, :3]
    alpha = (OVERLAY_ALPHA * h_up)[:, :, None]
    out = image * (1.0 - alpha) + colors * alpha
    out = np.clip(out, 0.0, 1.0)
    if boxes:
        for b in boxes:
            x0, y0 = int(b.x_min), int(b.y_min)
            x1, y1 = min(size - 1, int(b.x_max)), min(size - 1, int(b.y_max))
            out[y0, x0:x1 + 1] = 1.0
            out[y1, x0:x1 + 1] = 1.0
            out[y0:y1 + 1, x0] = 1.0
            out[y0:y1 + 1, x1] = 1.0
    return np.round(out * 255.0).astype(np.uint8)


def emit_overlays(model: ToyDetector, sample: DetectionSample, layer: str,
                  channels: list[int], out_dir: str | Path,
                  config: SaliencyConfig | None = None,
                  draw_boxes: bool = True) -> list[Path]:
    """One PNG per (channel, mode) pair; modes are 'plain' and 'reweighted'."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stride = model.graph.cumulative_strides()[layer]
    boxes = sample.boxes if draw_boxes else None
    paths = []
    for ch in channels:
        plain, reweighted, _ = saliency_heat_pair(model, sample, layer, ch, config)
        for mode, heat in (("plain", plain), ("reweighted", reweighted)):
            img = render_overlay(sample.image.astype(np.float64), heat, stride, boxes)
            path = out_dir / f"{sample.sample_id}_{layer}_ch{ch}_{mode}.png"
            Image.fromarray(img).save(path)
            paths.append(path)
    return paths


def mask_to_png(mask: ReweightMask, path: str | Path) -> None:
    arr = np.round(mask.beta * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


# --------------------------------------------------------------------------
# report figures
# --------------------------------------------------------------------------

def render_pr_figure(curves: dict[str, tuple[np.ndarray, np.ndarray]],
                     path: str | Path, title: str = "Precision-recall") -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, (recall, precision) in curves.items():
        if recall.size:
            ax.plot(recall, precision, label=label)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ax.set_title(title)
    if curves:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_bar_figure(labels: list[str], values: list[float], path: str | Path,
                      ylabel: str = "mAP@0.5", title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    xs = np.arange(len(labels))
    ax.bar(xs, [0.0 if v is None else v for v in values], color="#4878d0")
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_line_figure(xs: list[float], ys: list[float], path: str | Path,
                       xlabel: str = "sample-set size", ylabel: str = "mAP@0.5",
                       title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(xs, [0.0 if v is None else v for v in ys], marker="o")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
