"""Small single-stage anchor-free detector with tappable feature maps.

The torch module is built from a :class:`ModelGraph`, so the pruner and cost
accounting see exactly the structure that runs. Heads predict, per cell:
an objectness logit, class logits, and box offsets (cx, cy stride-relative to
the cell corner; w, h log-scale in strides).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import BBox, DetectionSample
from .errors import ConfigurationError, GraphError
from .graph import INPUT_ID, GraphNode, ModelGraph
from .metrics import Detection, iou

BASE_WIDTHS = (8, 16, 32, 64)
HEAD_PRIOR_PROB = 0.01


# --------------------------------------------------------------------------
# topology
# --------------------------------------------------------------------------

def _scaled(base: int, multiplier: float) -> int:
    return max(1, math.ceil(base * multiplier))


def _conv_block(nodes: list[GraphNode], prefix: str, src: str, cin: int, cout: int,
                k: int, stride: int, prunable: bool = True) -> str:
    nodes.append(GraphNode(f"{prefix}_conv", "conv", [src], cin, cout, k, stride,
                           bias=False, prunable=prunable))
    nodes.append(GraphNode(f"{prefix}_norm", "norm", [f"{prefix}_conv"], cout, cout))
    nodes.append(GraphNode(f"{prefix}_act", "activation", [f"{prefix}_norm"], cout, cout))
    return f"{prefix}_act"


def toy_detector_graph(n_classes: int, width_multiplier: float = 1.0) -> ModelGraph:
    """Backbone (strides 2/4/8/16) with residual adds, a concat neck, two heads."""
    if width_multiplier <= 0:
        raise ConfigurationError(f"width_multiplier must be > 0, got {width_multiplier}")
    if n_classes < 1:
        raise ConfigurationError(f"n_classes must be >= 1, got {n_classes}")
    w0, w1, w2, w3 = (_scaled(b, width_multiplier) for b in BASE_WIDTHS)
    head_out = 5 + n_classes
    nodes: list[GraphNode] = []

    stem = _conv_block(nodes, "stem", INPUT_ID, 3, w0, 3, 2, prunable=False)
    c2 = _conv_block(nodes, "c2", stem, w0, w1, 3, 2)
    c2r = _conv_block(nodes, "c2r", c2, w1, w1, 3, 1)
    nodes.append(GraphNode("c2_add", "add", [c2, c2r], w1, w1))
    c3 = _conv_block(nodes, "c3", "c2_add", w1, w2, 3, 2)
    c3r = _conv_block(nodes, "c3r", c3, w2, w2, 3, 1)
    nodes.append(GraphNode("c3_add", "add", [c3, c3r], w2, w2))
    c4 = _conv_block(nodes, "c4", "c3_add", w2, w3, 3, 2)

    p4 = _conv_block(nodes, "p4", "c3_add", w2, w2, 3, 1)          # stride-8 neck
    p4b = _conv_block(nodes, "p4b", p4, w2, w2, 3, 1)
    p4d = _conv_block(nodes, "p4d", p4b, w2, w2, 3, 2)             # bottom-up path
    nodes.append(GraphNode("p5_cat", "concat", [c4, p4d], w3 + w2, w3 + w2))
    p5 = _conv_block(nodes, "p5", "p5_cat", w3 + w2, w3, 3, 1)     # stride-16 neck

    nodes.append(GraphNode("head8", "head", [p4b], w2, head_out, 1, 1, bias=True,
                           prunable=False))
    nodes.append(GraphNode("head16", "head", [p5], w3, head_out, 1, 1, bias=True,
                           prunable=False))

    graph = ModelGraph(nodes)
    graph.validate()
    return graph


# --------------------------------------------------------------------------
# torch module
# --------------------------------------------------------------------------

class ToyDetector(nn.Module):
    def __init__(self, graph: ModelGraph, n_classes: int):
        super().__init__()
        graph.validate()
        self.graph = graph
        self.n_classes = n_classes
        blocks: dict[str, nn.Module] = {}
        for node in graph.nodes:
            if node.kind in ("conv", "head"):
                blocks[node.id] = nn.Conv2d(
                    node.in_channels, node.out_channels, node.kernel_size,
                    stride=node.stride, padding=node.kernel_size // 2, bias=node.bias,
                )
            elif node.kind == "norm":
                blocks[node.id] = nn.BatchNorm2d(node.out_channels)
            elif node.kind == "activation":
                blocks[node.id] = nn.SiLU()
        self.blocks = nn.ModuleDict(blocks)
        strides = graph.cumulative_strides()
        self.head_ids = {strides[n.id]: n.id for n in graph.head_nodes()}

    def forward(self, x: torch.Tensor, tap_ids: list[str] | None = None,
                inject: dict | None = None):
        """Run the graph; with ``tap_ids`` also returns the live tap tensors.

        ``inject`` maps node ids to callables applied to that node's output,
        used for finite-difference probing of intermediate activations.
        """
        values: dict[str, torch.Tensor] = {INPUT_ID: x}
        taps: dict[str, torch.Tensor] = {}
        want = set(tap_ids or ())
        for node in self.graph.nodes:
            if node.kind in ("conv", "head", "norm", "activation"):
                y = self.blocks[node.id](values[node.inputs[0]])
            elif node.kind == "add":
                y = values[node.inputs[0]]
                for src in node.inputs[1:]:
                    y = y + values[src]
            elif node.kind == "concat":
                y = torch.cat([values[src] for src in node.inputs], dim=1)
            else:  # pragma: no cover - validate() forbids this
                raise GraphError(f"unknown kind {node.kind!r}")
            if inject and node.id in inject:
                y = inject[node.id](y)
            if node.id in want:
                taps[node.id] = y
            values[node.id] = y
        pred = Prediction(
            levels={s: values[nid] for s, nid in self.head_ids.items()},
            n_classes=self.n_classes,
        )
        if tap_ids is None:
            return pred
        return pred, taps


def init_weights(model: ToyDetector, seed: int = 0) -> None:
    """Deterministic init from an explicit generator, ordered by the node list."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for node in model.graph.nodes:
            if node.id not in model.blocks:
                continue
            block = model.blocks[node.id]
            if node.kind == "conv":
                fan_in = node.in_channels * node.kernel_size**2
                std = math.sqrt(2.0 / fan_in)
                block.weight.copy_(torch.randn(block.weight.shape, generator=gen) * std)
            elif node.kind == "head":
                block.weight.copy_(torch.randn(block.weight.shape, generator=gen) * 0.01)
                bias = torch.zeros(node.out_channels)
                bias[0] = -math.log((1.0 - HEAD_PRIOR_PROB) / HEAD_PRIOR_PROB)
                block.bias.copy_(bias)
            elif node.kind == "norm":
                block.weight.fill_(1.0)
                block.bias.fill_(0.0)
                block.running_mean.zero_()
                block.running_var.fill_(1.0)


def build_toy_detector(n_classes: int, width_multiplier: float = 1.0,
                       seed: int = 0) -> tuple[ToyDetector, ModelGraph]:
    graph = toy_detector_graph(n_classes, width_multiplier)
    model = ToyDetector(graph, n_classes)
    init_weights(model, seed)
    return model, graph


# --------------------------------------------------------------------------
# predictions
# --------------------------------------------------------------------------

@dataclass
class Prediction:
    """Raw head outputs per stride: B x (1 + C + 4) x H x W logits."""

    levels: dict[int, torch.Tensor]
    n_classes: int

    def split(self, stride: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        t = self.levels[stride]
        return t[:, :1], t[:, 1 : 1 + self.n_classes], t[:, 1 + self.n_classes :]

    def objectness(self, stride: int) -> torch.Tensor:
        return torch.sigmoid(self.split(stride)[0])

    def class_probs(self, stride: int) -> torch.Tensor:
        return torch.softmax(self.split(stride)[1], dim=1)

    def batch_size(self) -> int:
        return next(iter(self.levels.values())).shape[0]


def decode_predictions(pred: Prediction, image_size: int, conf_thresh: float = 0.05,
                       nms_iou: float = 0.45, max_det: int = 100,
                       sample_ids: list[str] | None = None) -> list[list[Detection]]:
    """Grid offsets -> pixel boxes, confidence threshold, then per-class NMS."""
    batch = pred.batch_size()
    ids = sample_ids or [str(i) for i in range(batch)]
    out: list[list[Detection]] = []
    for b in range(batch):
        raw: list[tuple[float, BBox]] = []
        for stride in sorted(pred.levels):
            obj, cls, box = pred.split(stride)
            obj_p = torch.sigmoid(obj[b, 0])
            cls_p = torch.softmax(cls[b], dim=0)
            best_p, best_c = cls_p.max(dim=0)
            conf = (obj_p * best_p).detach().cpu().numpy()
            keep = np.argwhere(conf >= conf_thresh)
            tcx, tcy, tw, th = (box[b, i].detach().cpu().numpy() for i in range(4))
            classes = best_c.detach().cpu().numpy()
            for gy, gx in keep:
                cx = (gx + tcx[gy, gx]) * stride
                cy = (gy + tcy[gy, gx]) * stride
                w = math.exp(min(tw[gy, gx], 8.0)) * stride
                h = math.exp(min(th[gy, gx], 8.0)) * stride
                x0 = max(0.0, min(float(cx - w / 2), image_size - 1e-3))
                y0 = max(0.0, min(float(cy - h / 2), image_size - 1e-3))
                x1 = max(x0 + 1e-3, min(float(cx + w / 2), float(image_size)))
                y1 = max(y0 + 1e-3, min(float(cy + h / 2), float(image_size)))
                raw.append((float(conf[gy, gx]),
                            BBox(x0, y0, x1, y1, int(classes[gy, gx]))))
        raw.sort(key=lambda t: -t[0])
        kept: list[tuple[float, BBox]] = []
        for conf, bx in raw:
            if any(k.class_id == bx.class_id and iou(k, bx) >= nms_iou for _, k in kept):
                continue
            kept.append((conf, bx))
            if len(kept) >= max_det:
                break
        out.append([Detection(ids[b], bx, conf) for conf, bx in kept])
    return out


# --------------------------------------------------------------------------
# target assignment
# --------------------------------------------------------------------------

@dataclass
class TargetMap:
    pos: torch.Tensor   # HxW bool
    cls: torch.Tensor   # HxW long
    box: torch.Tensor   # 4xHxW float (tcx, tcy, tw, th)


def assign_targets(boxes: list[BBox], head_geoms: dict[int, tuple[int, int]]
                   ) -> tuple[dict[int, TargetMap], int]:
    """One positive per ground truth: the center cell at the finest head stride.

    Boxes whose centers share a cell are resolved in favor of the larger box,
    then the lower class id, so the result is independent of input order.
    """
    targets = {
        s: TargetMap(
            pos=torch.zeros(h, w, dtype=torch.bool),
            cls=torch.zeros(h, w, dtype=torch.long),
            box=torch.zeros(4, h, w),
        )
        for s, (h, w) in head_geoms.items()
    }
    finest = min(head_geoms)
    h, w = head_geoms[finest]
    tmap = targets[finest]
    n_pos = 0
    order = sorted(boxes, key=lambda b: (-b.area, b.class_id, b.x_min, b.y_min))
    for b in order:
        cx, cy = b.center
        gx = min(w - 1, max(0, int(cx // finest)))
        gy = min(h - 1, max(0, int(cy // finest)))
        if tmap.pos[gy, gx]:
            continue  # cell already claimed by a larger box
        tmap.pos[gy, gx] = True
        tmap.cls[gy, gx] = b.class_id
        tmap.box[0, gy, gx] = cx / finest - gx
        tmap.box[1, gy, gx] = cy / finest - gy
        tmap.box[2, gy, gx] = math.log(max(b.width, 1e-6) / finest)
        tmap.box[3, gy, gx] = math.log(max(b.height, 1e-6) / finest)
        n_pos += 1
    return targets, n_pos


# --------------------------------------------------------------------------
# detection loss
# --------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    total: torch.Tensor
    cls: torch.Tensor
    box: torch.Tensor
    n_positives: int

    def item(self) -> dict:
        return {
            "total": float(self.total.detach()),
            "cls": float(self.cls.detach()),
            "box": float(self.box.detach()),
            "n_positives": self.n_positives,
        }


def detection_loss(pred: Prediction, targets: list[dict[int, TargetMap]] | dict,
                   lambda_cls: float = 1.0, lambda_box: float = 5.0) -> LossBreakdown:
    """Classification (objectness BCE everywhere + class CE on positives) and
    smooth-L1 box regression on positives, both normalized by the positive count."""
    if lambda_cls < 0 or lambda_box < 0:
        raise ConfigurationError("loss weights must be nonnegative")
    if isinstance(targets, dict):
        targets = [targets]
    batch = pred.batch_size()
    if len(targets) != batch:
        raise ConfigurationError(f"{len(targets)} target maps for batch of {batch}")

    ref = next(iter(pred.levels.values()))
    device, dtype = ref.device, ref.dtype
    cls_sum = torch.zeros((), device=device, dtype=dtype)
    box_sum = torch.zeros((), device=device, dtype=dtype)
    n_pos = 0
    for stride in sorted(pred.levels):
        obj, cls, box = pred.split(stride)
        pos = torch.stack([t[stride].pos for t in targets]).to(device)
        obj_target = pos.unsqueeze(1).to(dtype)
        cls_sum = cls_sum + F.binary_cross_entropy_with_logits(
            obj, obj_target, reduction="sum"
        )
        if pos.any():
            cls_t = torch.stack([t[stride].cls for t in targets]).to(device)
            box_t = torch.stack([t[stride].box for t in targets]).to(device=device,
                                                                     dtype=dtype)
            idx = pos.nonzero(as_tuple=True)  # (b, y, x)
            logits = cls[idx[0], :, idx[1], idx[2]]
            cls_sum = cls_sum + F.cross_entropy(
                logits, cls_t[idx], reduction="sum"
            )
            pred_off = box[idx[0], :, idx[1], idx[2]]
            targ_off = box_t[idx[0], :, idx[1], idx[2]]
            box_sum = box_sum + F.smooth_l1_loss(pred_off, targ_off, reduction="sum")
            n_pos += int(pos.sum())
    norm = max(n_pos, 1)
    cls_loss = cls_sum / norm
    box_loss = box_sum / norm
    total = lambda_cls * cls_loss + lambda_box * box_loss
    return LossBreakdown(total=total, cls=cls_loss, box=box_loss, n_positives=n_pos)


# --------------------------------------------------------------------------
# taps
# --------------------------------------------------------------------------

@dataclass
class FeatureTap:
    node_id: str
    activation: torch.Tensor  # C x H x W
    gradient: torch.Tensor    # C x H x W

    def __post_init__(self) -> None:
        if self.activation.shape != self.gradient.shape:
            raise ValueError("activation/gradient shape mismatch")


def sample_to_tensor(sample: DetectionSample, dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(sample.image.transpose(2, 0, 1))
                            ).to(dtype).unsqueeze(0)


def validate_tap_ids(graph: ModelGraph, tap_ids: list[str]) -> None:
    for tid in tap_ids:
        node = graph.node(tid)
        if node.kind != "activation":
            raise ConfigurationError(
                f"tap {tid!r} must be an activation output, got kind {node.kind!r}"
            )


def forward_with_taps(model: ToyDetector, sample: DetectionSample, tap_ids: list[str],
                      lambda_cls: float = 1.0, lambda_box: float = 5.0,
                      ) -> tuple[Prediction, dict[str, FeatureTap], LossBreakdown]:
    """One forward plus one detection-loss backward, capturing each tap's
    activation and gradient. Leaves model parameters' grads untouched."""
    validate_tap_ids(model.graph, tap_ids)
    was_training = model.training
    model.eval()
    try:
        x = sample_to_tensor(sample, dtype=next(model.parameters()).dtype)
        pred, live = model(x, tap_ids=tap_ids)
        h, w = sample.image.shape[:2]
        sizes = model.graph.spatial_sizes((h, w))
        geoms = {s: sizes[nid] for s, nid in model.head_ids.items()}
        targets, _ = assign_targets(sample.boxes, geoms)
        loss = detection_loss(pred, [targets], lambda_cls, lambda_box)
        grads = torch.autograd.grad(loss.total, list(live.values()), allow_unused=False)
        taps = {
            tid: FeatureTap(
                node_id=tid,
                activation=live[tid].detach()[0].clone(),
                gradient=g[0].clone(),
            )
            for (tid, _), g in zip(live.items(), grads)
        }
        return pred, taps, loss
    finally:
        model.train(was_training)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: ToyDetector, meta: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "state_dict": model.state_dict(),
            "graph": model.graph.to_json_dict(),
            "n_classes": model.n_classes,
            "meta": meta or {},
        },
        path,
    )
    # sidecar JSON export: the structural contract consumed by other tools
    model.graph.save_json(path.with_suffix(".graph.json"))


def load_checkpoint(path: str | Path) -> tuple[ToyDetector, ModelGraph, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    graph = ModelGraph.from_json_dict(blob["graph"])
    model = ToyDetector(graph, blob["n_classes"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, graph, blob.get("meta", {})
