"""Training, evaluation, and the end-to-end prune/fine-tune pipeline."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch

from . import baselines, metrics, saliency
from .baselines import CriterionSpec
from .config import RunConfig
from .data import DetectionSample, load_annotations, load_split, select_class_balanced
from .detector import (
    ToyDetector,
    assign_targets,
    build_toy_detector,
    decode_predictions,
    detection_loss,
    load_checkpoint,
    save_checkpoint,
)
from .errors import ConfigurationError, TrainingError
from .graph import ModelGraph
from .metrics import cost_report
from .pruner import apply_plan, build_groups, make_plan
from .reweight import DecaySpec
from .saliency import SaliencyConfig, compute_importance, tables_to_json_dict


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    if total_epochs <= 1:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _stack_images(samples: list[DetectionSample]) -> torch.Tensor:
    arr = np.stack([s.image.transpose(2, 0, 1) for s in samples])
    return torch.from_numpy(np.ascontiguousarray(arr))


def train_detector(model: ToyDetector, samples: list[DetectionSample], *,
                   epochs: int, batch_size: int = 8, lr: float = 0.01,
                   momentum: float = 0.9, weight_decay: float = 5e-4, seed: int = 0,
                   lambda_cls: float = 1.0, lambda_box: float = 5.0,
                   log=None) -> list[dict]:
    """SGD with a cosine schedule; aborts with diagnostics if the loss diverges."""
    if epochs < 0:
        raise ConfigurationError(f"epochs must be >= 0, got {epochs}")
    if epochs == 0:
        return []
    torch.manual_seed(seed)
    graph = model.graph
    h, w = samples[0].image.shape[:2]
    sizes = graph.spatial_sizes((h, w))
    geoms = {s: sizes[nid] for s, nid in model.head_ids.items()}
    cached_targets = [assign_targets(s.boxes, geoms)[0] for s in samples]
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=momentum,
                          weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    history = []
    model.train()
    for epoch in range(epochs):
        for group in opt.param_groups:
            group["lr"] = cosine_lr(lr, epoch, epochs)
        epoch_loss, n_steps = 0.0, 0
        for idxs in _batches(len(samples), batch_size, rng):
            batch = [samples[i] for i in idxs]
            x = _stack_images(batch)
            pred = model(x)
            loss = detection_loss(pred, [cached_targets[i] for i in idxs],
                                  lambda_cls, lambda_box)
            if not torch.isfinite(loss.total):
                raise TrainingError(
                    f"loss diverged at epoch {epoch} step {n_steps}: {loss.item()}"
                )
            opt.zero_grad()
            loss.total.backward()
            opt.step()
            epoch_loss += float(loss.total.detach())
            n_steps += 1
        entry = {"epoch": epoch, "loss": epoch_loss / max(n_steps, 1),
                 "lr": cosine_lr(lr, epoch, epochs)}
        history.append(entry)
        if log:
            log(f"epoch {epoch + 1}/{epochs}  loss {entry['loss']:.4f}")
    model.eval()
    return history


@torch.no_grad()
def evaluate_detector(model: ToyDetector, graph: ModelGraph,
                      samples: list[DetectionSample], n_classes: int, *,
                      conf_thresh: float = 0.25, nms_iou: float = 0.45,
                      iou_thresh: float = 0.5, n_points: int = 101,
                      batch_size: int = 16) -> tuple[dict, list[metrics.Detection]]:
    """Evaluation report (AP by class and scale, plus cost) and raw detections."""
    model.eval()
    image_size = samples[0].image.shape[0]
    detections: list[metrics.Detection] = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start : start + batch_size]
        pred = model(_stack_images(batch))
        decoded = decode_predictions(
            pred, image_size, conf_thresh=conf_thresh, nms_iou=nms_iou,
            sample_ids=[s.sample_id for s in batch],
        )
        for dets in decoded:
            detections.extend(dets)
    gts = {s.sample_id: s.boxes for s in samples}
    report = metrics.evaluate_detections(detections, gts, n_classes,
                                         iou_thresh=iou_thresh, n_points=n_points)
    report["n_images"] = len(samples)
    report["cost"] = cost_report(graph, image_size).to_json_dict()
    return report, detections


def write_eval_artifacts(out_dir: Path, name: str, report: dict,
                         detections: list[metrics.Detection], rate: float = 0.0,
                         method: str = "-") -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{name}_report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True)
    )
    (out_dir / f"{name}_detections.json").write_text(
        json.dumps([d.as_json_dict() for d in detections], sort_keys=True)
    )
    row = report_row(report, method=method, rate=rate)
    (out_dir / f"{name}_table.txt").write_text(metrics.format_results_table([row]) + "\n")


def report_row(report: dict, method: str = "-", rate: float = 0.0) -> dict:
    return {
        "method": method,
        "rate": rate,
        "flops": report["cost"]["flops_total"],
        "params": report["cost"]["params_total"],
        "ap_small": report["ap_small"],
        "ap_medium": report["ap_medium"],
        "ap_large": report["ap_large"],
        "map50": report["map50"],
    }


# --------------------------------------------------------------------------
# importance criterion dispatch
# --------------------------------------------------------------------------

def saliency_config_from(cfg: RunConfig) -> SaliencyConfig:
    return SaliencyConfig(
        use_boxes=cfg.use_boxes,
        margin_ratio=cfg.margin_ratio,
        decay=DecaySpec(kind=cfg.decay_kind, s=cfg.decay_s),
        importance_extent=cfg.importance_extent,
        lambda_cls=cfg.lambda_cls,
        lambda_box=cfg.lambda_box,
    )


def balanced_sample_set(cfg: RunConfig) -> list[DetectionSample]:
    ann = load_annotations(cfg.data_root, cfg.train_split)
    ids = select_class_balanced(ann, cfg.n_samples, seed=cfg.seed)
    return load_split(cfg.data_root, cfg.train_split, sample_ids=ids)


def compute_tables(criterion: CriterionSpec, model: ToyDetector, graph: ModelGraph,
                   cfg: RunConfig, samples: list[DetectionSample] | None = None):
    """Importance tables plus serializable metadata, per the shared schema."""
    if criterion.kind == "saliency":
        samples = samples if samples is not None else balanced_sample_set(cfg)
        tables = compute_importance(model, samples, tap_ids=cfg.taps,
                                    config=saliency_config_from(cfg))
    elif criterion.kind == "l1":
        tables = baselines.l1_tables(model, graph)
    elif criterion.kind == "random":
        tables = baselines.random_tables(graph, seed=criterion.seed)
    else:  # pragma: no cover - CriterionSpec validates
        raise ConfigurationError(f"unknown criterion {criterion.kind!r}")
    meta = {
        "criterion": criterion.kind,
        "seed": criterion.seed,
        "n_samples": cfg.n_samples,
        "margin_ratio": cfg.margin_ratio,
        "decay": {"kind": cfg.decay_kind, "s": cfg.decay_s},
        "use_boxes": cfg.use_boxes,
        "importance_extent": cfg.importance_extent,
    }
    return tables, meta


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

def train_baseline(cfg: RunConfig, out_dir: Path, log=None) -> tuple[ToyDetector, ModelGraph, dict]:
    train_samples = load_split(cfg.data_root, cfg.train_split)
    val_samples = load_split(cfg.data_root, cfg.val_split)
    model, graph = build_toy_detector(cfg.n_classes, cfg.width, seed=cfg.seed)
    history = train_detector(
        model, train_samples, epochs=cfg.epochs, batch_size=cfg.batch_size,
        lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
        seed=cfg.seed, lambda_cls=cfg.lambda_cls, lambda_box=cfg.lambda_box, log=log,
    )
    report, detections = evaluate_detector(
        model, graph, val_samples, cfg.n_classes,
        conf_thresh=cfg.conf_thresh, nms_iou=cfg.nms_iou,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "baseline.pt", model,
                    meta={"config": cfg.to_json_dict(), "history": history})
    write_eval_artifacts(out_dir, "baseline", report, detections, rate=0.0,
                         method="baseline")
    return model, graph, report


def run_pipeline(cfg: RunConfig, out_dir: Path, baseline_ckpt: str | Path | None = None,
                 log=None) -> dict:
    """select samples -> importance -> plan -> prune -> fine-tune -> evaluate."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.json")

    if baseline_ckpt is not None:
        model, graph, _ = load_checkpoint(baseline_ckpt)
    else:
        model, graph, _ = train_baseline(cfg, out_dir, log=log)

    criterion = CriterionSpec(kind=cfg.criterion, seed=cfg.seed)
    samples = balanced_sample_set(cfg) if cfg.criterion == "saliency" else None
    tables, meta = compute_tables(criterion, model, graph, cfg, samples=samples)
    (out_dir / "importance.json").write_text(
        json.dumps(tables_to_json_dict(tables, meta), indent=2, sort_keys=True)
    )

    groups = build_groups(graph)
    plan = make_plan(tables, groups, cfg.rate, graph, input_size=cfg.image_size,
                     meta={"criterion": cfg.criterion, "fingerprint": cfg.fingerprint()})
    plan.save(out_dir / "plan.json")

    pruned, pruned_graph = apply_plan(model, graph, plan)
    train_samples = load_split(cfg.data_root, cfg.train_split)
    train_detector(
        pruned, train_samples, epochs=cfg.finetune_epochs, batch_size=cfg.batch_size,
        lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
        seed=cfg.seed, lambda_cls=cfg.lambda_cls, lambda_box=cfg.lambda_box, log=log,
    )
    save_checkpoint(out_dir / "pruned.pt", pruned,
                    meta={"config": cfg.to_json_dict(), "plan": plan.to_json_dict()})

    val_samples = load_split(cfg.data_root, cfg.val_split)
    report, detections = evaluate_detector(
        pruned, pruned_graph, val_samples, cfg.n_classes,
        conf_thresh=cfg.conf_thresh, nms_iou=cfg.nms_iou,
    )
    write_eval_artifacts(out_dir, "eval", report, detections, rate=cfg.rate,
                         method=cfg.criterion)

    summary = {
        "fingerprint": cfg.fingerprint(),
        "config": cfg.to_json_dict(),
        "plan": plan.to_json_dict(),
        "eval": report,
    }
    (out_dir / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary
