"""Ablation studies: criterion components, ring decay profiles, sample-set size."""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

from .baselines import CriterionSpec
from .config import RunConfig
from .data import load_split
from .detector import load_checkpoint
from .errors import ConfigurationError
from .pruner import apply_plan, build_groups, make_plan
from .train import (
    compute_tables,
    evaluate_detector,
    report_row,
    train_baseline,
    train_detector,
)
from .viz import render_bar_figure, render_line_figure

STUDIES = ("components", "decay", "sample_size")

DEFAULT_SAMPLE_GRID = (8, 16, 32, 64, 128)

# Saliency measure decomposed into its ingredients: raw gradients, ground-truth
# box gating, and the decaying context ring around each box.
COMPONENT_ARMS: list[tuple[str, dict]] = [
    ("none", {}),
    ("gradients", {"use_boxes": False, "importance_extent": "full"}),
    ("gradients+boxes", {"use_boxes": True, "margin_ratio": 0.0}),
    ("gradients+boxes+context", {"use_boxes": True}),
]

DECAY_ARMS = ("none", "flat_top_gaussian", "exponential", "power")


def _arm_config(cfg: RunConfig, **overrides) -> RunConfig:
    return dataclasses.replace(cfg, **overrides)


def _prune_and_score(cfg: RunConfig, model, graph, arm_dir: Path, log=None) -> dict:
    """One pruning arm under the shared fine-tuning budget."""
    arm_dir.mkdir(parents=True, exist_ok=True)
    criterion = CriterionSpec(kind=cfg.criterion, seed=cfg.seed)
    tables, _ = compute_tables(criterion, model, graph, cfg)
    plan = make_plan(tables, build_groups(graph), cfg.rate, graph,
                     input_size=cfg.image_size)
    plan.save(arm_dir / "plan.json")
    pruned, pruned_graph = apply_plan(model, graph, plan)
    if cfg.finetune_epochs > 0:
        train_samples = load_split(cfg.data_root, cfg.train_split)
        train_detector(
            pruned, train_samples, epochs=cfg.finetune_epochs,
            batch_size=cfg.batch_size, lr=cfg.lr, momentum=cfg.momentum,
            weight_decay=cfg.weight_decay, seed=cfg.seed,
            lambda_cls=cfg.lambda_cls, lambda_box=cfg.lambda_box, log=log,
        )
    val_samples = load_split(cfg.data_root, cfg.val_split)
    report, _ = evaluate_detector(
        pruned, pruned_graph, val_samples, cfg.n_classes,
        conf_thresh=cfg.conf_thresh, nms_iou=cfg.nms_iou,
    )
    (arm_dir / "eval_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def _write_rows(out_dir: Path, rows: list[dict]) -> Path:
    csv_path = out_dir / "results.csv"
    fields = ["arm", "rate", "params", "flops", "ap_small", "ap_medium", "ap_large",
              "map50"]
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in fields})
    return csv_path


def run_study(study: str, cfg: RunConfig, out_dir: str | Path,
              baseline_ckpt: str | Path | None = None,
              sample_grid: tuple[int, ...] | None = None, log=None) -> dict:
    if study not in STUDIES:
        raise ConfigurationError(f"unknown study {study!r}; expected one of {STUDIES}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.json")

    if baseline_ckpt is not None:
        model, graph, _ = load_checkpoint(baseline_ckpt)
    else:
        model, graph, _ = train_baseline(cfg, out_dir / "baseline", log=log)

    rows: list[dict] = []
    if study == "components":
        for arm, overrides in COMPONENT_ARMS:
            if arm == "none":
                val_samples = load_split(cfg.data_root, cfg.val_split)
                report, _ = evaluate_detector(
                    model, graph, val_samples, cfg.n_classes,
                    conf_thresh=cfg.conf_thresh, nms_iou=cfg.nms_iou,
                )
                row = report_row(report, method=arm, rate=0.0)
            else:
                arm_cfg = _arm_config(cfg, criterion="saliency", **overrides)
                report = _prune_and_score(arm_cfg, model, graph, out_dir / arm, log=log)
                row = report_row(report, method=arm, rate=cfg.rate)
            row["arm"] = arm
            rows.append(row)
        plot_path = out_dir / "results.png"
        render_bar_figure([r["arm"] for r in rows], [r["map50"] for r in rows],
                          plot_path, title="saliency components")
    elif study == "decay":
        for kind in DECAY_ARMS:
            arm_cfg = _arm_config(cfg, criterion="saliency", use_boxes=True,
                                  decay_kind=kind)
            report = _prune_and_score(arm_cfg, model, graph, out_dir / kind, log=log)
            row = report_row(report, method=kind, rate=cfg.rate)
            row["arm"] = kind
            rows.append(row)
        plot_path = out_dir / "results.png"
        render_bar_figure([r["arm"] for r in rows], [r["map50"] for r in rows],
                          plot_path, title="ring decay profiles")
    else:  # sample_size
        grid = tuple(sample_grid) if sample_grid else DEFAULT_SAMPLE_GRID
        for n in grid:
            arm_cfg = _arm_config(cfg, criterion="saliency", n_samples=int(n))
            report = _prune_and_score(arm_cfg, model, graph, out_dir / f"n{n}", log=log)
            row = report_row(report, method=f"n={n}", rate=cfg.rate)
            row["arm"] = f"n={n}"
            row["n_samples"] = int(n)
            rows.append(row)
        plot_path = out_dir / "results.png"
        render_line_figure([r["n_samples"] for r in rows], [r["map50"] for r in rows],
                           plot_path, title="sample-set size sweep")

    csv_path = _write_rows(out_dir, rows)
    return {"study": study, "rows": rows, "csv": str(csv_path), "plot": str(plot_path)}
