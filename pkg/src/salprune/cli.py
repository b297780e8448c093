"""Command-line pipeline: data generation through pruning, ablation, and viz."""

from __future__ import annotations

import json
import os
from pathlib import Path

import click

from . import ablate as ablate_mod
from . import data as data_mod
from .baselines import CriterionSpec
from .config import RunConfig
from .detector import load_checkpoint, save_checkpoint
from .errors import SalpruneError
from .pruner import apply_plan, build_groups, make_plan
from .reweight import DECAY_ALIASES
from .saliency import tables_from_json_dict, tables_to_json_dict
from .train import (
    compute_tables,
    evaluate_detector,
    run_pipeline,
    saliency_config_from,
    train_baseline,
    train_detector,
    write_eval_artifacts,
)
from .viz import emit_overlays, render_pr_figure

DECAY_CHOICES = tuple(DECAY_ALIASES)


def resolve_out_dir(out: str | None, name: str) -> Path:
    """Explicit --out wins; otherwise a fresh versioned directory under the
    output root ($SALPRUNE_OUT or ./runs), so re-runs never clobber artifacts."""
    if out:
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        return path
    root = Path(os.environ.get("SALPRUNE_OUT", "runs"))
    root.mkdir(parents=True, exist_ok=True)
    n = 1
    while (root / f"{name}-{n:03d}").exists():
        n += 1
    path = root / f"{name}-{n:03d}"
    path.mkdir(parents=True)
    return path


def _parse_size_mix(text: str | None) -> dict[str, float] | None:
    if not text:
        return None
    mix = {}
    for part in text.split(","):
        key, _, value = part.partition("=")
        mix[key.strip()] = float(value)
    return mix


def _parse_channels(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p.strip()]


def config_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True),
                     default=None, help="JSON config; flags override its keys."),
        click.option("--data", "data_root", default=None, help="Dataset root."),
        click.option("--train-split", default=None),
        click.option("--val-split", default=None),
        click.option("--image-size", type=int, default=None),
        click.option("--n-classes", type=int, default=None),
        click.option("--width", type=float, default=None),
        click.option("--seed", type=int, default=None),
        click.option("--criterion", type=click.Choice(["saliency", "l1", "random"]),
                     default=None),
        click.option("--n-samples", type=int, default=None,
                     help="Class-balanced sample-set size for saliency."),
        click.option("--margin", "margin_ratio", type=float, default=None),
        click.option("--decay", "decay_alias", type=click.Choice(DECAY_CHOICES),
                     default=None),
        click.option("--decay-s", "decay_s", type=float, default=None),
        click.option("--importance-extent", type=click.Choice(["region", "full"]),
                     default=None),
        click.option("--rate", type=float, default=None),
        click.option("--epochs", type=int, default=None),
        click.option("--finetune-epochs", type=int, default=None),
        click.option("--batch-size", type=int, default=None),
        click.option("--lr", type=float, default=None),
        click.option("--conf-thresh", type=float, default=None),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def build_config(config_path, decay_alias=None, **kwargs) -> RunConfig:
    if decay_alias is not None:
        kwargs["decay_kind"] = DECAY_ALIASES[decay_alias]
    return RunConfig.from_file(config_path, **kwargs)


@click.group()
def main():
    """Saliency-guided channel pruning for small visual detectors."""


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

@main.group("data")
def data_group():
    """Synthetic dataset generation and sample selection."""


@data_group.command("gen")
@click.option("--out", required=True, help="Dataset root directory.")
@click.option("--n-train", type=int, default=200, show_default=True)
@click.option("--n-val", type=int, default=60, show_default=True)
@click.option("--image-size", type=int, default=128, show_default=True)
@click.option("--n-classes", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--size-mix", default=None,
              help='Fractions like "small=0.3,medium=0.4,large=0.3".')
def data_gen(out, n_train, n_val, image_size, n_classes, seed, size_mix):
    """Generate train and val splits of colored shapes on cluttered backgrounds."""
    mix = _parse_size_mix(size_mix)
    for split, n, s in (("train", n_train, seed), ("val", n_val, seed + 1)):
        manifest = data_mod.generate_shapes_dataset(
            out, split, n, image_size=image_size, n_classes=n_classes, seed=s,
            size_mix=mix,
        )
        click.echo(f"{split}: {manifest.n_images} images, "
                   f"instances per class {manifest.class_counts}")


@data_group.command("balance")
@click.option("--data", "data_root", required=True)
@click.option("--split", default="train", show_default=True)
@click.option("--n", "n_samples", type=int, default=50, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", default=None, help="Where to write the selection JSON.")
def data_balance(data_root, split, n_samples, seed, out):
    """Pick a class-balanced sample set and report its per-class counts."""
    ann = data_mod.load_annotations(data_root, split)
    ids = data_mod.select_class_balanced(ann, n_samples, seed=seed)
    counts = data_mod.class_counts_for(ann, ids)
    payload = {"split": split, "n": n_samples, "seed": seed, "sample_ids": ids,
               "class_counts": {str(k): v for k, v in sorted(counts.items())}}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
        click.echo(f"wrote {out}")
    else:
        click.echo(text)


# --------------------------------------------------------------------------
# training / evaluation
# --------------------------------------------------------------------------

@main.command()
@config_options
@click.option("--out", default=None)
def train(config_path, out, decay_alias, **kwargs):
    """Train the toy baseline detector and evaluate it on the val split."""
    cfg = build_config(config_path, decay_alias, **kwargs)
    out_dir = resolve_out_dir(out, "train")
    cfg.save(out_dir / "config.json")
    _, _, report = train_baseline(cfg, out_dir, log=click.echo)
    click.echo(f"baseline mAP@0.5: {report['map50']}")
    click.echo(f"artifacts in {out_dir}")


@main.command("eval")
@config_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--split", default=None, help="Split to evaluate (default: val).")
@click.option("--out", default=None)
def eval_cmd(config_path, checkpoint, split, out, decay_alias, **kwargs):
    """Evaluate a checkpoint: report JSON, text table, and PR-curve figure."""
    cfg = build_config(config_path, decay_alias, **kwargs)
    out_dir = resolve_out_dir(out, "eval")
    model, graph, _ = load_checkpoint(checkpoint)
    samples = data_mod.load_split(cfg.data_root, split or cfg.val_split)
    report, detections = evaluate_detector(
        model, graph, samples, cfg.n_classes,
        conf_thresh=cfg.conf_thresh, nms_iou=cfg.nms_iou,
    )
    write_eval_artifacts(out_dir, "eval", report, detections)
    from . import metrics as metrics_mod

    gts = {s.sample_id: s.boxes for s in samples}
    curves = {}
    for c in range(cfg.n_classes):
        recall, precision, _ = metrics_mod.precision_recall(detections, gts, c)
        curves[f"class {c}"] = (recall, precision)
    render_pr_figure(curves, out_dir / "pr_curves.png")
    click.echo((out_dir / "eval_table.txt").read_text())
    click.echo(f"artifacts in {out_dir}")


@main.command()
@config_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--out", default=None)
def finetune(config_path, checkpoint, out, decay_alias, **kwargs):
    """Fine-tune a (typically pruned) checkpoint on the train split."""
    cfg = build_config(config_path, decay_alias, **kwargs)
    out_dir = resolve_out_dir(out, "finetune")
    model, graph, meta = load_checkpoint(checkpoint)
    samples = data_mod.load_split(cfg.data_root, cfg.train_split)
    train_detector(
        model, samples, epochs=cfg.finetune_epochs, batch_size=cfg.batch_size,
        lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
        seed=cfg.seed, lambda_cls=cfg.lambda_cls, lambda_box=cfg.lambda_box,
        log=click.echo,
    )
    save_checkpoint(out_dir / "finetuned.pt", model, meta=meta)
    click.echo(f"wrote {out_dir / 'finetuned.pt'}")


# --------------------------------------------------------------------------
# importance / pruning
# --------------------------------------------------------------------------

@main.command()
@config_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--out", default=None)
def importance(config_path, checkpoint, out, decay_alias, **kwargs):
    """Emit per-channel importance tables for the chosen criterion."""
    cfg = build_config(config_path, decay_alias, **kwargs)
    out_dir = resolve_out_dir(out, "importance")
    model, graph, _ = load_checkpoint(checkpoint)
    criterion = CriterionSpec(kind=cfg.criterion, seed=cfg.seed)
    tables, meta = compute_tables(criterion, model, graph, cfg)
    path = out_dir / "importance.json"
    path.write_text(json.dumps(tables_to_json_dict(tables, meta), indent=2,
                               sort_keys=True))
    click.echo(f"wrote {path}")


@main.command()
@config_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--importance", "importance_path", required=True,
              type=click.Path(exists=True))
@click.option("--plan-out", default=None, help="Where to write the plan JSON.")
@click.option("--out", default=None)
def prune(config_path, checkpoint, importance_path, plan_out, out, decay_alias,
          **kwargs):
    """Build a pruning plan from importance tables and apply it."""
    cfg = build_config(config_path, decay_alias, **kwargs)
    out_dir = resolve_out_dir(out, "prune")
    model, graph, _ = load_checkpoint(checkpoint)
    tables = tables_from_json_dict(json.loads(Path(importance_path).read_text()))
    plan = make_plan(tables, build_groups(graph), cfg.rate, graph,
                     input_size=cfg.image_size,
                     meta={"criterion": cfg.criterion, "fingerprint": cfg.fingerprint()})
    plan_path = Path(plan_out) if plan_out else out_dir / "plan.json"
    plan_path.parent.mkdir(parents=True, exist_ok=True)
    plan.save(plan_path)
    pruned, _ = apply_plan(model, graph, plan)
    save_checkpoint(out_dir / "pruned.pt", pruned,
                    meta={"plan": plan.to_json_dict()})
    click.echo(f"params {plan.params_before} -> {plan.params_after}, "
               f"flops {plan.flops_before} -> {plan.flops_after}")
    click.echo(f"wrote {plan_path} and {out_dir / 'pruned.pt'}")


@main.command()
@config_options
@click.option("--baseline-ckpt", default=None, type=click.Path(exists=True),
              help="Reuse a trained baseline instead of training one.")
@click.option("--out", default=None)
def pipeline(config_path, baseline_ckpt, out, decay_alias, **kwargs):
    """Full chain: baseline -> importance -> prune -> fine-tune -> evaluate."""
    cfg = build_config(config_path, decay_alias, **kwargs)
    out_dir = resolve_out_dir(out, "pipeline")
    run_pipeline(cfg, out_dir, baseline_ckpt=baseline_ckpt, log=click.echo)
    click.echo((out_dir / "eval_table.txt").read_text())
    click.echo(f"artifacts in {out_dir}")


# --------------------------------------------------------------------------
# viz / ablate
# --------------------------------------------------------------------------

@main.command()
@config_options
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--sample", "sample_id", required=True)
@click.option("--split", default=None)
@click.option("--layer", required=True, help="Activation node id to visualize.")
@click.option("--channels", default="0", show_default=True,
              help="Comma-separated channel indices.")
@click.option("--out", default=None)
def viz(config_path, checkpoint, sample_id, split, layer, channels, out,
        decay_alias, **kwargs):
    """Emit plain/reweighted saliency overlay pairs for chosen channels."""
    cfg = build_config(config_path, decay_alias, **kwargs)
    out_dir = resolve_out_dir(out, "viz")
    model, _, _ = load_checkpoint(checkpoint)
    split = split or cfg.val_split
    ann = data_mod.load_annotations(cfg.data_root, split)
    if sample_id not in ann:
        raise click.ClickException(f"sample {sample_id!r} not in split {split!r}")
    sample = data_mod.load_sample(cfg.data_root, split, sample_id, ann[sample_id])
    paths = emit_overlays(model, sample, layer, _parse_channels(channels), out_dir,
                          config=saliency_config_from(cfg))
    for p in paths:
        click.echo(f"wrote {p}")


@main.command()
@click.argument("study", type=click.Choice(ablate_mod.STUDIES))
@config_options
@click.option("--baseline-ckpt", default=None, type=click.Path(exists=True))
@click.option("--sample-grid", default=None,
              help='Sizes for the sample_size study, e.g. "8,16,32,64,128".')
@click.option("--out", default=None)
def ablate(study, config_path, baseline_ckpt, sample_grid, out, decay_alias, **kwargs):
    """Run one ablation study; writes a CSV and a figure."""
    cfg = build_config(config_path, decay_alias, **kwargs)
    out_dir = resolve_out_dir(out, f"ablate-{study}")
    grid = tuple(_parse_channels(sample_grid)) if sample_grid else None
    result = ablate_mod.run_study(study, cfg, out_dir, baseline_ckpt=baseline_ckpt,
                                  sample_grid=grid, log=click.echo)
    click.echo(f"wrote {result['csv']} and {result['plot']}")


def entry():  # pragma: no cover
    try:
        main()
    except SalpruneError as exc:
        raise click.ClickException(str(exc))


if __name__ == "__main__":  # pragma: no cover
    entry()
