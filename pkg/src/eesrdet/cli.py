"""Command line entry point: prepare-data, train, evaluate, infer, plot."""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import click
import torch
import torch.nn.functional as F
import yaml
from PIL import Image, ImageDraw

from .detector import detect, read_detections, write_detections
from .evaluation import EvalReport, ap_iou_curve, write_curve_csv
from .imaging import DimensionError, bicubic_upsample, edge_to_image, read_png, to_uint8, write_png
from .sr_generator import ConfigError
from .synthdata import (AnnotationError, DatasetError, PackingError, generate_synthetic, load_dataset,
                        save_dataset, split_dataset)
from .training import (CheckpointError, TrainingError, evaluate as evaluate_state, load_checkpoint,
                       load_config, run_training, sr_forward)

EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 2, 3, 4
_EXIT_CODES = (
    (ConfigError, EXIT_CONFIG), (yaml.YAMLError, EXIT_CONFIG),
    (DatasetError, EXIT_DATA), (AnnotationError, EXIT_DATA), (PackingError, EXIT_DATA),
    (DimensionError, EXIT_DATA), (FileNotFoundError, EXIT_DATA),
    (CheckpointError, EXIT_RUNTIME), (TrainingError, EXIT_RUNTIME),
)


@dataclass(frozen=True)
class DataConfig:
    root: str = "data/synthetic"
    n_tiles: int = 250
    hr_size: int = 64
    objects_per_tile: tuple[int, int] = (1, 4)
    object_size: tuple[int, int] = (3, 9)
    channels: int = 3
    min_contrast: float = 0.3
    fractions: tuple[float, ...] = (0.8, 0.2)
    seed: int | None = None


def _read_yaml(path: str | None) -> dict:
    if path is None:
        return {}
    data = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def _data_config(raw: dict, seed: int | None) -> DataConfig:
    section = dict(raw.get("data") or {})
    unknown = set(section) - set(DataConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"data.{sorted(unknown)[0]}: unknown config key")
    for k in ("objects_per_tile", "object_size", "fractions"):
        if k in section:
            section[k] = tuple(section[k])
    cfg = DataConfig(**section)
    return DataConfig(**{**cfg.__dict__, "seed": seed if seed is not None else
                         (cfg.seed if cfg.seed is not None else raw.get("seed", 0))})


def _overrides(seed, mode, backend) -> dict:
    out: dict = {}
    if seed is not None:
        out["seed"] = seed
    if mode is not None:
        out["mode"] = mode
    if backend is not None:
        out["detector"] = {"backend": backend}
    return out


def _tiles(root: str | Path, part: str):
    tiles, split = load_dataset(root)
    ids = getattr(split, part)
    if not ids and part == "val":
        return []
    if not ids:
        raise DatasetError(f"{root}: split {part!r} is empty")
    return [tiles[i] for i in ids]


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except click.exceptions.Exit:
            raise
        except click.ClickException:
            raise
        except Exception as exc:  # map library errors onto documented exit codes
            for kind, code in _EXIT_CODES:
                if isinstance(exc, kind):
                    click.echo(f"error: {exc}", err=True)
                    sys.exit(code)
            raise


config_option = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
                             help="YAML run configuration.")
seed_option = click.option("--seed", type=int, help="Override the seed in the config.")


@click.group(cls=_Group)
@click.option("-v", "--verbose", is_flag=True)
def main(verbose: bool) -> None:
    """Edge-enhanced super-resolution with a coupled small-object detector."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")


@main.command("prepare-data")
@config_option
@seed_option
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Dataset directory (default: data.root).")
@click.option("--force", is_flag=True, help="Overwrite a non-empty dataset directory.")
def prepare_data(config_path, seed, out_dir, force):
    """Generate a synthetic tile dataset with annotations and a split."""
    raw = _read_yaml(config_path)
    dc = _data_config(raw, seed)
    scale = int(raw.get("scale", 4))
    tiles = generate_synthetic(dc.n_tiles, hr_size=dc.hr_size, objects_per_tile=dc.objects_per_tile,
                               object_size=dc.object_size, seed=dc.seed, scale=scale, channels=dc.channels,
                               min_contrast=dc.min_contrast)
    split = split_dataset(tiles, dc.fractions, seed=dc.seed)
    root = save_dataset(tiles, split, out_dir or dc.root, force=force)
    click.echo(f"wrote {len(tiles)} tiles to {root} (train {len(split.train)}, val {len(split.val)}, "
               f"test {len(split.test)})")


@main.command()
@config_option
@seed_option
@click.option("--run-dir", required=True, type=click.Path(file_okay=False))
@click.option("--mode", type=click.Choice(["separate", "end_to_end"]))
@click.option("--backend", type=click.Choice(["two_stage", "single_stage"]))
@click.option("--data", "data_dir", type=click.Path(file_okay=False), help="Dataset directory (default: data.root).")
@click.option("--max-steps", type=int)
@click.option("--train-size", type=int, help="Use only the first N training tiles (dataset-size sweeps).")
@click.option("--resume", is_flag=True, help="Continue from RUN_DIR/checkpoints/last.pt.")
@click.option("--force", is_flag=True, help="Start over in a run directory that already has a log.")
def train(config_path, seed, run_dir, mode, backend, data_dir, max_steps, train_size, resume, force):
    """Train in separate or end-to-end mode."""
    raw = _read_yaml(config_path)
    over = _overrides(seed, mode, backend)
    if max_steps is not None:
        over["max_steps"] = max_steps
    cfg = load_config(config_path, over)
    root = data_dir or _data_config(raw, seed).root
    train_tiles = _tiles(root, "train")
    if train_size is not None:
        if not 1 <= train_size <= len(train_tiles):
            raise ConfigError(f"train_size: must lie in [1, {len(train_tiles)}], got {train_size}")
        train_tiles = train_tiles[:train_size]
    run = Path(run_dir)
    log_file = run / "train_log.jsonl"
    if log_file.exists() and not (resume or force):
        raise DatasetError(f"{run} already holds a training log; pass --resume or --force")
    if force and log_file.exists():
        log_file.unlink()
    state = run_training(cfg, train_tiles, run, val_tiles=_tiles(root, "val"), resume=resume)
    (run / "run.json").write_text(json.dumps({"dataset": str(root), "train_size": len(train_tiles)}, indent=1))
    click.echo(f"trained to step {state.step}; checkpoint {run / 'checkpoints' / 'last.pt'}")


def _checkpoint_path(checkpoint, run_dir) -> Path:
    if checkpoint:
        return Path(checkpoint)
    if run_dir:
        return Path(run_dir) / "checkpoints" / "last.pt"
    raise click.UsageError("pass --checkpoint or --run-dir")


@main.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False))
@click.option("--run-dir", type=click.Path(file_okay=False))
@click.option("--data", "data_dir", type=click.Path(file_okay=False))
@config_option
@click.option("--split", "part", default="test", type=click.Choice(["train", "val", "test"]))
@click.option("--input", "input_kind", type=click.Choice(["sr", "bicubic", "hr"]),
              help="Detector input (default: what the checkpoint was trained on).")
@click.option("--detections", type=click.Path(exists=True, dir_okay=False),
              help="Score an exported detection file instead of running a checkpoint.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), help="Report path (JSON).")
def evaluate(checkpoint, run_dir, data_dir, config_path, part, input_kind, detections, out_path):
    """Compute AP over IoU 0.50:0.95 and the PR curve at 0.5 on a dataset split."""
    raw = _read_yaml(config_path)
    extra = {}
    if run_dir and (Path(run_dir) / "run.json").exists():
        extra = json.loads((Path(run_dir) / "run.json").read_text())
    root = data_dir or extra.get("dataset") or _data_config(raw, None).root
    tiles = _tiles(root, part)
    if detections:
        dets = read_detections(detections)
        report = ap_iou_curve(dets, {t.id: t.boxes for t in tiles}, label=Path(detections).stem)
    else:
        state = load_checkpoint(_checkpoint_path(checkpoint, run_dir))
        report = evaluate_state(state, tiles, input_kind)
    report.extra.update({k: v for k, v in extra.items() if k == "train_size"})
    report.extra["split"] = part
    if out_path is None:
        out_path = Path(run_dir) / f"report_{report.label}_{part}.json" if run_dir else Path(f"report_{part}.json")
    report.save(out_path)
    counts = report.counts[0]
    click.echo(f"{report.label}: AP@0.5={report.ap_at(0.5):.4f} AP@[.5:.95]={report.ap_mean:.4f} "
               f"TP={counts['tp']} FP={counts['fp']} FN={counts['fn']} -> {out_path}")


def _overlay(img: torch.Tensor, boxes) -> Image.Image:
    arr = to_uint8(img)
    pil = Image.fromarray(arr if arr.shape[-1] == 3 else arr[..., 0]).convert("RGB")
    draw = ImageDraw.Draw(pil)
    for b in boxes:
        draw.rectangle([b.x_min, b.y_min, b.x_max - 1, b.y_max - 1], outline=(255, 0, 0))
    return pil


@main.command()
@click.option("--checkpoint", type=click.Path(dir_okay=False))
@click.option("--run-dir", type=click.Path(file_okay=False))
@click.argument("image", type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--score-thresh", default=0.5, show_default=True)
@click.option("--nms-iou", default=0.5, show_default=True)
def infer(checkpoint, run_dir, image, out_dir, score_thresh, nms_iou):
    """Super-resolve one LR image, enhance its edges and detect objects.

    Inputs whose sides are not multiples of 4 are replicate-padded up to the
    next multiple and the outputs are cropped back to ``scale`` times the
    original size.
    """
    state = load_checkpoint(_checkpoint_path(checkpoint, run_dir))
    s = state.cfg.scale
    lr = read_png(image)
    if lr.shape[0] != state.cfg.detector.in_channels:
        raise DimensionError(f"{image}: expected {state.cfg.detector.in_channels} channels, got {lr.shape[0]}")
    h, w = lr.shape[-2:]
    ph, pw = -h % 4, -w % 4
    x = F.pad(lr[None], (0, pw, 0, ph), mode="replicate") if ph or pw else lr[None]
    with torch.no_grad():
        if state.generator is not None:
            out = sr_forward(state, x)
            sr = out.sr.clamp(0, 1)[..., :h * s, :w * s]
            edges = out.edge_enhanced[..., :h * s, :w * s]
        else:
            sr = bicubic_upsample(x, s)[..., :h * s, :w * s]
            edges = None
    dets = detect(state.detector, sr[0], score_thresh, nms_iou)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(image).stem
    write_png(out_dir / f"{stem}_sr.png", sr[0])
    if edges is not None:
        write_png(out_dir / f"{stem}_edges.png", edge_to_image(edges[0]))
    _overlay(sr[0], dets).save(out_dir / f"{stem}_detections.png")
    write_detections(out_dir / f"{stem}_detections.txt", {stem: dets})
    click.echo(f"{stem}: {tuple(sr.shape[-2:])} SR, {len(dets)} detections -> {out_dir}")


@main.command()
@click.argument("reports", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--render", is_flag=True, help="Also render PNG figures (needs matplotlib).")
def plot(reports, out_dir, render):
    """Write AP-IoU, PR and dataset-size curve data from evaluation reports."""
    loaded = [EvalReport.load(p) for p in reports]
    grid = [round(t, 4) for t in loaded[0].thresholds]
    for path, rep in zip(reports, loaded):
        if [round(t, 4) for t in rep.thresholds] != grid:
            raise ConfigError(f"{path}: IoU threshold grid differs from {reports[0]}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = []
    for path, rep in zip(reports, loaded):
        label = rep.label or Path(path).stem
        while label in labels:
            label += "_"
        labels.append(label)
    write_curve_csv(out / "ap_iou.csv", ["tau", *labels],
                    [[t, *(rep.ap[i] for rep in loaded)] for i, t in enumerate(loaded[0].thresholds)])
    for label, rep in zip(labels, loaded):
        write_curve_csv(out / f"pr_{label}.csv", ["confidence", "recall", "precision"], rep.pr_curve)
    sizes = sorted(((rep.extra.get("train_size"), label, rep.ap_mean) for label, rep in zip(labels, loaded)),
                   key=lambda r: (r[0] is None, r[0] or 0))
    write_curve_csv(out / "dataset_size.csv", ["train_size", "label", "ap_50_95"], sizes)
    if render:
        _render(out, labels, loaded)
    click.echo(f"wrote curve data for {len(loaded)} report(s) to {out}")


def _render(out: Path, labels, reports) -> None:
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise click.ClickException("--render needs matplotlib") from exc
    fig, ax = plt.subplots()
    for label, rep in zip(labels, reports):
        ax.plot(rep.thresholds, rep.ap, marker="o", label=label)
    ax.set(xlabel="IoU threshold", ylabel="AP")
    ax.legend()
    fig.savefig(out / "ap_iou.png")
    fig, ax = plt.subplots()
    for label, rep in zip(labels, reports):
        ax.plot([p[1] for p in rep.pr_curve], [p[2] for p in rep.pr_curve], label=label)
    ax.set(xlabel="recall", ylabel="precision")
    ax.legend()
    fig.savefig(out / "pr.png")
    plt.close("all")


if __name__ == "__main__":
    main()
