"""Config-driven command-line surface.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort,
5 gate-audit failure. Overrides use dotted keys, e.g.
`phase1.iterations=200`, and are applied after file values.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import evaluation as ev
from .config import RunConfig, load_run_config, write_manifest
from .data import ImageBatch, load_domain
from .errors import TranslationError
from .training import (clone_for_phase2, load_checkpoint, save_checkpoint,
                       train_phase1, train_phase2, translate)


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except TranslationError as exc:
            click.echo(f"error ({type(exc).__name__}): {exc}", err=True)
            sys.exit(exc.exit_code)
    return wrapper


@click.group()
def main() -> None:
    """One-shot unsupervised image-to-image translation."""


def _out_dir(cfg: RunConfig) -> Path:
    path = Path(cfg.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _classifier(cfg: RunConfig, out_dir: Path) -> ev.ClassifierModel:
    train_ds = load_domain(cfg.dataset_b)
    test_ds = load_domain(dataclasses.replace(cfg.dataset_b, split="test"))
    cache = cfg.evaluation.classifier_cache or str(out_dir / "classifier.pt")
    return ev.get_or_train_classifier(cache, train_ds, test_ds,
                                      epochs=cfg.evaluation.classifier_epochs,
                                      seed=cfg.seed)


@main.command("train-phase1")
@click.argument("config_path", type=click.Path())
@click.argument("overrides", nargs=-1)
@_handle_errors
def cmd_train_phase1(config_path: str, overrides: tuple[str, ...]) -> None:
    """Train the domain-B variational adversarial autoencoder."""
    cfg = load_run_config(config_path, list(overrides))
    out_dir = _out_dir(cfg)
    write_manifest(out_dir, "train-phase1", cfg)
    dataset_b = load_domain(cfg.dataset_b)
    train_cfg = cfg.train_config(1)
    state = train_phase1(dataset_b, train_cfg, net_spec=cfg.network,
                         out_dir=out_dir)
    save_checkpoint(state, out_dir / "checkpoints" / "phase1_final.pt")
    sample = dataset_b.batch(range(min(8, len(dataset_b))))
    recon = translate(state, sample, "BB")
    ev.write_image_grid(out_dir / "grids" / "phase1_reconstruction.png",
                        [sample, recon])
    click.echo(f"phase-1 checkpoint written under {out_dir / 'checkpoints'}")


@main.command("train-phase2")
@click.argument("config_path", type=click.Path())
@click.argument("overrides", nargs=-1)
@click.option("--from-checkpoint", "checkpoint", required=True,
              type=click.Path(), help="phase-1 checkpoint to clone")
@click.option("--sample-index", type=int, default=None,
              help="deterministic index of the one-shot sample")
@click.option("--sample-seed", type=int, default=0,
              help="seed for a random one-shot draw")
@click.option("--sample-count", type=int, default=1,
              help="number of source samples (k-shot)")
@_handle_errors
def cmd_train_phase2(config_path: str, overrides: tuple[str, ...],
                     checkpoint: str, sample_index, sample_seed: int,
                     sample_count: int) -> None:
    """Clone the phase-1 model and fine-tune on the one-shot sample."""
    cfg = load_run_config(config_path, list(overrides))
    out_dir = _out_dir(cfg)
    write_manifest(out_dir, "train-phase2", cfg, extra={
        "from_checkpoint": str(checkpoint),
        "sample_index": sample_index,
        "sample_seed": sample_seed,
        "sample_count": sample_count,
    })
    dataset_a = load_domain(cfg.dataset_a)
    dataset_b = load_domain(cfg.dataset_b)
    x = dataset_a.one_shot(index=sample_index, seed=sample_seed,
                           count=sample_count)
    state1 = load_checkpoint(checkpoint)
    state = clone_for_phase2(state1)
    train_cfg = cfg.train_config(2)
    state = train_phase2(state, x, dataset_b, train_cfg, out_dir=out_dir)
    save_checkpoint(state, out_dir / "checkpoints" / "phase2_final.pt")
    translated = translate(state, x, "AB")
    cycled = translate(state, translated, "BA")
    ev.write_image_grid(out_dir / "grids" / "phase2_translation.png",
                        [x, translated, cycled])
    click.echo(f"phase-2 checkpoint written under {out_dir / 'checkpoints'}")


def _load_input_images(path: Path, resolution: int) -> ImageBatch:
    from .data import DomainDataset

    if path.is_dir():
        ds = load_domain(DomainDataset(source="image-folder", root=str(path),
                                       resolution=resolution, domain="A"))
        return ds.batch(range(len(ds)))
    from PIL import Image
    import torch.nn.functional as F

    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    pixels = torch.from_numpy(arr).permute(2, 0, 1)[None] / 127.5 - 1.0
    if pixels.shape[2:] != (resolution, resolution):
        pixels = F.interpolate(pixels, size=(resolution, resolution),
                               mode="bilinear", align_corners=False)
    return ImageBatch(pixels.clamp(-1, 1), "A")


@main.command("translate")
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--input", "input_path", required=True, type=click.Path())
@click.option("--direction", type=click.Choice(["AB", "BA", "AA", "BB"]),
              default="AB")
@click.option("--out", "out_path", required=True, type=click.Path())
@_handle_errors
def cmd_translate(checkpoint: str, input_path: str, direction: str,
                  out_path: str) -> None:
    """Translate an image (or folder of images) through a trained model."""
    from PIL import Image

    state = load_checkpoint(checkpoint)
    batch = _load_input_images(Path(input_path), state.bundle.spec.resolution)
    result = translate(state, batch, direction)
    arr = ((result.pixels.clamp(-1, 1) + 1) * 127.5).to(torch.uint8)
    arr = arr.permute(0, 2, 3, 1).numpy()
    out = Path(out_path)
    if arr.shape[0] == 1 and out.suffix:
        out.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(arr[0]).save(out)
    else:
        out.mkdir(parents=True, exist_ok=True)
        for i in range(arr.shape[0]):
            Image.fromarray(arr[i]).save(out / f"{i:05d}.png")
    click.echo(f"wrote {arr.shape[0]} image(s) to {out}")


@main.command("evaluate")
@click.argument("config_path", type=click.Path())
@click.argument("overrides", nargs=-1)
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--metric", type=click.Choice(["accuracy", "perceptual", "style"]),
              required=True)
@_handle_errors
def cmd_evaluate(config_path: str, overrides: tuple[str, ...],
                 checkpoint: str, metric: str) -> None:
    """Score a trained checkpoint with one of the quantitative metrics."""
    cfg = load_run_config(config_path, list(overrides))
    out_dir = _out_dir(cfg)
    write_manifest(out_dir, "evaluate", cfg, extra={
        "checkpoint": str(checkpoint), "metric": metric})
    state = load_checkpoint(checkpoint)
    dataset_a = load_domain(cfg.dataset_a)
    if metric == "accuracy":
        classifier = _classifier(cfg, out_dir)
        labeled = dataset_a.batch(range(len(dataset_a)))
        value = ev.translation_accuracy(
            state, labeled, classifier,
            cfg.evaluation.min_classifier_accuracy)
        count = len(labeled)
    else:
        classifier = _classifier(cfg, out_dir)
        features = ev.ConvFeatureExtractor.from_classifier(classifier)
        inputs = dataset_a.batch(range(len(dataset_a)))
        translated = translate(state, inputs, "AB")
        if metric == "perceptual":
            value = ev.perceptual_distance(inputs.pixels, translated.pixels,
                                           features)
        else:
            dataset_b = load_domain(cfg.dataset_b)
            target = dataset_b.batch(range(len(dataset_b)))
            value = ev.style_difference(translated.pixels, target.pixels,
                                        features)
        count = len(inputs)
    report = ev.MetricReport(metric, value, count,
                             config_hash=f"{hash(json.dumps(cfg.resolved(), sort_keys=True)) & 0xffffffff:08x}")
    metrics_dir = out_dir / "metrics"
    metrics_dir.mkdir(parents=True, exist_ok=True)
    with open(metrics_dir / f"{metric}.json", "w") as f:
        json.dump(dataclasses.asdict(report), f, indent=2)
    click.echo(f"{metric}: {value:.6f} (n={count})")


def _eval_batch(cfg: RunConfig):
    """Held-out labeled source images for scoring; None if unavailable."""
    from .errors import DataError

    try:
        test_a = load_domain(dataclasses.replace(cfg.dataset_a, split="test"))
    except DataError:
        return None
    if test_a.labels is None or len(test_a) == 0:
        return None
    return test_a.batch(range(min(cfg.evaluation.eval_samples, len(test_a))))


def _phase1_for_harness(cfg: RunConfig, out_dir: Path):
    dataset_b = load_domain(cfg.dataset_b)
    ckpt = out_dir / "checkpoints" / "phase1_final.pt"
    if ckpt.exists():
        return load_checkpoint(ckpt), dataset_b
    state = train_phase1(dataset_b, cfg.train_config(1), net_spec=cfg.network,
                         out_dir=out_dir)
    save_checkpoint(state, ckpt)
    return state, dataset_b


@main.command("ablate")
@click.argument("config_path", type=click.Path())
@click.argument("overrides", nargs=-1)
@click.option("--repeats", type=int, default=None,
              help="independent one-shot draws per row")
@_handle_errors
def cmd_ablate(config_path: str, overrides: tuple[str, ...],
               repeats) -> None:
    """Run the 12-row ablation grid and write the accuracy table."""
    cfg = load_run_config(config_path, list(overrides))
    out_dir = _out_dir(cfg)
    repeats = repeats if repeats is not None else cfg.evaluation.repeats
    write_manifest(out_dir, "ablate", cfg, extra={"repeats": repeats})
    state1, dataset_b = _phase1_for_harness(cfg, out_dir)
    dataset_a = load_domain(cfg.dataset_a)
    classifier = _classifier(cfg, out_dir)
    rows = ev.run_ablation_grid(
        dataset_a, dataset_b, state1, cfg.train_config(2), classifier,
        repeats, cfg.evaluation.min_classifier_accuracy,
        out_dir=out_dir / "metrics",
        direction_label=f"{cfg.dataset_a.source}->{cfg.dataset_b.source}",
        eval_batch=_eval_batch(cfg))
    for row in rows:
        click.echo(f"{row['config']:40s} {row['accuracy_mean']:.3f} "
                   f"± {row['accuracy_stderr']:.3f}")


@main.command("sweep")
@click.argument("config_path", type=click.Path())
@click.argument("overrides", nargs=-1)
@click.option("--counts", type=str, default=None,
              help="comma-separated source sample counts")
@click.option("--repeats", type=int, default=None)
@_handle_errors
def cmd_sweep(config_path: str, overrides: tuple[str, ...], counts,
              repeats) -> None:
    """Accuracy versus number of source samples."""
    cfg = load_run_config(config_path, list(overrides))
    out_dir = _out_dir(cfg)
    count_list = ([int(c) for c in counts.split(",")] if counts
                  else list(cfg.evaluation.counts))
    repeats = repeats if repeats is not None else cfg.evaluation.repeats
    write_manifest(out_dir, "sweep", cfg,
                   extra={"counts": count_list, "repeats": repeats})
    state1, dataset_b = _phase1_for_harness(cfg, out_dir)
    dataset_a = load_domain(cfg.dataset_a)
    classifier = _classifier(cfg, out_dir)
    rows = ev.run_sample_sweep(
        dataset_a, dataset_b, state1, cfg.train_config(2), classifier,
        count_list, repeats, cfg.evaluation.min_classifier_accuracy,
        out_dir=out_dir / "metrics", eval_batch=_eval_batch(cfg))
    for row in rows:
        click.echo(f"count={row['count']:<6d} {row['accuracy_mean']:.3f} "
                   f"± {row['accuracy_stderr']:.3f}")


if __name__ == "__main__":
    main()
