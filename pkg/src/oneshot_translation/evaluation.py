"""Quantitative evaluation: classifier-based translation accuracy, perceptual
and Gram-style metrics, and the ablation/sweep harness."""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from .data import ImageBatch, LoadedDataset
from .errors import ConfigError, NumericalError
from .training import (AblationToggles, TrainConfig, TrainState,
                       clone_for_phase2, train_phase2, translate)

MNIST_CLASSIFIER_MIN_ACCURACY = 0.98
SVHN_CLASSIFIER_MIN_ACCURACY = 0.90


class DigitClassifier(nn.Module):
    """Small convolutional classifier used as the translation-accuracy oracle."""

    def __init__(self, num_classes: int = 10):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 32, 3, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(32, 64, 3, 2, 1), nn.ReLU(inplace=True),
            nn.Conv2d(64, 128, 3, 2, 1), nn.ReLU(inplace=True),
        )
        self.head = nn.Linear(128 * 4 * 4, num_classes)

    def forward(self, x):
        return self.head(self.features(x).flatten(1))


@dataclass
class ClassifierModel:
    """A trained classifier plus its recorded held-out accuracy."""

    model: DigitClassifier
    test_accuracy: float

    def predict(self, batch: ImageBatch) -> torch.Tensor:
        self.model.eval()
        with torch.no_grad():
            return self.model(batch.pixels).argmax(dim=1)


def classifier_accuracy(model: DigitClassifier,
                        dataset: LoadedDataset) -> float:
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(dataset), 256):
            batch = dataset.batch(range(start, min(start + 256, len(dataset))))
            pred = model(batch.pixels).argmax(dim=1)
            correct += int((pred == batch.labels).sum())
    return correct / len(dataset)


def train_classifier(train_ds: LoadedDataset, test_ds: LoadedDataset,
                     epochs: int = 4, seed: int = 0,
                     lr: float = 1e-3) -> ClassifierModel:
    """Fixed small-CNN training recipe; deterministic given the seed."""
    if train_ds.labels is None or test_ds.labels is None:
        raise ConfigError("classifier training needs labeled datasets")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = DigitClassifier()
        opt = torch.optim.Adam(model.parameters(), lr=lr)
        loss_fn = nn.CrossEntropyLoss()
        model.train()
        for batch in train_ds.batches(64, seed=seed, epochs=epochs):
            opt.zero_grad(set_to_none=True)
            loss = loss_fn(model(batch.pixels), batch.labels)
            loss.backward()
            opt.step()
    return ClassifierModel(model, classifier_accuracy(model, test_ds))


def get_or_train_classifier(cache_path: Path | str, train_ds: LoadedDataset,
                            test_ds: LoadedDataset, epochs: int = 4,
                            seed: int = 0) -> ClassifierModel:
    """Load a cached classifier checkpoint or train and cache one."""
    cache_path = Path(cache_path)
    if cache_path.exists():
        payload = torch.load(str(cache_path), weights_only=False)
        model = DigitClassifier()
        model.load_state_dict(payload["state"])
        return ClassifierModel(model, payload["test_accuracy"])
    clf = train_classifier(train_ds, test_ds, epochs=epochs, seed=seed)
    cache_path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"state": clf.model.state_dict(),
                "test_accuracy": clf.test_accuracy}, str(cache_path))
    return clf


def translation_accuracy(state: TrainState, labeled: ImageBatch,
                         classifier: ClassifierModel,
                         min_classifier_accuracy: float = SVHN_CLASSIFIER_MIN_ACCURACY,
                         direction: str = "AB") -> float:
    """Fraction of source images whose translation keeps the source label.

    Refuses to report when the oracle classifier is below its accuracy
    threshold for the target domain.
    """
    if labeled.labels is None:
        raise ConfigError("translation_accuracy needs labeled source images")
    if classifier.test_accuracy < min_classifier_accuracy:
        raise ConfigError(
            f"classifier accuracy {classifier.test_accuracy:.3f} below the "
            f"required {min_classifier_accuracy:.2f}; refusing to report")
    translated = translate(state, labeled, direction)
    pred = classifier.predict(translated)
    return float((pred == labeled.labels).float().mean())


# --- perceptual / style metrics -------------------------------------------

class ConvFeatureExtractor(nn.Module):
    """Frozen conv stack exposing intermediate activations for metrics.

    Built either from a trained classifier's feature stages or from any
    sequential backbone; the capture points are recorded so reports can name
    them.
    """

    def __init__(self, body: nn.Sequential, capture: Sequence[int]):
        super().__init__()
        self.body = body
        self.capture = tuple(capture)
        for p in self.parameters():
            p.requires_grad_(False)

    @classmethod
    def from_classifier(cls, classifier: ClassifierModel) -> "ConvFeatureExtractor":
        # capture after each ReLU
        return cls(classifier.model.features, capture=(1, 3, 5))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for i, layer in enumerate(self.body):
            h = layer(h)
            if i in self.capture:
                feats.append(h)
        return feats


def perceptual_distance(set_x: torch.Tensor, set_y: torch.Tensor,
                        features: ConvFeatureExtractor) -> float:
    """Mean squared feature distance between paired image sets."""
    if set_x.shape != set_y.shape:
        raise ConfigError("perceptual_distance needs paired, equal-size sets")
    with torch.no_grad():
        fx = features(set_x)
        fy = features(set_y)
    dists = [float((a - b).pow(2).mean()) for a, b in zip(fx, fy)]
    value = sum(dists) / len(dists)
    if not math.isfinite(value):
        raise NumericalError("non-finite perceptual distance")
    return value


def gram_matrix(feature: torch.Tensor) -> torch.Tensor:
    """Per-image Gram matrix normalized by channels x spatial positions."""
    n, c, h, w = feature.shape
    flat = feature.reshape(n, c, h * w)
    return flat @ flat.transpose(1, 2) / (c * h * w)


def style_difference(set_x: torch.Tensor, set_y: torch.Tensor,
                     features: ConvFeatureExtractor) -> float:
    """Frobenius distance between set-averaged Gram matrices, layer-averaged.

    The sets may differ in size; the value is invariant to within-set order.
    """
    if len(set_x) == 0 or len(set_y) == 0:
        raise ConfigError("style_difference needs nonempty sets")
    with torch.no_grad():
        fx = features(set_x)
        fy = features(set_y)
    dists = []
    for a, b in zip(fx, fy):
        ga = gram_matrix(a).mean(dim=0)
        gb = gram_matrix(b).mean(dim=0)
        dists.append(float(torch.linalg.norm(ga - gb)))
    value = sum(dists) / len(dists)
    if not math.isfinite(value):
        raise NumericalError("non-finite style difference")
    return value


@dataclass
class MetricReport:
    metric: str
    value: float
    sample_count: int
    config_hash: str

    def __post_init__(self) -> None:
        if not math.isfinite(self.value):
            raise NumericalError(f"non-finite metric {self.metric}")
        if self.sample_count <= 0:
            raise ConfigError("sample_count must be > 0")


# --- ablation / sweep harness ---------------------------------------------

def fork_phase1(state: TrainState) -> TrainState:
    """Deep-copy a phase-1 state so independent phase-2 runs cannot interact."""
    return TrainState(copy.deepcopy(state.bundle), state.phase,
                      state.iteration, None, None,
                      copy.deepcopy(state.rng_augment),
                      copy.deepcopy(state.rng_noise),
                      state.generator_classes)


def one_shot_run(phase1_state: TrainState, x: ImageBatch,
                 dataset_b: LoadedDataset, cfg: TrainConfig,
                 classifier: ClassifierModel,
                 min_classifier_accuracy: float,
                 eval_batch: Optional[ImageBatch] = None,
                 snapshot_callback=None) -> tuple[TrainState, float]:
    """Clone the phase-1 state, fine-tune on x, and score the translation.

    Accuracy is scored on eval_batch (a held-out labeled source set) when
    given, otherwise on x itself.
    """
    state = clone_for_phase2(fork_phase1(phase1_state))
    state = train_phase2(state, x, dataset_b, cfg,
                         snapshot_callback=snapshot_callback)
    acc = translation_accuracy(state, eval_batch if eval_batch is not None
                               else x, classifier,
                               min_classifier_accuracy, direction="AB")
    return state, acc


def ablation_rows() -> list[dict]:
    """The 12 harness configurations: all 8 basic toggle combinations, the
    shared-frozen variant, the two two-way-cycle variants, and the full
    method."""
    rows = []
    for aug in (False, True):
        for cyc in (False, True):
            for sel in (False, True):
                rows.append({"name": f"aug={aug} cycle={cyc} selective={sel}",
                             "toggles": AblationToggles(
                                 augmentation=aug, one_way_cycle=cyc,
                                 selective_backprop=sel)})
    rows.append({"name": "shared-frozen",
                 "toggles": AblationToggles(shared_frozen=True)})
    rows.append({"name": "two-way cycle, selective",
                 "toggles": AblationToggles(two_way_cycle=True)})
    rows.append({"name": "two-way cycle, non-selective",
                 "toggles": AblationToggles(two_way_cycle=True,
                                            selective_backprop=False)})
    rows.append({"name": "full method", "toggles": AblationToggles()})
    return rows


def run_ablation_grid(dataset_a: LoadedDataset, dataset_b: LoadedDataset,
                      phase1_state: TrainState, cfg: TrainConfig,
                      classifier: ClassifierModel, repeats: int,
                      min_classifier_accuracy: float = SVHN_CLASSIFIER_MIN_ACCURACY,
                      out_dir: Optional[Path | str] = None,
                      direction_label: str = "A->B",
                      rows: Optional[list[dict]] = None,
                      eval_batch: Optional[ImageBatch] = None) -> list[dict]:
    """Mean one-shot translation accuracy per harness configuration.

    The one-shot draws (seeds 1000..1000+repeats-1) are shared across rows
    so per-draw differences between configurations are paired.
    """
    if repeats <= 0:
        raise ConfigError("repeats must be > 0")
    results = []
    for row in rows if rows is not None else ablation_rows():
        accs = []
        for r in range(repeats):
            x = dataset_a.one_shot(seed=1000 + r)
            run_cfg = replace(cfg, toggles=row["toggles"], seed=cfg.seed + r)
            _, acc = one_shot_run(phase1_state, x, dataset_b, run_cfg,
                                  classifier, min_classifier_accuracy,
                                  eval_batch=eval_batch)
            accs.append(acc)
        mean = float(np.mean(accs))
        stderr = float(np.std(accs, ddof=1) / math.sqrt(len(accs))) \
            if len(accs) > 1 else 0.0
        results.append({"config": row["name"], "direction": direction_label,
                        "repeats": repeats, "accuracy_mean": mean,
                        "accuracy_stderr": stderr, "raw": accs})
    if out_dir is not None:
        _write_table(Path(out_dir), "ablation", results)
    return results


def run_sample_sweep(dataset_a: LoadedDataset, dataset_b: LoadedDataset,
                     phase1_state: TrainState, cfg: TrainConfig,
                     classifier: ClassifierModel, counts: Sequence[int],
                     repeats: int,
                     min_classifier_accuracy: float = SVHN_CLASSIFIER_MIN_ACCURACY,
                     out_dir: Optional[Path | str] = None,
                     eval_batch: Optional[ImageBatch] = None) -> list[dict]:
    """Accuracy versus the number of source-domain samples."""
    if repeats <= 0:
        raise ConfigError("repeats must be > 0")
    results = []
    for count in counts:
        accs = []
        for r in range(repeats):
            x = dataset_a.one_shot(seed=2000 + r, count=count)
            run_cfg = replace(cfg, seed=cfg.seed + r)
            _, acc = one_shot_run(phase1_state, x, dataset_b, run_cfg,
                                  classifier, min_classifier_accuracy,
                                  eval_batch=eval_batch)
            accs.append(acc)
        mean = float(np.mean(accs))
        stderr = float(np.std(accs, ddof=1) / math.sqrt(len(accs))) \
            if len(accs) > 1 else 0.0
        results.append({"count": int(count), "repeats": repeats,
                        "accuracy_mean": mean, "accuracy_stderr": stderr,
                        "raw": accs})
    if out_dir is not None:
        _write_table(Path(out_dir), "sweep", results)
    return results


def checkpoint_variability(phase1_state: TrainState, x: ImageBatch,
                           dataset_b: LoadedDataset, cfg: TrainConfig,
                           n_checkpoints: int = 5) -> float:
    """Mean pairwise L1 between translations of x at evenly spaced phase-II
    checkpoints; the stability probe for the selective-backprop ablation."""
    snapshots: list[torch.Tensor] = []
    interval = max(cfg.iterations // n_checkpoints, 1)

    def callback(state: TrainState, it: int) -> None:
        if it % interval == 0 and len(snapshots) < n_checkpoints:
            snapshots.append(translate(state, x, "AB").pixels.clone())

    state = clone_for_phase2(fork_phase1(phase1_state))
    train_phase2(state, x, dataset_b, cfg, snapshot_callback=callback)
    pairs = [(i, j) for i in range(len(snapshots))
             for j in range(i + 1, len(snapshots))]
    dists = [float((snapshots[i] - snapshots[j]).abs().mean())
             for i, j in pairs]
    return sum(dists) / len(dists)


def _write_table(out_dir: Path, name: str, rows: list[dict]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{name}.jsonl", "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    csv_rows = [{k: v for k, v in row.items() if k != "raw"} for row in rows]
    with open(out_dir / f"{name}.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(csv_rows[0].keys()))
        writer.writeheader()
        writer.writerows(csv_rows)


def write_image_grid(path: Path | str, columns: Sequence[ImageBatch]) -> None:
    """PNG grid: one row per sample, one column per batch (e.g. input,
    translation, cycle reconstruction)."""
    from PIL import Image

    arrays = []
    for col in columns:
        arr = ((col.pixels.clamp(-1, 1) + 1) * 127.5).to(torch.uint8)
        arrays.append(arr.permute(0, 2, 3, 1).numpy())
    n = min(a.shape[0] for a in arrays)
    h, w = arrays[0].shape[1:3]
    pad = 2
    canvas = np.full((n * (h + pad) - pad, len(arrays) * (w + pad) - pad, 3),
                     255, dtype=np.uint8)
    for row in range(n):
        for col, arr in enumerate(arrays):
            y, x0 = row * (h + pad), col * (w + pad)
            canvas[y:y + h, x0:x0 + w] = arr[row]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(canvas).save(path)
