"""Dataset ingestion, augmentation, and deterministic batch iteration.

Images live in [-1, 1] as float tensors of shape (N, 3, H, W). Grayscale
sources are replicated to 3 channels so a single network spec serves every
supported dataset.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DataError

SUPPORTED_RESOLUTIONS = (32, 256)
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")


@dataclass
class ImageBatch:
    """A batch of images plus its domain tag.

    pixels: (N, 3, H, W) float tensor, values in [-1, 1], H == W.
    domain: "A" or "B".
    labels: optional integer class labels, shape (N,).
    """

    pixels: torch.Tensor
    domain: str
    labels: Optional[torch.Tensor] = None

    def __post_init__(self) -> None:
        if self.pixels.dim() != 4:
            raise ValueError(f"pixels must be 4-axis, got {self.pixels.dim()}")
        if self.domain not in ("A", "B"):
            raise ValueError(f"domain must be 'A' or 'B', got {self.domain!r}")
        if self.pixels.shape[2] != self.pixels.shape[3]:
            raise ValueError("images must be square")

    @property
    def size(self) -> tuple[int, int]:
        return (self.pixels.shape[2], self.pixels.shape[3])

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def validate(self) -> None:
        if self.pixels.shape[1] != 3:
            raise ValueError("expected 3 channels")
        if self.pixels.min() < -1.0 or self.pixels.max() > 1.0:
            raise ValueError("pixel values outside [-1, 1]")


@dataclass
class AugmentationSpec:
    """Small random rotation plus random horizontal translation.

    Zero ranges make the operator the identity on pixels. The seed fixes
    the draw stream when no explicit generator is supplied.
    """

    max_rotation_deg: float = 5.0
    max_translation_frac: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_rotation_deg < 0:
            raise ValueError("max_rotation_deg must be >= 0")
        if not 0 <= self.max_translation_frac <= 0.5:
            raise ValueError("max_translation_frac must be in [0, 0.5]")


def apply_affine(pixels: torch.Tensor, angles_deg: torch.Tensor,
                 offsets_px: torch.Tensor) -> torch.Tensor:
    """Rotate each image about its center and shift it horizontally.

    offsets_px are whole pixels (positive = content moves right); out-of-frame
    regions are filled by edge replication.
    """
    n, _, h, w = pixels.shape
    rad = angles_deg.to(pixels.dtype) * math.pi / 180.0
    cos, sin = torch.cos(rad), torch.sin(rad)
    theta = torch.zeros(n, 2, 3, dtype=pixels.dtype)
    theta[:, 0, 0] = cos
    theta[:, 0, 1] = -sin
    theta[:, 1, 0] = sin
    theta[:, 1, 1] = cos
    # affine_grid maps output coords to input coords; shifting content right
    # by k pixels means sampling the input k pixels to the left.
    theta[:, 0, 2] = -2.0 * offsets_px.to(pixels.dtype) / max(w - 1, 1)
    grid = F.affine_grid(theta, list(pixels.shape), align_corners=True)
    out = F.grid_sample(pixels, grid, mode="bilinear",
                        padding_mode="border", align_corners=True)
    return out.clamp(-1.0, 1.0)


def augment(batch: ImageBatch, spec: AugmentationSpec,
            generator: Optional[torch.Generator] = None) -> ImageBatch:
    """Apply the random rotation/translation operator to every image.

    Pure given the generator state; the domain tag, labels, and batch size
    are preserved. Zero ranges return a bitwise-identical copy.
    """
    if spec.max_rotation_deg == 0 and spec.max_translation_frac == 0:
        return ImageBatch(batch.pixels.clone(), batch.domain, batch.labels)
    if generator is None:
        generator = torch.Generator().manual_seed(spec.seed)
    n = len(batch)
    w = batch.pixels.shape[3]
    angles = (torch.rand(n, generator=generator) * 2 - 1) * spec.max_rotation_deg
    fracs = (torch.rand(n, generator=generator) * 2 - 1) * spec.max_translation_frac
    offsets = torch.round(fracs * w)
    pixels = apply_affine(batch.pixels, angles, offsets)
    return ImageBatch(pixels, batch.domain, batch.labels)


@dataclass
class DomainDataset:
    """Declarative description of one domain's data source."""

    source: str  # "mnist" | "svhn" | "image-folder"
    root: str
    split: str = "train"
    resolution: int = 32
    domain: str = "B"
    limit: Optional[int] = None  # cap the number of items, for desk-scale runs

    def __post_init__(self) -> None:
        if self.source not in ("mnist", "svhn", "image-folder"):
            raise ValueError(f"unknown source {self.source!r}")
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        if self.resolution not in SUPPORTED_RESOLUTIONS:
            raise ValueError(f"unsupported resolution {self.resolution}")


class LoadedDataset:
    """An in-memory dataset with a deterministic iteration order."""

    def __init__(self, images: torch.Tensor, labels: Optional[torch.Tensor],
                 domain: str):
        self.images = images
        self.labels = labels
        self.domain = domain

    def __len__(self) -> int:
        return self.images.shape[0]

    def batch(self, indices: Sequence[int]) -> ImageBatch:
        idx = torch.as_tensor(list(indices), dtype=torch.long)
        labels = self.labels[idx] if self.labels is not None else None
        return ImageBatch(self.images[idx], self.domain, labels)

    def batches(self, batch_size: int, seed: int = 0,
                epochs: Optional[int] = None) -> Iterator[ImageBatch]:
        """Yield shuffled batches; order is a pure function of seed."""
        n = len(self)
        epoch = 0
        while epochs is None or epoch < epochs:
            g = torch.Generator().manual_seed(seed * 1_000_003 + epoch)
            order = torch.randperm(n, generator=g)
            for start in range(0, n, batch_size):
                yield self.batch(order[start:start + batch_size].tolist())
            epoch += 1

    def one_shot(self, index: Optional[int] = None, seed: int = 0,
                 count: int = 1) -> ImageBatch:
        """Draw `count` items; deterministic given (index, seed)."""
        n = len(self)
        if n == 0:
            raise DataError("dataset is empty")
        if index is not None:
            if not 0 <= index < n:
                raise DataError(f"index {index} out of range [0, {n})")
            idx = [(index + i) % n for i in range(count)]
        else:
            g = torch.Generator().manual_seed(seed)
            idx = torch.randperm(n, generator=g)[:count].tolist()
        return self.batch(idx)


def _resize(images: torch.Tensor, resolution: int) -> torch.Tensor:
    if images.shape[2] == resolution:
        return images
    out = F.interpolate(images, size=(resolution, resolution),
                        mode="bilinear", align_corners=False)
    return out.clamp(-1.0, 1.0)


def _normalize_uint8(arr: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(arr.astype(np.float32)) / 127.5 - 1.0


def _read_idx(path: Path) -> np.ndarray:
    opener = gzip.open if path.suffix == ".gz" else open
    try:
        with opener(path, "rb") as f:
            magic, = struct.unpack(">i", f.read(4))
            if magic == 2051:
                n, rows, cols = struct.unpack(">iii", f.read(12))
                data = np.frombuffer(f.read(), dtype=np.uint8)
                return data.reshape(n, rows, cols)
            if magic == 2049:
                n, = struct.unpack(">i", f.read(4))
                return np.frombuffer(f.read(), dtype=np.uint8)[:n]
            raise DataError(f"corrupt IDX file (bad magic {magic}): {path}")
    except (OSError, struct.error, ValueError) as exc:
        raise DataError(f"corrupt IDX file: {path} ({exc})") from exc


def _find_first(root: Path, names: Sequence[str]) -> Path:
    for name in names:
        candidate = root / name
        if candidate.exists():
            return candidate
    raise DataError(f"no dataset file found under {root} "
                    f"(searched for {', '.join(names)})")


def _load_mnist(cfg: DomainDataset) -> tuple[np.ndarray, np.ndarray]:
    root = Path(cfg.root)
    prefix = "train" if cfg.split == "train" else "t10k"
    images_path = _find_first(root, [f"{prefix}-images-idx3-ubyte.gz",
                                     f"{prefix}-images-idx3-ubyte"])
    labels_path = _find_first(root, [f"{prefix}-labels-idx1-ubyte.gz",
                                     f"{prefix}-labels-idx1-ubyte"])
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    # grayscale replicated to 3 channels
    images = np.repeat(images[:, None, :, :], 3, axis=1)
    return images, labels


def _load_svhn(cfg: DomainDataset) -> tuple[np.ndarray, np.ndarray]:
    from scipy.io import loadmat

    root = Path(cfg.root)
    path = _find_first(root, [f"{cfg.split}_32x32.mat"])
    try:
        mat = loadmat(str(path))
        images = mat["X"]  # (32, 32, 3, N)
        labels = mat["y"].ravel().astype(np.int64)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"corrupt SVHN file: {path} ({exc})") from exc
    labels = np.where(labels == 10, 0, labels)
    images = np.transpose(images, (3, 2, 0, 1))  # (N, 3, 32, 32)
    return images, labels


def _load_image_folder(cfg: DomainDataset) -> tuple[np.ndarray, Optional[np.ndarray]]:
    from PIL import Image

    root = Path(cfg.root)
    if not root.is_dir():
        raise DataError(f"image folder not found: {root}")
    paths = sorted(p for p in root.iterdir()
                   if p.suffix.lower() in IMAGE_EXTENSIONS)
    if not paths:
        raise DataError(f"no images found under {root} "
                        f"(extensions {', '.join(IMAGE_EXTENSIONS)})")
    images, labels = [], []
    for p in paths:
        try:
            with Image.open(p) as img:
                arr = np.asarray(img.convert("RGB"))
        except OSError as exc:
            raise DataError(f"corrupt image file: {p} ({exc})") from exc
        images.append(np.transpose(arr, (2, 0, 1)))
        # label from a "<digit(s)>_" filename prefix, when every file has one
        stem = p.stem.split("_", 1)[0]
        labels.append(int(stem) if stem.isdigit() else -1)
    label_arr: Optional[np.ndarray] = np.asarray(labels, dtype=np.int64)
    if (label_arr < 0).any():
        label_arr = None
    return np.stack(images), label_arr


def load_domain(cfg: DomainDataset) -> LoadedDataset:
    """Load a domain's images into memory, normalized and resized."""
    if cfg.source == "mnist":
        images, labels = _load_mnist(cfg)
    elif cfg.source == "svhn":
        images, labels = _load_svhn(cfg)
    else:
        images, labels = _load_image_folder(cfg)
    pixels = _resize(_normalize_uint8(images), cfg.resolution)
    label_t = (torch.from_numpy(labels.astype(np.int64))
               if labels is not None else None)
    if cfg.limit is not None:
        pixels = pixels[:cfg.limit]
        label_t = label_t[:cfg.limit] if label_t is not None else None
    return LoadedDataset(pixels, label_t, cfg.domain)


def draw_one_shot(cfg: DomainDataset, index: Optional[int] = None,
                  seed: int = 0, count: int = 1) -> ImageBatch:
    """Draw the (few-)shot sample(s) for the source domain."""
    return load_domain(cfg).one_shot(index=index, seed=seed, count=count)
