"""Synthetic digit datasets in the standard MNIST/SVHN archive formats.

The sandbox has no access to the public archives, so desk-scale experiments
render pixel-font digits instead: domain A mimics MNIST (white glyph on
black), domain B mimics SVHN (colored glyph on a colored, noisy background).
The files are written in the real archive formats so the production loaders
are exercised unchanged.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

# 5x7 pixel font, one row string per scanline
_DIGIT_FONT = {
    0: ["01110", "10001", "10011", "10101", "11001", "10001", "01110"],
    1: ["00100", "01100", "00100", "00100", "00100", "00100", "01110"],
    2: ["01110", "10001", "00001", "00010", "00100", "01000", "11111"],
    3: ["11111", "00010", "00100", "00010", "00001", "10001", "01110"],
    4: ["00010", "00110", "01010", "10010", "11111", "00010", "00010"],
    5: ["11111", "10000", "11110", "00001", "00001", "10001", "01110"],
    6: ["00110", "01000", "10000", "11110", "10001", "10001", "01110"],
    7: ["11111", "00001", "00010", "00100", "01000", "01000", "01000"],
    8: ["01110", "10001", "10001", "01110", "10001", "10001", "01110"],
    9: ["01110", "10001", "10001", "01111", "00001", "00010", "01100"],
}


def _glyph(digit: int) -> np.ndarray:
    rows = _DIGIT_FONT[digit]
    return np.array([[c == "1" for c in row] for row in rows], dtype=np.float32)


def _place_glyph(canvas_size: int, digit: int, rng: np.random.Generator,
                 scale: int) -> np.ndarray:
    """Return a (H, W) float mask in [0, 1] with the glyph jittered."""
    glyph = np.kron(_glyph(digit), np.ones((scale, scale), dtype=np.float32))
    gh, gw = glyph.shape
    canvas = np.zeros((canvas_size, canvas_size), dtype=np.float32)
    max_dy = canvas_size - gh
    max_dx = canvas_size - gw
    dy = rng.integers(max_dy // 2 - 1, max_dy // 2 + 2)
    dx = rng.integers(max_dx // 2 - 1, max_dx // 2 + 2)
    dy = int(np.clip(dy, 0, max_dy))
    dx = int(np.clip(dx, 0, max_dx))
    canvas[dy:dy + gh, dx:dx + gw] = glyph
    return canvas


def make_mnist_like(n: int, seed: int = 0, size: int = 28) -> tuple[np.ndarray, np.ndarray]:
    """White digits on black, (n, size, size) uint8 plus labels."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    scale = max(size // 9, 1)
    images = np.zeros((n, size, size), dtype=np.uint8)
    for i, label in enumerate(labels):
        mask = _place_glyph(size, int(label), rng, scale)
        brightness = rng.uniform(200, 255)
        img = mask * brightness + rng.normal(0, 4, (size, size))
        images[i] = np.clip(img, 0, 255).astype(np.uint8)
    return images, labels.astype(np.uint8)


def make_svhn_like(n: int, seed: int = 0, size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Colored digits on colored noisy backgrounds, (n, size, size, 3) uint8."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n)
    scale = max(size // 9, 1)
    images = np.zeros((n, size, size, 3), dtype=np.uint8)
    for i, label in enumerate(labels):
        mask = _place_glyph(size, int(label), rng, scale)[..., None]
        bg = rng.uniform(20, 110, size=3)
        fg = rng.uniform(150, 255, size=3)
        img = bg * (1 - mask) + fg * mask
        img = img + rng.normal(0, 12, (size, size, 3))
        images[i] = np.clip(img, 0, 255).astype(np.uint8)
    return images, labels.astype(np.uint8)


def write_mnist_idx(root: Path | str, images: np.ndarray, labels: np.ndarray,
                    split: str = "train") -> None:
    """Write gzip-compressed IDX files in the standard MNIST layout."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    prefix = "train" if split == "train" else "t10k"
    n, rows, cols = images.shape
    with gzip.open(root / f"{prefix}-images-idx3-ubyte.gz", "wb") as f:
        f.write(struct.pack(">iiii", 2051, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())
    with gzip.open(root / f"{prefix}-labels-idx1-ubyte.gz", "wb") as f:
        f.write(struct.pack(">ii", 2049, n))
        f.write(labels.astype(np.uint8).tobytes())


def write_svhn_mat(root: Path | str, images: np.ndarray, labels: np.ndarray,
                   split: str = "train") -> None:
    """Write a {split}_32x32.mat file in the standard SVHN layout."""
    from scipy.io import savemat

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    x = np.transpose(images, (1, 2, 3, 0))  # (32, 32, 3, N)
    y = labels.astype(np.int64).copy()
    y[y == 0] = 10  # SVHN convention: digit 0 stored as class 10
    savemat(str(root / f"{split}_32x32.mat"), {"X": x, "y": y[:, None]})


def materialize_digit_datasets(root: Path | str, n_train: int = 2000,
                               n_test: int = 500, seed: int = 0) -> dict[str, Path]:
    """Write mnist-like and svhn-like archives under root; returns the dirs."""
    root = Path(root)
    mnist_dir = root / "mnist"
    svhn_dir = root / "svhn"
    for split, n, offset in (("train", n_train, 0), ("test", n_test, 1)):
        images, labels = make_mnist_like(n, seed=seed + offset)
        write_mnist_idx(mnist_dir, images, labels, split)
        images, labels = make_svhn_like(n, seed=seed + 10 + offset)
        write_svhn_mat(svhn_dir, images, labels, split)
    return {"mnist": mnist_dir, "svhn": svhn_dir}
