"""8-bit images, lossless file I/O, synthetic texture corpora and dataset splits."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image as PILImage

LOSSLESS_SUFFIXES = {".png", ".bmp", ".ppm", ".pgm", ".tif", ".tiff"}
LOSSY_FORMATS = {"JPEG", "JPEG2000", "MPO", "WEBP", "HEIF", "AVIF"}
LOSSY_SUFFIXES = {".jpg", ".jpeg", ".jpe", ".jfif", ".jp2", ".webp", ".heic", ".avif"}


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Image:
    """H x W x C uint8 pixel grid (row-major, channel-interleaved)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"image must be HxWx1 or HxWx3, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError("image dimensions must be positive")
        if px.dtype != np.uint8:
            if px.min(initial=0) < 0 or px.max(initial=0) > 255:
                raise ValueError("pixel values must lie in [0, 255]")
            px = px.astype(np.uint8)
        object.__setattr__(self, "pixels", np.ascontiguousarray(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    def __eq__(self, other) -> bool:
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)

    def __hash__(self) -> int:
        return hash((self.pixels.shape, self.pixels.tobytes()))


@dataclass
class Dataset:
    items: list[Image]
    labels: Optional[list[int]] = None
    split_seed: Optional[int] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.labels is not None and len(self.labels) != len(self.items):
            raise ValueError(f"{len(self.labels)} labels for {len(self.items)} items")

    def __len__(self) -> int:
        return len(self.items)


# ---------------------------------------------------------------------------
# file I/O


def check_lossless_path(path: Path) -> None:
    suffix = path.suffix.lower()
    if suffix in LOSSY_SUFFIXES:
        raise ImageFormatError(f"{path}: {suffix[1:].upper()} is a lossy format; stego containers need a lossless one")
    if suffix not in LOSSLESS_SUFFIXES:
        raise ImageFormatError(f"{path}: unsupported image suffix {suffix!r} (use one of {sorted(LOSSLESS_SUFFIXES)})")


def save_image(image: Image, path) -> None:
    path = Path(path)
    check_lossless_path(path)
    px = image.pixels
    pil = PILImage.fromarray(px[:, :, 0] if image.channels == 1 else px, mode="L" if image.channels == 1 else "RGB")
    pil.save(path)


def load_image(path) -> Image:
    path = Path(path)
    if path.suffix.lower() in LOSSY_SUFFIXES:
        check_lossless_path(path)
    try:
        with PILImage.open(path) as pil:
            fmt = pil.format
            if fmt in LOSSY_FORMATS:
                raise ImageFormatError(f"{path}: {fmt} is a lossy format; stego containers need a lossless one")
            if pil.mode in ("L", "RGB"):
                arr = np.array(pil)
            elif pil.mode in ("P", "RGBA", "LA", "1"):
                arr = np.array(pil.convert("L" if pil.mode in ("LA", "1") else "RGB"))
            else:
                raise ImageFormatError(f"{path}: unsupported pixel mode {pil.mode!r}")
    except ImageFormatError:
        raise
    except (OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: unreadable image ({exc})") from exc
    return Image(arr)


# ---------------------------------------------------------------------------
# geometry


def center_crop(image: Image, size: int = 64) -> Image:
    if image.height < size or image.width < size:
        raise ValueError(f"cannot crop {image.height}x{image.width} image to {size}x{size}")
    top = (image.height - size) // 2
    left = (image.width - size) // 2
    return Image(image.pixels[top : top + size, left : left + size].copy())


# ---------------------------------------------------------------------------
# tensor bridge


def to_array(images: list[Image]) -> np.ndarray:
    """Images -> float64 (N, C, H, W) in [-1, 1] via x / 127.5 - 1."""
    stack = np.stack([im.pixels for im in images]).astype(np.float64)
    return stack.transpose(0, 3, 1, 2) / 127.5 - 1.0


def to_uint8(arr: np.ndarray) -> np.ndarray:
    """Inverse of the bridge: round((x + 1) * 127.5) clamped to [0, 255]; keeps NCHW."""
    return np.clip(np.floor((arr + 1.0) * 127.5 + 0.5), 0, 255).astype(np.uint8)


def from_array(arr: np.ndarray) -> list[Image]:
    px = to_uint8(arr).transpose(0, 2, 3, 1)
    return [Image(p) for p in px]


# ---------------------------------------------------------------------------
# corpora


def synth_texture(rng: np.random.Generator, size: int, channels: int = 3,
                  n_waves: int = 4, noise: float = 0.5) -> np.ndarray:
    """One smooth random texture: low-frequency sinusoids plus Gaussian noise.

    Channels share the wave pattern with individual gains and offsets, which
    gives the inter-channel correlation of natural photos.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    base = np.zeros((size, size))
    for _ in range(n_waves):
        fy, fx = rng.uniform(-2.0, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(10.0, 35.0)
        base += amp * np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
    out = np.empty((size, size, channels))
    for c in range(channels):
        gain = rng.uniform(0.7, 1.3)
        offset = rng.uniform(90.0, 165.0)
        out[:, :, c] = offset + gain * base + rng.normal(0.0, noise, size=(size, size))
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def synth_corpus(n: int, size: int = 16, seed: int = 0, channels: int = 3,
                 n_waves: int = 4, noise: float = 0.5) -> Dataset:
    if n < 1:
        raise ValueError(f"corpus size must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    items = [Image(synth_texture(rng, size, channels, n_waves, noise)) for _ in range(n)]
    return Dataset(items, meta={"source": "synthetic", "seed": seed, "size": size, "noise": noise})


def load_directory(path, size: int = 64) -> Dataset:
    """Every lossless image under ``path`` (sorted), center-cropped to ``size``."""
    files = sorted(p for p in Path(path).rglob("*") if p.suffix.lower() in LOSSLESS_SUFFIXES)
    if not files:
        raise FileNotFoundError(f"no lossless images under {path}")
    return Dataset([center_crop(load_image(f), size) for f in files], meta={"source": str(path)})


def split(dataset: Dataset, test_fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    n = len(dataset)
    n_test = int(round(n * test_fraction))
    order = np.random.default_rng(seed).permutation(n)
    test_idx, train_idx = order[:n_test], order[n_test:]

    def take(idx):
        labels = None if dataset.labels is None else [dataset.labels[i] for i in idx]
        return Dataset([dataset.items[i] for i in idx], labels, split_seed=seed, meta=dict(dataset.meta))

    return take(train_idx), take(test_idx)


# ---------------------------------------------------------------------------
# manifests


def write_manifest(dataset: Dataset, directory, prefix: str = "img") -> Path:
    """Save every item as PNG under ``directory`` and list ``path<TAB>label`` lines."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, im in enumerate(dataset.items):
        name = f"{prefix}_{i:06d}.png"
        save_image(im, directory / name)
        label = "" if dataset.labels is None else str(dataset.labels[i])
        lines.append(f"{name}\t{label}")
    manifest = directory / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> Dataset:
    path = Path(path)
    items, labels = [], []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        name, _, label = line.partition("\t")
        items.append(load_image(path.parent / name))
        labels.append(int(label) if label.strip() else None)
    has_labels = all(lbl is not None for lbl in labels)
    return Dataset(items, labels if has_labels and labels else None)
