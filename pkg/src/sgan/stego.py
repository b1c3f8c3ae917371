"""LSB and +-1 (LSB matching) payload embedding, extraction and distortion."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .imaging import Image

ALGORITHMS = ("lsb", "pm1")


class CapacityError(ValueError):
    pass


class PayloadMismatch(ValueError):
    pass


@dataclass(frozen=True)
class EmbedConfig:
    algorithm: str = "pm1"
    channel: int = 0
    rate: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown embedding algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if not 0.0 < self.rate <= 1.0:
            raise CapacityError(f"rate must be in (0, 1] bits per pixel, got {self.rate}")
        if self.channel < 0:
            raise ValueError(f"channel must be non-negative, got {self.channel}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def with_seed(self, seed: int) -> "EmbedConfig":
        return EmbedConfig(self.algorithm, self.channel, self.rate, int(seed))


@dataclass(frozen=True)
class BitPayload:
    bits: np.ndarray
    rate: Optional[float] = None

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=np.uint8).reshape(-1)
        if b.size and b.max() > 1:
            raise ValueError("payload bits must be 0 or 1")
        object.__setattr__(self, "bits", b)

    def __len__(self) -> int:
        return self.bits.size

    def __eq__(self, other) -> bool:
        return isinstance(other, BitPayload) and np.array_equal(self.bits, other.bits)


def bytes_to_bits(data: bytes, rate: Optional[float] = None) -> BitPayload:
    """MSB-first bit expansion of ``data``."""
    arr = np.frombuffer(bytes(data), dtype=np.uint8)
    return BitPayload(np.unpackbits(arr), rate)


def bits_to_bytes(payload: BitPayload) -> tuple[bytes, bool]:
    """Pack bits MSB-first.  The flag is True when trailing bits were zero-padded."""
    padded = len(payload) % 8 != 0
    return np.packbits(payload.bits).tobytes(), padded


def random_payload(n_bits: int, seed: int, rate: Optional[float] = None) -> BitPayload:
    return BitPayload(np.random.default_rng(seed).integers(0, 2, size=n_bits, dtype=np.uint8), rate)


def crc32(payload: BitPayload) -> int:
    return zlib.crc32(bits_to_bytes(payload)[0]) & 0xFFFFFFFF


# ---------------------------------------------------------------------------
# position selection


def capacity(image: Image, config: EmbedConfig) -> int:
    return math.floor(config.rate * image.width * image.height + 1e-9)


def _check_channel(image: Image, config: EmbedConfig) -> None:
    if config.channel >= image.channels:
        raise ValueError(f"channel {config.channel} out of range for a {image.channels}-channel image")


def _position_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0])


def _direction_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1])


def select_positions(image: Image, config: EmbedConfig, n_bits: Optional[int] = None) -> np.ndarray:
    """Flat (row-major) pixel indices on the embed channel, in embedding order.

    The order is a seeded permutation of all pixels truncated to ``n_bits``
    (default: the full capacity), so extraction only needs the seed.
    """
    _check_channel(image, config)
    cap = capacity(image, config)
    n = cap if n_bits is None else n_bits
    if n > cap:
        raise CapacityError(f"payload of {n} bits exceeds capacity {cap} ({config.rate} bpp on {image.width}x{image.height})")
    if n < 0:
        raise ValueError("n_bits must be non-negative")
    return _position_rng(config.seed).permutation(image.width * image.height)[:n]


# ---------------------------------------------------------------------------
# embedding


def embed_lsb(image: Image, payload: BitPayload, config: EmbedConfig) -> Image:
    pos = select_positions(image, config, len(payload))
    px = image.pixels.copy()
    plane = px[:, :, config.channel].reshape(-1)
    plane[pos] = (plane[pos] & 0xFE) | payload.bits
    px[:, :, config.channel] = plane.reshape(image.height, image.width)
    return Image(px)


def pm1_plane(plane: np.ndarray, positions: np.ndarray, bits: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """+-1 embed ``bits`` into flat uint8 ``plane`` at ``positions``; returns a new plane.

    One fair coin is drawn per position (used only where the LSB mismatches);
    0 is always raised to 1 and 255 always lowered to 254.
    """
    out = plane.copy()
    coins = rng.integers(0, 2, size=positions.size, dtype=np.int16) * 2 - 1
    vals = out[positions].astype(np.int16)
    mismatch = (vals & 1) != bits
    step = np.where(vals == 0, 1, np.where(vals == 255, -1, coins))
    vals = np.where(mismatch, vals + step, vals)
    out[positions] = vals.astype(np.uint8)
    return out


def embed_pm1(image: Image, payload: BitPayload, config: EmbedConfig) -> Image:
    pos = select_positions(image, config, len(payload))
    px = image.pixels.copy()
    plane = px[:, :, config.channel].reshape(-1)
    new = pm1_plane(plane, pos, payload.bits, _direction_rng(config.seed))
    px[:, :, config.channel] = new.reshape(image.height, image.width)
    return Image(px)


def embed(image: Image, payload: BitPayload, config: EmbedConfig) -> Image:
    if config.algorithm == "lsb":
        return embed_lsb(image, payload, config)
    return embed_pm1(image, payload, config)


def extract(image: Image, config: EmbedConfig, n_bits: int) -> BitPayload:
    pos = select_positions(image, config, n_bits)
    plane = image.pixels[:, :, config.channel].reshape(-1)
    return BitPayload(plane[pos] & 1, config.rate)


def embed_pm1_batch(pixels: np.ndarray, channel: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """+-1 embed fresh random bits into every image of a uint8 (N, C, H, W) batch.

    Bits, position keys and direction keys all come from ``rng``.
    """
    out = pixels.copy()
    n, _, h, w = pixels.shape
    n_bits = math.floor(rate * h * w + 1e-9)
    for i in range(n):
        bits = rng.integers(0, 2, size=n_bits, dtype=np.uint8)
        key = int(rng.integers(0, 2**62))
        pos = _position_rng(key).permutation(h * w)[:n_bits]
        plane = out[i, channel].reshape(-1)
        out[i, channel] = pm1_plane(plane, pos, bits, _direction_rng(key)).reshape(h, w)
    return out


# ---------------------------------------------------------------------------
# distortion


@dataclass(frozen=True)
class CostFunction:
    """Per-pixel change cost rho(X, i, j) >= 0 on a single 2-D plane.

    ``cost_map`` is an optional vectorised evaluator returning the whole
    H x W cost array at once; without it the scalar ``rho`` is looped.
    """

    name: str
    rho: Callable[[np.ndarray, int, int], float]
    cost_map: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def evaluate(self, plane: np.ndarray) -> np.ndarray:
        if self.cost_map is not None:
            costs = np.asarray(self.cost_map(plane), dtype=np.float64)
        else:
            h, w = plane.shape
            costs = np.array([[self.rho(plane, i, j) for j in range(w)] for i in range(h)], dtype=np.float64)
        if costs.shape != plane.shape:
            raise ValueError(f"cost {self.name!r} returned shape {costs.shape} for plane {plane.shape}")
        if not np.isfinite(costs).all() or (costs < 0).any():
            raise ValueError(f"cost {self.name!r} must be finite and non-negative")
        return costs


def constant_cost(value: float = 1.0) -> CostFunction:
    return CostFunction(
        f"constant({value})",
        lambda plane, i, j: value,
        lambda plane: np.full(plane.shape, float(value)),
    )


def distortion(cover: Image, stego: Image, cost: CostFunction) -> float:
    """Sum over pixels (and channels) of rho(cover) * |cover - stego|."""
    if cover.pixels.shape != stego.pixels.shape:
        raise ValueError(f"shape mismatch: {cover.pixels.shape} vs {stego.pixels.shape}")
    total = 0.0
    for c in range(cover.channels):
        x = cover.pixels[:, :, c]
        diff = np.abs(x.astype(np.int64) - stego.pixels[:, :, c].astype(np.int64))
        total += float(np.sum(cost.evaluate(x) * diff))
    return total


def select_positions_by_cost(image: Image, config: EmbedConfig, n_bits: int, cost: CostFunction) -> np.ndarray:
    """Greedy cost-minimising order: the ``n_bits`` cheapest pixels (stable ties).

    Extraction needs the returned positions, since costs computed on the
    stego image can differ from those on the cover.
    """
    _check_channel(image, config)
    cap = capacity(image, config)
    if n_bits > cap:
        raise CapacityError(f"payload of {n_bits} bits exceeds capacity {cap}")
    costs = cost.evaluate(image.pixels[:, :, config.channel]).reshape(-1)
    return np.argsort(costs, kind="stable")[:n_bits]


def embed_pm1_at(image: Image, payload: BitPayload, config: EmbedConfig, positions: np.ndarray) -> Image:
    px = image.pixels.copy()
    plane = px[:, :, config.channel].reshape(-1)
    new = pm1_plane(plane, np.asarray(positions), payload.bits, _direction_rng(config.seed))
    px[:, :, config.channel] = new.reshape(image.height, image.width)
    return Image(px)


# ---------------------------------------------------------------------------
# manifests


MANIFEST_VERSION = 1


def write_stego_manifest(path, image: Image, payload: BitPayload, config: EmbedConfig) -> dict:
    record = {
        "format_version": MANIFEST_VERSION,
        **asdict(config),
        "n_bits": len(payload),
        "crc32": crc32(payload),
        "width": image.width,
        "height": image.height,
        "channels": image.channels,
    }
    Path(path).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return record


def read_stego_manifest(path) -> tuple[EmbedConfig, dict]:
    record = json.loads(Path(path).read_text())
    config = EmbedConfig(record["algorithm"], record["channel"], record["rate"], record["seed"])
    return config, record


def extract_with_manifest(image: Image, manifest: dict, config: EmbedConfig) -> BitPayload:
    dims = (manifest["height"], manifest["width"], manifest["channels"])
    if image.pixels.shape != dims:
        raise PayloadMismatch(f"image is {image.pixels.shape}, manifest expects {dims}")
    payload = extract(image, config, manifest["n_bits"])
    if crc32(payload) != manifest["crc32"]:
        raise PayloadMismatch("extracted payload fails the manifest checksum (wrong seed or altered image)")
    return payload
