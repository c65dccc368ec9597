"""Binary PGM files, additive Gaussian noise, patch sampling and the bundled desk dataset."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor


class PGMFormatError(ValueError):
    pass


@dataclass
class ImageU8:
    width: int
    height: int
    pixels: np.ndarray  # (height, width) uint8, row-major

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be positive")
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8:
            raise ValueError(f"pixels must be uint8, got {px.dtype}")
        if px.size != self.width * self.height:
            raise ValueError(f"{px.size} pixels for a {self.width}x{self.height} image")
        self.pixels = px.reshape(self.height, self.width)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> ImageU8:
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise ValueError("expected a 2-D array")
        return cls(arr.shape[1], arr.shape[0], arr.astype(np.uint8))

    @classmethod
    def from_float(cls, arr: np.ndarray) -> ImageU8:
        """Quantize a [0, 1] float image, clipping out-of-range values."""
        q = np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
        return cls.from_array(q)

    def to_float(self) -> np.ndarray:
        return self.pixels.astype(np.float32) / np.float32(255.0)


_HEADER = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(path) -> ImageU8:
    """Read a binary (P5) PGM with maxval 255."""
    blob = Path(path).read_bytes()
    pos, fields = 0, []
    for _ in range(4):
        m = _HEADER.match(blob, pos)
        if not m:
            raise PGMFormatError(f"{path}: malformed PGM header")
        fields.append(m.group(1))
        pos = m.end()
        if fields[0] != b"P5":
            break
    magic = fields[0]
    if magic == b"P2":
        raise PGMFormatError(f"{path}: ASCII PGM (P2) is not supported; convert to binary P5")
    if magic != b"P5":
        raise PGMFormatError(f"{path}: not a PGM file (magic {magic[:8]!r})")
    if len(fields) < 4:
        raise PGMFormatError(f"{path}: malformed PGM header")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise PGMFormatError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise PGMFormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    if width < 1 or height < 1:
        raise PGMFormatError(f"{path}: bad dimensions {width}x{height}")
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise PGMFormatError(f"{path}: malformed PGM header")
    data = blob[pos + 1 :]
    if len(data) < width * height:
        raise PGMFormatError(f"{path}: truncated payload ({len(data)} of {width * height} bytes)")
    px = np.frombuffer(data[: width * height], dtype=np.uint8).reshape(height, width).copy()
    return ImageU8(width, height, px)


def write_pgm(img: ImageU8, path) -> None:
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(img.pixels, dtype=np.uint8).tobytes())


@dataclass(frozen=True)
class NoiseModel:
    sigma_8bit: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if not self.sigma_8bit > 0:
            raise ValueError("sigma_8bit must be positive")


def add_gaussian_noise(img: ImageU8, model: NoiseModel) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(clean, noisy)`` float32 arrays in [0, 1] scale; noise is not clipped."""
    clean = img.to_float()
    rng = np.random.default_rng(model.seed)
    noise = rng.standard_normal(clean.shape) * (model.sigma_8bit / 255.0)
    return clean, (clean + noise).astype(np.float32)


def noisy_pairs(images: Sequence[ImageU8], sigma_8bit: float, seed) -> list[tuple[np.ndarray, np.ndarray]]:
    """Independent noise per image, all derived from one seed."""
    seeds = np.random.SeedSequence(seed).generate_state(len(images), dtype=np.uint64)
    return [add_gaussian_noise(im, NoiseModel(sigma_8bit, int(s))) for im, s in zip(images, seeds)]


def sample_patches(pairs: Sequence[tuple[np.ndarray, np.ndarray]], patch: int, count: int,
                   seed) -> tuple[Tensor, Tensor]:
    """Draw ``count`` aligned crops (with replacement) as ``(clean, noisy)`` batches."""
    if patch < 8 or patch % 8:
        raise ValueError(f"patch {patch} must be a positive multiple of 8")
    if not pairs:
        raise ValueError("no images to sample from")
    for clean, _ in pairs:
        if clean.shape[0] < patch or clean.shape[1] < patch:
            raise ValueError(f"image {clean.shape} is smaller than patch {patch}")
    rng = np.random.default_rng(seed)
    cb = np.empty((count, 1, patch, patch), dtype=np.float32)
    nb = np.empty_like(cb)
    for i in range(count):
        clean, noisy = pairs[int(rng.integers(len(pairs)))]
        top = int(rng.integers(clean.shape[0] - patch + 1))
        left = int(rng.integers(clean.shape[1] - patch + 1))
        cb[i, 0] = clean[top : top + patch, left : left + patch]
        nb[i, 0] = noisy[top : top + patch, left : left + patch]
    return Tensor(cb), Tensor(nb)


# ---------------------------------------------------------------------------
# synthetic desk dataset


def _pattern(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    if kind == 0:  # linear ramp at a random angle
        th = rng.uniform(0, 2 * np.pi)
        img = np.cos(th) * xx + np.sin(th) * yy
    elif kind == 1:  # smooth blobs
        img = np.zeros_like(xx)
        for _ in range(4):
            cy, cx, s = rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.08, 0.25)
            img += rng.uniform(0.5, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    elif kind == 2:  # low-frequency stripes
        th, f = rng.uniform(0, np.pi), rng.uniform(2, 5)
        img = np.sin(2 * np.pi * f * (np.cos(th) * xx + np.sin(th) * yy) + rng.uniform(0, 2 * np.pi))
    else:  # piecewise-constant rectangles with blurred edges
        img = np.full_like(xx, rng.uniform(0.2, 0.4))
        for _ in range(3):
            y0, x0 = rng.uniform(0, 0.6, size=2)
            h, w = rng.uniform(0.2, 0.4, size=2)
            mask = (yy >= y0) & (yy < y0 + h) & (xx >= x0) & (xx < x0 + w)
            img[mask] = rng.uniform(0.5, 0.9)
        k = np.array([1, 4, 6, 4, 1], dtype=np.float64) / 16
        for axis in (0, 1):
            img = sum(k[i] * np.roll(img, i - 2, axis=axis) for i in range(5))
    lo, hi = img.min(), img.max()
    span = hi - lo if hi > lo else 1.0
    return 0.1 + 0.8 * (img - lo) / span


def synthetic_images(count: int = 16, size: int = 64, seed: int = 0) -> list[ImageU8]:
    """Deterministic gradient and texture images cycling through four pattern families."""
    rng = np.random.default_rng(seed)
    return [ImageU8.from_float(_pattern(i % 4, size, rng)) for i in range(count)]


def load_manifest(path) -> list[ImageU8]:
    """Load the images listed (relative to the manifest) in a JSON manifest."""
    path = Path(path)
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(entries, list) or not all(isinstance(e, str) for e in entries):
        raise ValueError(f"manifest {path} must be a JSON list of file paths")
    return [read_pgm(path.parent / e) for e in entries]


def bundled_manifest() -> Path:
    return Path(str(resources.files("modnas") / "data" / "desk" / "manifest.json"))


def bundled_images() -> list[ImageU8]:
    """The 16 bundled 64x64 synthetic images."""
    return load_manifest(bundled_manifest())
