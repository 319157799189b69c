"""Shared domain types, error classes and seeded randomness."""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass

import numpy as np
import torch


class AntiCompError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(AntiCompError, ValueError):
    pass


class InvalidStateError(AntiCompError, RuntimeError):
    pass


class DegenerateInputError(InvalidArgumentError):
    """Raised when an embedding has zero norm where a direction is required."""


class DatasetError(AntiCompError):
    pass


class TrainingDivergedError(AntiCompError, RuntimeError):
    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot


class Label(enum.IntEnum):
    REAL = 0
    FAKE = 1

    @classmethod
    def from_name(cls, name: str) -> "Label":
        try:
            return cls[name.upper()]
        except KeyError:
            raise InvalidArgumentError(f"unknown label {name!r}") from None


class CompressionKind(str, enum.Enum):
    RAW = "raw"
    WEAK = "weak"
    STRONG = "strong"
    EXPLICIT = "explicit"


@dataclass(frozen=True, order=True)
class CompressionLevel:
    kind: CompressionKind
    quality: int | None = None

    def __post_init__(self):
        if self.kind is CompressionKind.EXPLICIT:
            if self.quality is None or not 1 <= int(self.quality) <= 100:
                raise InvalidArgumentError(f"explicit quality must be in [1, 100], got {self.quality}")
        elif self.quality is not None:
            raise InvalidArgumentError(f"{self.kind.value} level takes no quality")

    @classmethod
    def explicit(cls, quality: int) -> "CompressionLevel":
        return cls(CompressionKind.EXPLICIT, int(quality))

    @classmethod
    def parse(cls, text: str | int) -> "CompressionLevel":
        """Parse ``raw``/``weak``/``strong`` (or ``c23``/``c40``) or an integer quality."""
        if isinstance(text, CompressionLevel):
            return text
        s = str(text).strip().lower().rstrip("%")
        aliases = {"raw": RAW, "weak": WEAK, "c23": WEAK, "strong": STRONG, "c40": STRONG}
        if s in aliases:
            return aliases[s]
        try:
            return cls.explicit(int(s))
        except ValueError:
            raise InvalidArgumentError(f"cannot parse compression level {text!r}") from None

    @property
    def name(self) -> str:
        if self.kind is CompressionKind.EXPLICIT:
            return str(self.quality)
        return self.kind.value

    def __str__(self) -> str:
        return self.name


RAW = CompressionLevel(CompressionKind.RAW)
WEAK = CompressionLevel(CompressionKind.WEAK)
STRONG = CompressionLevel(CompressionKind.STRONG)


@dataclass(frozen=True, eq=False)
class FrameImage:
    """One face crop: ``pixels`` is an ``(H, W, 3)`` float array in [0, 1]."""

    pixels: np.ndarray
    source_id: str = ""
    frame_index: int = 0

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise InvalidArgumentError(f"expected (H, W, 3) pixels, got shape {px.shape}")
        h, w = px.shape[:2]
        if h <= 0 or w <= 0 or h % 8 or w % 8:
            raise InvalidArgumentError(f"frame size {h}x{w} is not a positive multiple of 8")
        if px.min() < 0.0 or px.max() > 1.0:
            raise InvalidArgumentError("pixel values outside [0, 1]")
        if self.frame_index < 0:
            raise InvalidArgumentError("frame_index must be >= 0")
        px.setflags(write=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


def _tag_entropy(tag: str) -> int:
    return int.from_bytes(hashlib.sha256(tag.encode("utf-8")).digest()[:8], "little")


def seeded_rng(seed: int, stream_tag: str) -> np.random.Generator:
    """Deterministic numpy stream keyed by ``(seed, stream_tag)``."""
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise InvalidArgumentError("seed must be a 64-bit unsigned integer")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _tag_entropy(stream_tag)])))


def derive_seed(seed: int, stream_tag: str) -> int:
    """A 63-bit integer seed for libraries that want a plain int (e.g. torch)."""
    return int(seeded_rng(seed, stream_tag).integers(0, 2**63 - 1))


def torch_generator(seed: int, stream_tag: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, stream_tag))
    return g


def normalize(x, dim: int = -1):
    """L2-normalize along ``dim``. Zero vectors stay zero rather than becoming NaN.

    Works on numpy arrays and torch tensors; callers that need a direction
    should check :func:`is_degenerate` first.
    """
    if isinstance(x, torch.Tensor):
        norm = x.norm(dim=dim, keepdim=True)
        return x / torch.where(norm > 0, norm, torch.ones_like(norm))
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=dim, keepdims=True)
    return x / np.where(norm > 0, norm, 1.0)


def is_degenerate(x, dim: int = -1) -> bool:
    if isinstance(x, torch.Tensor):
        return bool((x.norm(dim=dim) == 0).any())
    return bool((np.linalg.norm(np.asarray(x), axis=dim) == 0).any())
