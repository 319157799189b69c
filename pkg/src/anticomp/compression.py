"""Frame-level block-DCT quantization used to emulate weak/strong video compression."""

from __future__ import annotations

import numpy as np
from scipy.fft import dctn, idctn

from anticomp.core import (
    CompressionKind,
    CompressionLevel,
    FrameImage,
    InvalidArgumentError,
)

DEFAULT_WEAK_QUALITY = 80
DEFAULT_STRONG_QUALITY = 25

# JPEG Annex K luminance table.
BASE_LUMINANCE_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.int64,
)


def quant_table_for_quality(quality: int) -> np.ndarray:
    """8x8 integer quantization table for a JPEG-style quality in [1, 100]."""
    if isinstance(quality, bool) or int(quality) != quality or not 1 <= quality <= 100:
        raise InvalidArgumentError(f"quality must be an integer in [1, 100], got {quality!r}")
    quality = int(quality)
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    table = np.floor(BASE_LUMINANCE_TABLE * scale / 100 + 0.5)
    return np.clip(table, 1, 255).astype(np.int64)


def quality_for_level(
    level: CompressionLevel,
    weak_quality: int = DEFAULT_WEAK_QUALITY,
    strong_quality: int = DEFAULT_STRONG_QUALITY,
) -> int:
    if level.kind is CompressionKind.RAW:
        raise InvalidArgumentError("RAW has no quality setting")
    if level.kind is CompressionKind.WEAK:
        return int(weak_quality)
    if level.kind is CompressionKind.STRONG:
        return int(strong_quality)
    return int(level.quality)


def _roundtrip_blocks(blocks: np.ndarray, table: np.ndarray) -> np.ndarray:
    # blocks: (..., 8, 8), centered to [-128, 127]
    coeffs = dctn(blocks, type=2, axes=(-2, -1), norm="ortho")
    coeffs = np.round(coeffs / table) * table
    out = idctn(coeffs, type=2, axes=(-2, -1), norm="ortho")
    return np.clip(out, -128.0, 127.0)


def dct_roundtrip_block(block: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Quantize one centered 8x8 block through the DCT and back."""
    block = np.asarray(block, dtype=np.float64)
    if block.shape != (8, 8):
        raise InvalidArgumentError(f"expected an 8x8 block, got {block.shape}")
    return _roundtrip_blocks(block, np.asarray(table, dtype=np.float64))


def compress_pixels(pixels: np.ndarray, quality: int) -> np.ndarray:
    """Compress an ``(H, W, 3)`` array in [0, 1]; returns float32 in [0, 1]."""
    h, w, c = pixels.shape
    if h % 8 or w % 8:
        raise InvalidArgumentError(f"frame size {h}x{w} is not a multiple of 8")
    table = quant_table_for_quality(quality).astype(np.float64)
    x = np.asarray(pixels, dtype=np.float64) * 255.0 - 128.0
    blocks = x.reshape(h // 8, 8, w // 8, 8, c).transpose(0, 2, 4, 1, 3)
    out = _roundtrip_blocks(blocks, table)
    out = out.transpose(0, 3, 1, 4, 2).reshape(h, w, c)
    return ((out + 128.0) / 255.0).clip(0.0, 1.0).astype(np.float32)


def compress_frame(
    frame: FrameImage,
    level: CompressionLevel,
    weak_quality: int = DEFAULT_WEAK_QUALITY,
    strong_quality: int = DEFAULT_STRONG_QUALITY,
) -> FrameImage:
    if level.kind is CompressionKind.RAW:
        return frame
    quality = quality_for_level(level, weak_quality, strong_quality)
    return FrameImage(compress_pixels(frame.pixels, quality), frame.source_id, frame.frame_index)


def high_frequency_energy(pixels: np.ndarray, cutoff: int = 4) -> float:
    """Sum of squared block-DCT coefficients with ``u + v >= cutoff``."""
    h, w, c = pixels.shape
    x = np.asarray(pixels, dtype=np.float64) * 255.0 - 128.0
    blocks = x.reshape(h // 8, 8, w // 8, 8, c).transpose(0, 2, 4, 1, 3)
    coeffs = dctn(blocks, type=2, axes=(-2, -1), norm="ortho")
    u, v = np.meshgrid(np.arange(8), np.arange(8), indexing="ij")
    return float((coeffs[..., (u + v) >= cutoff] ** 2).sum())
