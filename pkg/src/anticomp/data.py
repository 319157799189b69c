"""Dataset manifests, intra-video pair sampling, view construction and the
synthetic splice dataset used for desk-scale experiments.

On-disk layout::

    root/<split>/<real|fake>/<clip_id>/<frame_index>.png
    root_c23/...   optional pre-compressed weak frames, same layout
    root_c40/...   optional pre-compressed strong frames
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from anticomp.compression import (
    DEFAULT_STRONG_QUALITY,
    DEFAULT_WEAK_QUALITY,
    compress_pixels,
    quality_for_level,
)
from anticomp.core import (
    RAW,
    STRONG,
    WEAK,
    CompressionKind,
    CompressionLevel,
    DatasetError,
    FrameImage,
    InvalidArgumentError,
    Label,
    seeded_rng,
)

SPLITS = ("train", "val", "test")
MANIFEST_CACHE = "manifest.json"
VARIANT_SUFFIXES = {WEAK: "_c23", STRONG: "_c40"}


@dataclass
class ClipRecord:
    clip_id: str
    label: Label
    frame_paths: list[Path]
    precompressed_variants: dict[CompressionLevel, list[Path]] | None = None

    def __post_init__(self):
        if len(self.frame_paths) < 2:
            raise DatasetError(f"clip {self.clip_id!r} has {len(self.frame_paths)} frame(s); need at least 2")
        for level, paths in (self.precompressed_variants or {}).items():
            if len(paths) != len(self.frame_paths):
                raise DatasetError(
                    f"clip {self.clip_id!r}: {level} variant has {len(paths)} frames, expected {len(self.frame_paths)}"
                )

    @property
    def num_frames(self) -> int:
        return len(self.frame_paths)


@dataclass
class DatasetManifest:
    clips: list[ClipRecord]
    split: str
    frame_size: tuple[int, int]

    def __post_init__(self):
        ids = [c.clip_id for c in self.clips]
        if len(set(ids)) != len(ids):
            raise DatasetError(f"duplicate clip ids in {self.split} split")
        if self.split == "train" and {c.label for c in self.clips} != {Label.REAL, Label.FAKE}:
            raise DatasetError("train split must contain both REAL and FAKE clips")

    def __len__(self) -> int:
        return len(self.clips)

    @property
    def num_frames(self) -> int:
        return sum(c.num_frames for c in self.clips)

    def label_counts(self) -> dict[Label, int]:
        return {lab: sum(c.label == lab for c in self.clips) for lab in Label}


@dataclass
class TrainSample:
    x_w: FrameImage
    x_prime_w: FrameImage
    x_s: FrameImage
    label: Label
    clip_id: str

    def __post_init__(self):
        if self.x_w.frame_index == self.x_prime_w.frame_index:
            raise InvalidArgumentError("x and x' must be different frames")
        if self.x_s.frame_index != self.x_w.frame_index:
            raise InvalidArgumentError("strong view must come from the same frame as the weak view")


def _frame_sort_key(path: Path) -> int:
    try:
        return int(path.stem)
    except ValueError:
        raise DatasetError(f"frame file {path} is not named <frame_index>.png") from None


def _list_frames(clip_dir: Path) -> list[Path]:
    return sorted(clip_dir.glob("*.png"), key=_frame_sort_key)


def _check_frame_size(path: Path, frame_size: tuple[int, int]) -> None:
    with Image.open(path) as img:
        w, h = img.size
    if (h, w) != tuple(frame_size):
        raise DatasetError(f"{path}: size {h}x{w} != expected {frame_size[0]}x{frame_size[1]}")


def load_manifest(root, frame_size=(64, 64), split: str = "train", validate: bool = True) -> DatasetManifest:
    root = Path(root)
    frame_size = tuple(int(s) for s in frame_size)
    if frame_size[0] % 8 or frame_size[1] % 8:
        raise InvalidArgumentError("frame size must be a multiple of 8")
    split_dir = root / split
    if not split_dir.is_dir():
        raise DatasetError(f"missing split directory {split_dir}")
    variant_roots = {
        level: Path(f"{root}{suffix}") for level, suffix in VARIANT_SUFFIXES.items() if Path(f"{root}{suffix}").is_dir()
    }
    clips = []
    for label in Label:
        class_dir = split_dir / label.name.lower()
        if not class_dir.is_dir():
            continue
        clip_dirs = sorted(p for p in class_dir.iterdir() if p.is_dir())
        if not clip_dirs:
            raise DatasetError(f"empty class directory {class_dir}")
        for clip_dir in clip_dirs:
            frames = _list_frames(clip_dir)
            variants = {}
            for level, vroot in variant_roots.items():
                vdir = vroot / split / label.name.lower() / clip_dir.name
                variants[level] = _list_frames(vdir) if vdir.is_dir() else []
            clips.append(ClipRecord(clip_dir.name, label, frames, variants or None))
    if not clips:
        raise DatasetError(f"no clips found under {split_dir}")
    if validate:
        for clip in clips:
            for path in clip.frame_paths:
                _check_frame_size(path, frame_size)
    return DatasetManifest(clips, split, frame_size)


def load_manifests(root, frame_size=(64, 64), splits=SPLITS) -> dict[str, DatasetManifest]:
    manifests = {s: load_manifest(root, frame_size, s) for s in splits}
    seen: dict[str, str] = {}
    for split, m in manifests.items():
        for clip in m.clips:
            if clip.clip_id in seen:
                raise DatasetError(f"clip {clip.clip_id!r} appears in both {seen[clip.clip_id]} and {split}")
            seen[clip.clip_id] = split
    return manifests


def content_hash(manifests: dict[str, DatasetManifest]) -> str:
    h = hashlib.sha256()
    for split in sorted(manifests):
        for clip in manifests[split].clips:
            h.update(f"{split}/{clip.label.name}/{clip.clip_id}".encode())
            for path in clip.frame_paths:
                h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest_cache(root, manifests: dict[str, DatasetManifest]) -> Path:
    root = Path(root)
    first = next(iter(manifests.values()))
    record = {
        "frame_size": list(first.frame_size),
        "content_hash": content_hash(manifests),
        "splits": {
            split: [
                {"clip_id": c.clip_id, "label": c.label.name, "num_frames": c.num_frames} for c in m.clips
            ]
            for split, m in manifests.items()
        },
    }
    path = root / MANIFEST_CACHE
    path.write_text(json.dumps(record, indent=1))
    return path


def read_manifest_cache(root) -> dict[str, DatasetManifest]:
    """Rebuild manifests from the cache file without scanning or validating frames."""
    root = Path(root)
    try:
        record = json.loads((root / MANIFEST_CACHE).read_text())
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot read manifest cache in {root}: {exc}") from exc
    frame_size = tuple(record["frame_size"])
    manifests = {}
    for split, entries in record["splits"].items():
        clips = []
        for e in entries:
            clip_dir = root / split / e["label"].lower() / e["clip_id"]
            paths = [clip_dir / f"{i}.png" for i in range(e["num_frames"])]
            clips.append(ClipRecord(e["clip_id"], Label[e["label"]], paths))
        manifests[split] = DatasetManifest(clips, split, frame_size)
    return manifests


def read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise DatasetError(f"cannot read frame {path}: {exc}") from exc


class FrameStore:
    """In-memory frame cache with memoized compression.

    Compression is deterministic, so each ``(clip, frame, quality)`` is
    computed once per process.
    """

    def __init__(self, weak_quality: int = DEFAULT_WEAK_QUALITY, strong_quality: int = DEFAULT_STRONG_QUALITY):
        self.weak_quality = weak_quality
        self.strong_quality = strong_quality
        self._raw: dict[tuple[str, int], np.ndarray] = {}
        self._compressed: dict[tuple[str, int, str], np.ndarray] = {}

    def raw(self, clip: ClipRecord, index: int) -> np.ndarray:
        key = (clip.clip_id, index)
        if key not in self._raw:
            self._raw[key] = read_png(clip.frame_paths[index]).astype(np.float32) / 255.0
        return self._raw[key]

    def get(self, clip: ClipRecord, index: int, level: CompressionLevel) -> np.ndarray:
        if level.kind is CompressionKind.RAW:
            return self.raw(clip, index)
        variants = clip.precompressed_variants or {}
        if variants.get(level):
            key = (clip.clip_id, index, f"file:{level.name}")
            if key not in self._compressed:
                self._compressed[key] = read_png(variants[level][index]).astype(np.float32) / 255.0
            return self._compressed[key]
        quality = quality_for_level(level, self.weak_quality, self.strong_quality)
        key = (clip.clip_id, index, f"q{quality}")
        if key not in self._compressed:
            self._compressed[key] = compress_pixels(self.raw(clip, index), quality)
        return self._compressed[key]

    def frame(self, clip: ClipRecord, index: int, level: CompressionLevel) -> FrameImage:
        return FrameImage(self.get(clip, index, level), clip.clip_id, index)


def sample_pair(clip: ClipRecord | int, rng: np.random.Generator) -> tuple[int, int]:
    """Two distinct frame indices, uniform over ordered pairs."""
    t = clip if isinstance(clip, int) else clip.num_frames
    if t < 2:
        raise DatasetError("need at least two frames to sample a pair")
    a = int(rng.integers(t))
    b = int(rng.integers(t - 1))
    return a, b + (b >= a)


def build_sample(
    clip: ClipRecord,
    rng: np.random.Generator,
    store: FrameStore,
    views: tuple[CompressionLevel, CompressionLevel, CompressionLevel] = (WEAK, WEAK, STRONG),
) -> TrainSample:
    """Views ``(x_w, x'_w, x_s)``; ``x_s`` comes from the same frame as ``x_w``."""
    a, b = sample_pair(clip, rng)
    level_w, level_pw, level_s = views
    return TrainSample(
        x_w=store.frame(clip, a, level_w),
        x_prime_w=store.frame(clip, b, level_pw),
        x_s=store.frame(clip, a, level_s),
        label=clip.label,
        clip_id=clip.clip_id,
    )


def epoch_order(num_clips: int, seed: int, epoch: int) -> np.ndarray:
    return seeded_rng(seed, f"epoch-order/{epoch}").permutation(num_clips)


def sample_rng(seed: int, epoch: int, position: int) -> np.random.Generator:
    # One substream per sample keeps the sample sequence independent of how it is batched or resumed.
    return seeded_rng(seed, f"sample/{epoch}/{position}")


def iterate_epoch(manifest: DatasetManifest, store: FrameStore, seed: int, epoch: int, batch_size: int, views):
    """Yield lists of :class:`TrainSample`, one sample per clip visit."""
    order = epoch_order(len(manifest), seed, epoch)
    for start in range(0, len(order), batch_size):
        yield [
            build_sample(manifest.clips[order[pos]], sample_rng(seed, epoch, pos), store, views)
            for pos in range(start, min(start + batch_size, len(order)))
        ]


# ---------------------------------------------------------------------------
# Synthetic splice dataset
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    n_clips: int = 200
    frames_per_clip: int = 8
    frame_size: int = 64
    artifact_strength: float = 0.06
    split_fractions: tuple[float, float, float] = (0.7, 0.15, 0.15)

    def validate(self) -> None:
        if self.n_clips <= 0 or self.n_clips % 2:
            raise InvalidArgumentError("n_clips must be a positive even number")
        if self.frames_per_clip < 2:
            raise InvalidArgumentError("frames_per_clip must be at least 2")
        if self.frame_size <= 0 or self.frame_size % 8:
            raise InvalidArgumentError("frame_size must be a positive multiple of 8")
        if not self.artifact_strength > 0:
            raise InvalidArgumentError("artifact_strength must be positive")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise InvalidArgumentError("split fractions must be three numbers summing to 1")


def _band_limited_field(rng: np.random.Generator, n: int, kmax: float, channels: int = 3) -> np.ndarray:
    """Random Fourier coefficients on an ``n x n`` grid restricted to ``|k| <= kmax``.

    Returned in frequency space so translations are exact phase ramps.
    """
    k = np.fft.fftfreq(n) * n
    ky, kx = np.meshgrid(k, k, indexing="ij")
    radius = np.hypot(ky, kx)
    amp = np.where((radius <= kmax) & (radius > 0), 1.0 / (1.0 + radius), 0.0)
    coeffs = (rng.standard_normal((channels, n, n)) + 1j * rng.standard_normal((channels, n, n))) * amp
    return coeffs


def _render_field(coeffs: np.ndarray, shift: tuple[float, float]) -> np.ndarray:
    n = coeffs.shape[-1]
    k = np.fft.fftfreq(n)
    ky, kx = np.meshgrid(k, k, indexing="ij")
    phase = np.exp(-2j * np.pi * (ky * shift[0] + kx * shift[1]))
    field_ = np.fft.ifft2(coeffs * phase).real
    field_ -= field_.mean(axis=(1, 2), keepdims=True)
    field_ /= field_.std(axis=(1, 2), keepdims=True) + 1e-12
    return field_.transpose(1, 2, 0)


@dataclass
class ClipParams:
    """Everything needed to render one real clip and its spliced twin."""

    size: int
    frames: int
    background: np.ndarray
    bg_velocity: np.ndarray
    bg_colors: np.ndarray
    face_center: np.ndarray
    face_velocity: np.ndarray
    face_axes: np.ndarray
    face_color: np.ndarray
    face_shading: np.ndarray
    splice_scale: float
    splice_offset: np.ndarray
    grain: np.ndarray = field(repr=False)


def draw_clip_params(rng: np.random.Generator, size: int, frames: int, artifact_strength: float) -> ClipParams:
    n = size
    angle = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(0.5, 1.5)
    grain = rng.standard_normal((2 * n, 2 * n, 3))
    grain = grain - gaussian_filter(grain, sigma=(1.0, 1.0, 0))
    grain *= artifact_strength / (grain.std() + 1e-12)
    return ClipParams(
        size=n,
        frames=frames,
        background=_band_limited_field(rng, n, kmax=5.0),
        bg_velocity=speed * np.array([np.sin(angle), np.cos(angle)]),
        bg_colors=rng.uniform(0.25, 0.75, size=3),
        face_center=n / 2 + rng.uniform(-0.06 * n, 0.06 * n, size=2),
        face_velocity=rng.uniform(-0.4, 0.4, size=2),
        face_axes=np.array([rng.uniform(0.30, 0.36), rng.uniform(0.24, 0.30)]) * n,
        face_color=np.array([rng.uniform(0.55, 0.85), rng.uniform(0.40, 0.65), rng.uniform(0.30, 0.55)]),
        face_shading=_band_limited_field(rng, n, kmax=3.0),
        splice_scale=rng.uniform(0.85, 0.95),
        splice_offset=rng.choice([-1.0, 1.0], size=3) * 0.3 * artifact_strength,
        grain=grain,
    )


def _ellipse_radius(n: int, center: np.ndarray, axes: np.ndarray) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    return np.sqrt(((yy - center[0]) / axes[0]) ** 2 + ((xx - center[1]) / axes[1]) ** 2)


def splice_mask(params: ClipParams, t: int) -> np.ndarray:
    """Soft splice mask with a ~1 px ramp; exactly zero outside its ellipse."""
    center = params.face_center + params.face_velocity * t
    axes = params.face_axes * params.splice_scale
    rho = _ellipse_radius(params.size, center, axes)
    ramp = 1.0 / axes.min()
    return np.clip((1.0 - rho) / ramp, 0.0, 1.0)


def render_frame(params: ClipParams, t: int, fake: bool) -> np.ndarray:
    """Float frame in [0, 1] of shape ``(n, n, 3)``."""
    n = params.size
    bg = params.bg_colors + 0.12 * _render_field(params.background, tuple(params.bg_velocity * t))
    center = params.face_center + params.face_velocity * t
    face_shift = tuple(params.face_velocity * t)
    face = params.face_color + 0.05 * _render_field(params.face_shading, face_shift)
    rho = _ellipse_radius(n, center, params.face_axes)
    face_mask = (1.0 / (1.0 + np.exp((rho - 1.0) * 12.0)))[..., None]
    frame = bg * (1.0 - face_mask) + face * face_mask
    if fake:
        m = splice_mask(params, t)[..., None]
        oy, ox = (n // 2 - np.round(center).astype(int)) % n
        grain = params.grain[oy : oy + n, ox : ox + n]
        patch = frame + grain + params.splice_offset
        frame = frame * (1.0 - m) + patch * m
    return np.clip(frame, 0.0, 1.0)


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.floor(frame * 255.0 + 0.5).astype(np.uint8)


def _split_counts(n_pairs: int, fractions) -> list[int]:
    n_train = int(round(fractions[0] * n_pairs))
    n_val = int(round(fractions[1] * n_pairs))
    return [n_train, n_val, n_pairs - n_train - n_val]


def synth_toy_dataset(out_dir, config: SynthConfig | None = None, seed: int = 0) -> dict[str, DatasetManifest]:
    """Write a balanced real/fake PNG tree and return its manifests.

    Clips come in pairs: each fake clip is its real twin with a textured
    patch spliced into the face. Both twins always land in the same split.
    """
    config = config or SynthConfig()
    config.validate()
    out = Path(out_dir)
    n_pairs = config.n_clips // 2
    order = seeded_rng(seed, "synth/split").permutation(n_pairs)
    counts = _split_counts(n_pairs, config.split_fractions)
    split_of = {}
    start = 0
    for split, count in zip(SPLITS, counts):
        for pair in order[start : start + count]:
            split_of[int(pair)] = split
        start += count
    for pair in range(n_pairs):
        params = draw_clip_params(
            seeded_rng(seed, f"synth/clip/{pair}"), config.frame_size, config.frames_per_clip, config.artifact_strength
        )
        for label in Label:
            clip_dir = out / split_of[pair] / label.name.lower() / f"{label.name.lower()}_{pair:04d}"
            clip_dir.mkdir(parents=True, exist_ok=True)
            for t in range(config.frames_per_clip):
                img = to_uint8(render_frame(params, t, fake=label is Label.FAKE))
                # Fixed PNG settings keep reruns byte-identical.
                Image.fromarray(img).save(clip_dir / f"{t}.png", optimize=False, compress_level=6)
    manifests = load_manifests(out, (config.frame_size, config.frame_size), [s for s, c in zip(SPLITS, counts) if c])
    write_manifest_cache(out, manifests)
    return manifests


def write_precompressed_tree(root, manifests: dict[str, DatasetManifest], level: CompressionLevel, quality: int) -> Path:
    """Dump a ``root_c23``/``root_c40`` sibling tree compressed at ``quality``."""
    if level not in VARIANT_SUFFIXES:
        raise InvalidArgumentError("only WEAK and STRONG trees are supported")
    root = Path(root)
    target = Path(f"{root}{VARIANT_SUFFIXES[level]}")
    for m in manifests.values():
        for clip in m.clips:
            for path in clip.frame_paths:
                rel = path.relative_to(root)
                dst = target / rel
                dst.parent.mkdir(parents=True, exist_ok=True)
                px = compress_pixels(read_png(path).astype(np.float32) / 255.0, quality)
                Image.fromarray(to_uint8(px)).save(dst)
    return target


def is_writable_dir(path) -> bool:
    path = Path(path)
    probe = path if path.exists() else path.parent
    return os.access(probe, os.W_OK)

