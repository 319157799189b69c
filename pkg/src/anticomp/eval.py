"""Accuracy over a sweep of compression levels, run comparison tables and
the ablation matrix."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from anticomp.config import Config
from anticomp.core import STRONG, WEAK, CompressionLevel, DatasetError, InvalidArgumentError, Label
from anticomp.data import DatasetManifest, FrameStore

log = logging.getLogger(__name__)

DEFAULT_LEVELS = ("weak", "strong", "raw", "75", "50", "20", "10")


@dataclass
class EvalSpec:
    levels: list[CompressionLevel] = field(default_factory=lambda: [CompressionLevel.parse(s) for s in DEFAULT_LEVELS])
    aggregation: str = "frame"
    branch: str = "momentum"

    def __post_init__(self):
        self.levels = [CompressionLevel.parse(lv) for lv in self.levels]
        if not self.levels:
            raise InvalidArgumentError("evaluation needs at least one level")
        if self.aggregation not in ("frame", "video_majority"):
            raise InvalidArgumentError(f"unknown aggregation {self.aggregation!r}")
        if self.branch not in ("momentum", "online"):
            raise InvalidArgumentError(f"unknown branch {self.branch!r}")

    def to_dict(self) -> dict:
        return {"levels": [lv.name for lv in self.levels], "aggregation": self.aggregation, "branch": self.branch}


@dataclass
class EvalReport:
    accuracy: dict[str, float]
    n_frames: int
    n_videos: int
    checkpoint_id: str
    spec: EvalSpec

    def __post_init__(self):
        for name, acc in self.accuracy.items():
            if not 0.0 <= acc <= 1.0:
                raise InvalidArgumentError(f"accuracy for {name} outside [0, 1]")

    def __getitem__(self, level) -> float:
        return self.accuracy[CompressionLevel.parse(level).name]

    def to_dict(self) -> dict:
        return {
            "accuracy": dict(self.accuracy),
            "n_frames": self.n_frames,
            "n_videos": self.n_videos,
            "checkpoint_id": self.checkpoint_id,
            "spec": self.spec.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["accuracy"], d["n_frames"], d["n_videos"], d["checkpoint_id"], EvalSpec(**d["spec"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def frames_to_tensor(frames: list[np.ndarray], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack(frames)).permute(0, 3, 1, 2).to(dtype).contiguous()


def _bundle_predict_fn(bundle, branch: str) -> Callable:
    dtype = next(bundle.parameters()).dtype

    @torch.no_grad()
    def predict(frames: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
        return bundle.classify(frames.to(dtype), branch).argmax(dim=1)

    return predict


def _resolve_model(model, config: Config | None):
    """Accept a bundle or a checkpoint path; returns ``(bundle, config, checkpoint_id)``."""
    from anticomp.train import bundle_from_checkpoint

    if isinstance(model, (str, Path)):
        bundle, cfg = bundle_from_checkpoint(model)
        return bundle, config or cfg, Path(model).parent.name + "/" + Path(model).stem
    return model, config, getattr(model, "checkpoint_id", "in-memory")


def aggregate_accuracy(preds: np.ndarray, labels: np.ndarray, clip_ids: list[str], aggregation: str) -> float:
    if aggregation == "frame":
        return float((preds == labels).mean())
    votes: dict[str, list[int]] = {}
    truth: dict[str, int] = {}
    for p, y, cid in zip(preds, labels, clip_ids):
        votes.setdefault(cid, []).append(int(p))
        truth[cid] = int(y)
    correct = 0
    for cid, v in votes.items():
        n_fake = sum(v)
        # Ties resolve toward FAKE.
        video_pred = Label.FAKE if 2 * n_fake >= len(v) else Label.REAL
        correct += int(video_pred == truth[cid])
    return correct / len(votes)


def evaluate(
    model,
    manifest: DatasetManifest | None,
    spec: EvalSpec | None = None,
    store: FrameStore | None = None,
    config: Config | None = None,
    batch_size: int = 256,
    predict_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor] | None = None,
) -> EvalReport:
    """Per-level accuracy of ``model`` on every frame of ``manifest``.

    ``model`` is a :class:`ModelBundle` or checkpoint path. ``predict_fn``
    replaces the model's forward pass (it also receives the true labels,
    which lets tests plug in oracle or constant predictors).
    """
    if manifest is None or len(manifest) == 0:
        raise DatasetError("evaluation split is missing or empty")
    spec = spec or EvalSpec()
    checkpoint_id, bundle = "stub", None
    if predict_fn is None:
        bundle, config, checkpoint_id = _resolve_model(model, config)
        predict_fn = _bundle_predict_fn(bundle, spec.branch)
    if store is None:
        c = (config or Config()).compression
        store = FrameStore(c.weak_quality, c.strong_quality)
    index = [(clip, t) for clip in manifest.clips for t in range(clip.num_frames)]
    labels = np.array([int(clip.label) for clip, _ in index])
    clip_ids = [clip.clip_id for clip, _ in index]
    accuracy = {}
    for level in spec.levels:
        preds = []
        for start in range(0, len(index), batch_size):
            chunk = index[start : start + batch_size]
            frames = frames_to_tensor([store.get(clip, t, level) for clip, t in chunk])
            y = torch.as_tensor(labels[start : start + batch_size])
            preds.append(np.asarray(predict_fn(frames, y)).reshape(-1))
        accuracy[level.name] = aggregate_accuracy(np.concatenate(preds), labels, clip_ids, spec.aggregation)
    return EvalReport(accuracy, len(index), len(manifest), checkpoint_id, spec)


# ---------------------------------------------------------------------------
# Comparison tables
# ---------------------------------------------------------------------------


def percent(value: float | Decimal) -> Decimal:
    """Accuracy as a percentage rounded half-up to two decimals."""
    d = value if isinstance(value, Decimal) else Decimal(repr(float(value)))
    return (d * 100).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


def weak_strong_average(report: EvalReport) -> Decimal:
    """Mean of the WEAK and STRONG accuracies, exact in decimal."""
    w = Decimal(repr(float(report.accuracy[WEAK.name])))
    s = Decimal(repr(float(report.accuracy[STRONG.name])))
    return (w + s) / 2


@dataclass
class ComparisonTable:
    names: list[str]
    levels: list[str]
    rows: list[list[Decimal]]
    avg: list[Decimal | None]

    def to_records(self) -> list[dict]:
        records = []
        for name, row, avg in zip(self.names, self.rows, self.avg):
            rec = {"run": name, **{lv: float(v) for lv, v in zip(self.levels, row)}}
            if avg is not None:
                rec["avg"] = float(avg)
            records.append(rec)
        return records

    def render(self) -> str:
        header = ["run", *self.levels, "AVG"]
        body = [
            [name, *[f"{percent(v)}%" for v in row], f"{percent(avg)}%" if avg is not None else "-"]
            for name, row, avg in zip(self.names, self.rows, self.avg)
        ]
        widths = [max(len(str(r[i])) for r in [header, *body]) for i in range(len(header))]
        lines = ["  ".join(str(c).rjust(w) if i else str(c).ljust(w) for i, (c, w) in enumerate(zip(r, widths))) for r in [header, *body]]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)


def compare_runs(reports: list[EvalReport], names: list[str] | None = None) -> ComparisonTable:
    if not reports:
        raise InvalidArgumentError("compare_runs needs at least one report")
    levels = [lv.name for lv in reports[0].spec.levels]
    for r in reports[1:]:
        if [lv.name for lv in r.spec.levels] != levels:
            raise InvalidArgumentError("reports were produced with different level sweeps")
    names = names or [r.checkpoint_id for r in reports]
    rows = [[Decimal(repr(float(r.accuracy[lv]))) for lv in levels] for r in reports]
    has_avg = WEAK.name in levels and STRONG.name in levels
    avg = [weak_strong_average(r) if has_avg else None for r in reports]
    return ComparisonTable(list(names), levels, rows, avg)


# ---------------------------------------------------------------------------
# Ablation matrix
# ---------------------------------------------------------------------------

ABLATION_PRESETS: dict[str, list[tuple[str, dict]]] = {
    "table4": [
        ("ce", {"train.strategy": "ce_only"}),
        ("ce+momentum", {"train.strategy": "proposed", "loss.beta1": 0.0, "loss.beta2": 0.0}),
        ("ce+contrastive", {"train.strategy": "proposed", "loss.beta1": 0.0}),
        ("ce+relation", {"train.strategy": "proposed", "loss.beta2": 0.0}),
        ("proposed", {"train.strategy": "proposed"}),
        ("proposed_raw_and_strong", {"train.strategy": "proposed", "train.compression_mode": "raw_and_strong"}),
    ],
    "table5": [
        (f"bank{k}", {"train.strategy": "proposed", "memory.capacity": k}) for k in (256, 1024, 4096, 16384, 32768)
    ],
}


@dataclass
class AblationCell:
    name: str
    overrides: dict
    config: Config
    report: EvalReport | None = None
    checkpoint: Path | None = None
    error: str | None = None


def run_ablation_matrix(
    base_config: Config,
    manifests: dict[str, DatasetManifest],
    preset: str = "table4",
    run_root=None,
    spec: EvalSpec | None = None,
) -> list[AblationCell]:
    """Train and evaluate every cell of ``preset``; a failing cell is recorded, not raised."""
    from anticomp.train import run_training

    if preset not in ABLATION_PRESETS:
        raise InvalidArgumentError(f"unknown preset {preset!r}; choose from {sorted(ABLATION_PRESETS)}")
    run_root = Path(run_root or base_config.run.out_dir) / f"ablate-{preset}"
    spec_levels = spec.levels if spec else base_config.eval.levels
    cells = []
    for name, overrides in ABLATION_PRESETS[preset]:
        cfg = base_config.with_overrides(overrides)
        cell = AblationCell(name, overrides, cfg)
        try:
            result = run_training(cfg, manifests, run_dir=run_root / name)
            cell_spec = EvalSpec(spec_levels, cfg.eval.aggregation, branch=result.eval_branch)
            cell.report = evaluate(result.best_checkpoint, manifests["test"], cell_spec, config=cfg)
            cell.report.checkpoint_id = name
            cell.report.save(run_root / name / "eval_test.json")
            cell.checkpoint = result.best_checkpoint
        except Exception as exc:  # keep going; partial matrices are still useful
            log.exception("ablation cell %s failed", name)
            cell.error = f"{type(exc).__name__}: {exc}"
        cells.append(cell)
    return cells
