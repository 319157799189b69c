"""Training loop: the relation + video-contrastive method and its baselines."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from anticomp.config import Config
from anticomp.core import (
    RAW,
    STRONG,
    WEAK,
    InvalidArgumentError,
    Label,
    TrainingDivergedError,
    derive_seed,
    normalize,
    seeded_rng,
)
from anticomp.data import DatasetManifest, FrameStore, TrainSample, iterate_epoch
from anticomp.eval import EvalSpec, evaluate, frames_to_tensor
from anticomp.losses import (
    LossReport,
    gan_baseline_losses,
    gan_generator_loss,
    l1_baseline_loss,
    relation_distribution,
    relation_loss,
    supervised_ce_loss,
    triplet_baseline_loss,
    video_contrastive_loss,
)
from anticomp.memory import MemoryBank, combined_anchors
from anticomp.model import EncoderConfig, ModelBundle, load_bundle_state, load_checkpoint, momentum_update, save_checkpoint

log = logging.getLogger(__name__)

VIEW_MODES = {
    "mixed": (WEAK, WEAK, STRONG),
    "single_weak": (WEAK, WEAK, WEAK),
    "single_strong": (STRONG, STRONG, STRONG),
    "raw_and_strong": (RAW, RAW, STRONG),
}


def select_compression_views(mode: str):
    """Compression levels for ``(x_w, x'_w, x_s)`` under a training mode."""
    try:
        return VIEW_MODES[mode]
    except KeyError:
        raise InvalidArgumentError(f"unknown compression mode {mode!r}") from None


def tracks_momentum(config: Config) -> bool:
    return config.train.strategy == "proposed" or config.train.momentum_eval


def eval_branch(config: Config) -> str:
    if config.eval.use_online_branch or not tracks_momentum(config):
        return "online"
    return "momentum"


def torch_dtype(config: Config) -> torch.dtype:
    return torch.float64 if config.train.dtype == "float64" else torch.float32


def learning_rate_for_epoch(config: Config, epoch: int) -> float:
    t = config.train
    return t.learning_rate * 0.5 ** (epoch // t.lr_halve_every_epochs)


def effective_betas(config: Config, global_step: int) -> tuple[float, float]:
    t = config.train
    if t.warmup:
        beta = t.warmup_initial_beta if global_step < t.warmup_switch_step else t.warmup_final_beta
        return beta, beta
    return config.loss.beta1, config.loss.beta2


@dataclass
class TrainState:
    bundle: ModelBundle
    bank_real: MemoryBank
    bank_fake: MemoryBank
    optimizer: torch.optim.Optimizer
    d_optimizer: torch.optim.Optimizer | None = None
    global_step: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    best_val: float = -1.0
    history: list[dict] = field(default_factory=list)

    def banks(self) -> dict[Label, MemoryBank]:
        return {Label.REAL: self.bank_real, Label.FAKE: self.bank_fake}


def build_bundle(config: Config) -> ModelBundle:
    torch.manual_seed(derive_seed(config.train.seed, "init"))
    size = config.data.frame_size
    bundle = ModelBundle(
        EncoderConfig((size, size), list(config.model.channel_widths)),
        embed_dim=config.model.embed_dim,
        predictor_hidden=config.model.predictor_hidden,
        momentum_coefficient=config.train.momentum_coefficient,
        with_discriminator=config.train.strategy == "ce_gan",
    )
    return bundle.to(torch_dtype(config))


def init_state(config: Config) -> TrainState:
    config.validate()
    bundle = build_bundle(config)
    dtype = torch_dtype(config)
    dim = config.model.embed_dim
    banks = []
    for label in Label:
        bank = MemoryBank(config.memory.capacity, dim, dtype=dtype)
        if config.memory.prefill and config.train.strategy == "proposed":
            bank.prefill(seeded_rng(config.train.seed, f"banks/{label.name}"))
        banks.append(bank)
    betas = tuple(config.train.adam_betas)
    optimizer = torch.optim.Adam(list(bundle.online_parameters()), lr=config.train.learning_rate, betas=betas)
    d_optimizer = None
    if bundle.discriminator is not None:
        d_optimizer = torch.optim.Adam(bundle.discriminator.parameters(), lr=config.train.learning_rate, betas=betas)
    return TrainState(bundle, banks[0], banks[1], optimizer, d_optimizer)


def set_learning_rate(state: TrainState, lr: float) -> None:
    for opt in (state.optimizer, state.d_optimizer):
        if opt is not None:
            for group in opt.param_groups:
                group["lr"] = lr


def collate(batch: list[TrainSample], dtype: torch.dtype = torch.float32):
    if not batch:
        raise InvalidArgumentError("empty batch")
    x_w = frames_to_tensor([s.x_w.pixels for s in batch], dtype)
    x_pw = frames_to_tensor([s.x_prime_w.pixels for s in batch], dtype)
    x_s = frames_to_tensor([s.x_s.pixels for s in batch], dtype)
    labels = torch.tensor([int(s.label) for s in batch], dtype=torch.long)
    return x_w, x_pw, x_s, labels


def _triplet_indices(labels: np.ndarray, embeddings: torch.Tensor):
    """Nearest same-label partner and nearest opposite-label sample for each anchor.

    Distances are squared Euclidean on detached embeddings; ties go to the
    lower batch index. Anchors without an available partner are skipped.
    """
    dist = torch.cdist(embeddings.detach(), embeddings.detach()).pow(2).numpy()
    idx = np.arange(len(labels))
    anchors, positives, negatives = [], [], []
    for i, y in enumerate(labels):
        same = np.flatnonzero((labels == y) & (idx != i))
        other = np.flatnonzero(labels != y)
        if len(same) == 0 or len(other) == 0:
            continue
        anchors.append(i)
        positives.append(int(same[np.argmin(dist[i, same])]))
        negatives.append(int(other[np.argmin(dist[i, other])]))
    return anchors, positives, negatives


def _contrastive_term(state: TrainState, z_w, z_pw, labels, config: Config):
    """Opposite-label bank supplies the negatives for each sample."""
    tau_v = config.loss.tau_v
    per_label = []
    for label, negatives_bank in ((Label.REAL, state.bank_fake), (Label.FAKE, state.bank_real)):
        idx = (labels == int(label)).nonzero(as_tuple=True)[0]
        if len(idx) == 0 or len(negatives_bank) == 0:
            continue
        per_label.append(video_contrastive_loss(z_w[idx], z_pw[idx], negatives_bank.snapshot(), tau_v, reduction="none"))
    if not per_label:
        return z_w.new_zeros(())
    if config.loss.contrastive_reduction == "subset_sum":
        return sum(term.mean() for term in per_label)
    return torch.cat(per_label).sum() / len(labels)


def _check_finite(value: torch.Tensor, name: str, state: TrainState, report: dict) -> None:
    if not torch.isfinite(value).all():
        raise TrainingDivergedError(
            f"{name} became non-finite at step {state.global_step}",
            snapshot={"global_step": state.global_step, "epoch": state.epoch, "losses": report},
        )


def train_step(state: TrainState, batch: list[TrainSample], config: Config) -> tuple[TrainState, LossReport]:
    """One optimizer step (two for the GAN baseline) on a batch of samples."""
    bundle = state.bundle
    strategy = config.train.strategy
    x_w, x_pw, x_s, labels = collate(batch, torch_dtype(config))
    bundle.train()

    z_pw = None
    if strategy == "proposed":
        with torch.no_grad():
            z_pw = bundle.embed(x_pw, "momentum")
    z_w = bundle.embed(x_w)
    z_s = bundle.embed(x_s)

    l_ce = supervised_ce_loss(bundle.predictor(z_w), bundle.predictor(z_s), labels)
    beta1, beta2 = effective_betas(config, state.global_step)
    report = LossReport(l_ce=0.0, beta1=beta1, beta2=beta2)
    total = l_ce
    d_loss = None

    if strategy == "proposed":
        active = (
            len(state.bank_real) > 0
            and len(state.bank_fake) > 0
            and state.global_step >= config.memory.warmup_steps
        )
        if active:
            anchors = combined_anchors(state.bank_real, state.bank_fake)
            p_w = relation_distribution(z_w.detach(), anchors, config.loss.tau_w)
            p_s = relation_distribution(z_s, anchors, config.loss.tau_s)
            l_rel = relation_loss(p_w, p_s)
            l_con = _contrastive_term(state, z_w, z_pw, labels, config)
        else:
            l_rel = l_con = z_w.new_zeros(())
        total = l_ce + beta1 * l_rel + beta2 * l_con
        report.l_relation, report.l_contrastive = l_rel.item(), l_con.item()
    else:
        report.beta1 = report.beta2 = 0.0
        if strategy == "ce_l1":
            l1 = l1_baseline_loss(z_w, z_s)
            total = l_ce + l1
            report.l_l1 = l1.item()
        elif strategy == "ce_triplet":
            a, p, n = _triplet_indices(labels.numpy(), z_s)
            l_tri = triplet_baseline_loss(z_s[a], z_s[p], z_s[n], config.loss.triplet_margin) if a else z_s.new_zeros(())
            total = l_ce + l_tri
            report.l_triplet = l_tri.item()
        elif strategy == "ce_gan":
            d_loss, _ = gan_baseline_losses(z_w, z_s, bundle.discriminator)
            _check_finite(d_loss, "discriminator loss", state, report.to_dict())
            state.d_optimizer.zero_grad(set_to_none=True)
            d_loss.backward()
            state.d_optimizer.step()
            g_loss = gan_generator_loss(z_s, bundle.discriminator)
            total = l_ce + g_loss
            report.l_gan_d, report.l_gan_g = d_loss.item(), g_loss.item()

    report.l_ce = l_ce.item()
    report.l_total = total.item()
    _check_finite(total, "training loss", state, report.to_dict())

    online = list(bundle.online_parameters())
    state.optimizer.zero_grad(set_to_none=True)
    total.backward(inputs=online)
    if strategy == "ce_gan" and config.train.gan_grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(online, config.train.gan_grad_clip)
    state.optimizer.step()

    if tracks_momentum(config):
        momentum_update(bundle, config.train.momentum_coefficient)
    if z_pw is not None:
        for label, bank in state.banks().items():
            rows = labels == int(label)
            if rows.any():
                bank.push(normalize(z_pw[rows]))
    state.global_step += 1
    return state, report


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------


def save_train_state(path, state: TrainState, config: Config) -> None:
    save_checkpoint(
        path,
        state.bundle,
        config.to_dict(),
        state.global_step,
        epoch=state.epoch,
        batch_in_epoch=state.batch_in_epoch,
        best_val=state.best_val,
        banks={"real": state.bank_real.state_dict(), "fake": state.bank_fake.state_dict()},
        optimizer=state.optimizer.state_dict(),
        d_optimizer=state.d_optimizer.state_dict() if state.d_optimizer else None,
    )


def load_train_state(path) -> tuple[TrainState, Config]:
    payload = load_checkpoint(path)
    config = Config.from_dict(payload["config"])
    state = init_state(config)
    load_bundle_state(state.bundle, payload["params"])
    state.bank_real = MemoryBank.from_state_dict(payload["banks"]["real"])
    state.bank_fake = MemoryBank.from_state_dict(payload["banks"]["fake"])
    state.optimizer.load_state_dict(payload["optimizer"])
    if state.d_optimizer is not None and payload.get("d_optimizer"):
        state.d_optimizer.load_state_dict(payload["d_optimizer"])
    state.global_step = payload["global_step"]
    state.epoch = payload["epoch"]
    state.batch_in_epoch = payload["batch_in_epoch"]
    state.best_val = payload["best_val"]
    return state, config


def bundle_from_checkpoint(path) -> tuple[ModelBundle, Config]:
    payload = load_checkpoint(path)
    config = Config.from_dict(payload["config"])
    bundle = build_bundle(config)
    load_bundle_state(bundle, payload["params"])
    bundle.eval()
    return bundle, config


# ---------------------------------------------------------------------------
# Full runs
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    run_dir: Path
    best_checkpoint: Path
    last_checkpoint: Path
    metrics_log: Path
    best_val: float
    eval_branch: str
    history: list[dict]


def default_run_dir(config: Config) -> Path:
    return Path(config.run.out_dir) / f"{time.strftime('%Y%m%d-%H%M%S')}-{config.digest()}"


def run_training(
    config: Config,
    manifests: dict[str, DatasetManifest],
    run_dir=None,
    store: FrameStore | None = None,
    resume_from=None,
    max_steps: int | None = None,
) -> RunResult:
    """Train for ``train.epochs`` epochs, keeping the checkpoint with the best
    mean validation accuracy over ``eval.val_levels``."""
    if "train" not in manifests:
        raise InvalidArgumentError("manifests need a train split")
    run_dir = Path(run_dir) if run_dir else default_run_dir(config)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=1))
    store = store or FrameStore(config.compression.weak_quality, config.compression.strong_quality)
    if resume_from:
        state, _ = load_train_state(resume_from)
    else:
        state = init_state(config)
    views = select_compression_views(config.train.compression_mode)
    branch = eval_branch(config)
    val_spec = EvalSpec(config.eval.val_levels, config.eval.aggregation, branch)
    metrics_path = run_dir / "metrics.jsonl"
    best_path, last_path = run_dir / "best.pt", run_dir / "last.pt"
    train_manifest = manifests["train"]

    with open(metrics_path, "a") as metrics:
        while state.epoch < config.train.epochs:
            lr = learning_rate_for_epoch(config, state.epoch)
            set_learning_rate(state, lr)
            batches = iterate_epoch(train_manifest, store, config.train.seed, state.epoch, config.train.batch_size, views)
            for i, batch in enumerate(batches):
                if i < state.batch_in_epoch:
                    continue
                state, report = train_step(state, batch, config)
                state.batch_in_epoch = i + 1
                if state.global_step % config.run.log_every == 0:
                    record = {"step": state.global_step, "epoch": state.epoch, "lr": lr, **report.to_dict()}
                    metrics.write(json.dumps(record) + "\n")
                if max_steps is not None and state.global_step >= max_steps:
                    break
            record = {"epoch": state.epoch, "step": state.global_step, "lr": lr}
            if "val" in manifests:
                val = evaluate(state.bundle, manifests["val"], val_spec, store, config)
                mean_val = float(np.mean(list(val.accuracy.values())))
                record.update({f"val_{k}": v for k, v in val.accuracy.items()}, val_mean=mean_val)
            else:
                mean_val = float(state.epoch)  # no validation split: keep the latest epoch
            finished_epoch = state.batch_in_epoch >= math.ceil(len(train_manifest) / config.train.batch_size)
            if finished_epoch:
                state.epoch += 1
                state.batch_in_epoch = 0
            if mean_val > state.best_val or not best_path.exists():
                state.best_val = mean_val
                save_train_state(best_path, state, config)
                record["best"] = True
            save_train_state(last_path, state, config)
            state.history.append(record)
            metrics.write(json.dumps(record) + "\n")
            metrics.flush()
            log.info("epoch %s: %s", record["epoch"], record)
            if max_steps is not None and state.global_step >= max_steps:
                break
    return RunResult(run_dir, best_path, last_path, metrics_path, state.best_val, branch, state.history)
