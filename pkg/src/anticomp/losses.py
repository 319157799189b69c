"""Relation matching, video-level contrastive, supervised and baseline objectives.

Every batched loss is averaged over the batch dimension. Embeddings are
L2-normalized before any similarity; the L1, triplet and GAN baselines work
on raw embeddings.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from anticomp.core import DegenerateInputError, InvalidArgumentError, InvalidStateError, normalize
from anticomp.model import Discriminator, discriminate


@dataclass(frozen=True)
class Temperatures:
    tau_w: float = 0.04
    tau_s: float = 0.1
    tau_v: float = 0.07

    def __post_init__(self):
        if min(self.tau_w, self.tau_s, self.tau_v) <= 0:
            raise InvalidArgumentError("temperatures must be strictly positive")


@dataclass(frozen=True)
class LossWeights:
    beta1: float = 0.1
    beta2: float = 0.1

    def __post_init__(self):
        if self.beta1 < 0 or self.beta2 < 0:
            raise InvalidArgumentError("loss weights must be non-negative")


@dataclass
class LossReport:
    l_ce: float
    l_relation: float = 0.0
    l_contrastive: float = 0.0
    l_total: float = 0.0
    beta1: float = 0.0
    beta2: float = 0.0
    l_l1: float | None = None
    l_triplet: float | None = None
    l_gan_d: float | None = None
    l_gan_g: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def composed_total(self) -> float:
        """What ``l_total`` should be, recomputed from the components."""
        total = self.l_ce + self.beta1 * self.l_relation + self.beta2 * self.l_contrastive
        for extra in (self.l_l1, self.l_triplet, self.l_gan_g):
            if extra is not None:
                total += extra
        return total


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity, clamped to [-1, 1]."""
    if (a.norm(dim=-1) == 0).any() or (b.norm(dim=-1) == 0).any():
        raise DegenerateInputError("cosine similarity of a zero vector is undefined")
    sim = (normalize(a) * normalize(b)).sum(-1)
    return sim.clamp(-1.0, 1.0)


def relation_logits(z: torch.Tensor, anchors: torch.Tensor, tau: float) -> torch.Tensor:
    if anchors.shape[0] == 0:
        raise InvalidStateError("relation distribution needs at least one anchor")
    if z.shape[-1] != anchors.shape[-1]:
        raise InvalidArgumentError("embedding and anchor dims differ")
    return normalize(z) @ normalize(anchors).T / tau


def relation_distribution(z: torch.Tensor, anchors: torch.Tensor, tau: float) -> torch.Tensor:
    """Softmax over cosine similarities between ``z`` and each anchor row."""
    return torch.softmax(relation_logits(z, anchors, tau), dim=-1)


def relation_loss(p_weak: torch.Tensor, p_strong: torch.Tensor) -> torch.Tensor:
    """Cross-entropy ``H(p_weak, p_strong)``; the weak target is detached."""
    if p_weak.shape != p_strong.shape:
        raise InvalidArgumentError(f"distribution shapes differ: {tuple(p_weak.shape)} vs {tuple(p_strong.shape)}")
    tiny = torch.finfo(p_strong.dtype).tiny
    ce = -(p_weak.detach() * torch.log(p_strong.clamp_min(tiny))).sum(-1)
    return ce.mean()


def video_contrastive_loss(
    z_w: torch.Tensor,
    z_prime_w: torch.Tensor,
    negatives: torch.Tensor,
    tau_v: float = 0.07,
    reduction: str = "mean",
) -> torch.Tensor:
    """InfoNCE with the same-video momentum embedding as positive (logit index 0)."""
    if negatives.shape[0] == 0:
        warnings.warn("no negatives available; contrastive loss set to 0", RuntimeWarning, stacklevel=2)
        return z_w.new_zeros(())
    single = z_w.ndim == 1
    if single:
        z_w, z_prime_w = z_w.unsqueeze(0), z_prime_w.unsqueeze(0)
    q = normalize(z_w)
    pos = (q * normalize(z_prime_w.detach())).sum(-1, keepdim=True)
    neg = q @ normalize(negatives.detach()).T
    logits = torch.cat([pos, neg], dim=1) / tau_v
    per_sample = torch.logsumexp(logits, dim=1) - logits[:, 0]
    if reduction == "none":
        return per_sample[0] if single else per_sample
    if reduction == "sum":
        return per_sample.sum()
    return per_sample.mean()


def supervised_ce_loss(logits_w: torch.Tensor, logits_s: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean of the weak-view and strong-view cross-entropies."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits_w.ndim == 1:
        logits_w, logits_s, labels = logits_w[None], logits_s[None], labels.reshape(1)
    return 0.5 * (F.cross_entropy(logits_w, labels) + F.cross_entropy(logits_s, labels))


def combined_loss(l_ce, l_relation, l_contrastive, weights: LossWeights):
    return l_ce + weights.beta1 * l_relation + weights.beta2 * l_contrastive


def l1_baseline_loss(z_w: torch.Tensor, z_s: torch.Tensor) -> torch.Tensor:
    if z_w.shape != z_s.shape:
        raise InvalidArgumentError("L1 baseline needs matching shapes")
    return (z_w - z_s).abs().sum(-1).mean()


def triplet_baseline_loss(anchor, positive, negative, margin: float = 0.2) -> torch.Tensor:
    if margin <= 0:
        raise InvalidArgumentError("triplet margin must be positive")
    d_pos = ((anchor - positive) ** 2).sum(-1)
    d_neg = ((anchor - negative) ** 2).sum(-1)
    return torch.clamp(d_pos - d_neg + margin, min=0.0).mean()


def gan_baseline_losses(z_w: torch.Tensor, z_s: torch.Tensor, discriminator: Discriminator | None):
    """Returns ``(d_loss, g_loss)``.

    ``d_loss`` only sees detached embeddings. ``g_loss`` is the non-saturating
    encoder objective on the strong embeddings.
    """
    if discriminator is None:
        raise InvalidStateError("GAN baseline requires a discriminator")
    d_w = discriminate(discriminator, z_w.detach())
    d_s = discriminate(discriminator, z_s.detach())
    d_loss = -(F.logsigmoid(d_w).mean() + F.logsigmoid(-d_s).mean())
    return d_loss, gan_generator_loss(z_s, discriminator)


def gan_generator_loss(z_s: torch.Tensor, discriminator: Discriminator | None) -> torch.Tensor:
    return -F.logsigmoid(discriminate(discriminator, z_s)).mean()


def shannon_entropy(p: torch.Tensor) -> torch.Tensor:
    return -(p * torch.log(p.clamp_min(torch.finfo(p.dtype).tiny))).sum(-1)

