"""Encoder, projector, predictor, their momentum twins and the GAN discriminator."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field

import torch
from torch import nn

from anticomp.core import InvalidArgumentError, InvalidStateError

EMBED_DIM = 512


@dataclass
class EncoderConfig:
    input_size: tuple[int, int] = (64, 64)
    channel_widths: list[int] = field(default_factory=lambda: [32, 64, 128, 256])

    def __post_init__(self):
        if len(self.channel_widths) < 2:
            raise InvalidArgumentError("encoder needs at least 2 conv stages")

    @property
    def feature_dim(self) -> int:
        return self.channel_widths[-1]


INPUT_MEAN = 0.5
INPUT_GAIN = 4.0


class ConvEncoder(nn.Module):
    """Stride-2 conv stages followed by global average pooling."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = []
        in_ch = 3
        for width in config.channel_widths:
            layers += [nn.Conv2d(in_ch, width, kernel_size=3, stride=2, padding=1), nn.ReLU()]
            in_ch = width
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # Pixels arrive in [0, 1]; centering them keeps the first ReLUs from saturating on one side.
        x = (x - INPUT_MEAN) * INPUT_GAIN
        return self.pool(self.features(x)).flatten(1)


class Projector(nn.Module):
    def __init__(self, in_dim: int, out_dim: int = EMBED_DIM, hidden_dim: int = EMBED_DIM):
        super().__init__()
        self.out_dim = out_dim
        self.net = nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, out_dim))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        return self.net(h)


class Predictor(nn.Module):
    """Two linear layers mapping an embedding to REAL/FAKE logits."""

    def __init__(self, in_dim: int = EMBED_DIM, hidden_dim: int = 128):
        super().__init__()
        self.in_dim = in_dim
        self.net = nn.Sequential(nn.Linear(in_dim, hidden_dim), nn.ReLU(), nn.Linear(hidden_dim, 2))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


class Discriminator(nn.Module):
    """Four linear layers scoring whether an embedding came from a weak view."""

    def __init__(self, in_dim: int = EMBED_DIM, hidden: tuple[int, int, int] = (256, 128, 64)):
        super().__init__()
        self.in_dim = in_dim
        dims = [in_dim, *hidden]
        layers: list[nn.Module] = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.LeakyReLU(0.2)]
        layers.append(nn.Linear(dims[-1], 1))
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z).squeeze(-1)


class ModelBundle(nn.Module):
    """Online ``(encoder, projector, predictor)`` plus the momentum twins.

    The twins start as exact copies and never receive gradients.
    """

    def __init__(
        self,
        encoder_config: EncoderConfig | None = None,
        embed_dim: int = EMBED_DIM,
        predictor_hidden: int = 128,
        momentum_coefficient: float = 0.999,
        with_discriminator: bool = False,
    ):
        super().__init__()
        if not 0.0 <= momentum_coefficient <= 1.0:
            raise InvalidArgumentError("momentum coefficient must lie in [0, 1]")
        self.encoder_config = encoder_config or EncoderConfig()
        self.embed_dim = embed_dim
        self.momentum_coefficient = momentum_coefficient
        # Construction order fixes the init RNG sequence; keep the discriminator last.
        self.encoder = ConvEncoder(self.encoder_config)
        self.projector = Projector(self.encoder_config.feature_dim, embed_dim)
        self.predictor = Predictor(embed_dim, predictor_hidden)
        self.encoder_momentum = copy.deepcopy(self.encoder)
        self.projector_momentum = copy.deepcopy(self.projector)
        for p in self.momentum_parameters():
            p.requires_grad_(False)
        self.discriminator = Discriminator(embed_dim) if with_discriminator else None

    def online_parameters(self):
        yield from self.encoder.parameters()
        yield from self.projector.parameters()
        yield from self.predictor.parameters()

    def momentum_parameters(self):
        yield from self.encoder_momentum.parameters()
        yield from self.projector_momentum.parameters()

    def embed(self, x: torch.Tensor, branch: str = "online") -> torch.Tensor:
        if branch == "online":
            return encode_project(self.encoder, self.projector, x)
        if branch == "momentum":
            return encode_project(self.encoder_momentum, self.projector_momentum, x)
        raise InvalidArgumentError(f"unknown branch {branch!r}")

    def classify(self, x: torch.Tensor, branch: str = "momentum") -> torch.Tensor:
        return predict_logits(self.predictor, self.embed(x, branch))

    def twins_consistent(self) -> bool:
        pairs = [(self.encoder, self.encoder_momentum), (self.projector, self.projector_momentum)]
        for online, twin in pairs:
            a, b = online.state_dict(), twin.state_dict()
            if a.keys() != b.keys() or any(a[k].shape != b[k].shape for k in a):
                return False
        return True


def encode_project(encoder: ConvEncoder, projector: Projector, frames: torch.Tensor) -> torch.Tensor:
    """Raw (unnormalized) embeddings ``g(F(x))`` for a batch ``(B, 3, H, W)``."""
    expected = tuple(encoder.config.input_size)
    if frames.ndim != 4 or frames.shape[1] != 3 or tuple(frames.shape[2:]) != expected:
        raise InvalidArgumentError(f"expected frames of shape (B, 3, {expected[0]}, {expected[1]}), got {tuple(frames.shape)}")
    return projector(encoder(frames))


def predict_logits(predictor: Predictor, z: torch.Tensor) -> torch.Tensor:
    if z.shape[-1] != predictor.in_dim:
        raise InvalidArgumentError(f"embedding dim {z.shape[-1]} != predictor input {predictor.in_dim}")
    return predictor(z)


def discriminate(discriminator: Discriminator | None, z: torch.Tensor) -> torch.Tensor:
    if discriminator is None:
        raise InvalidStateError("GAN discriminator is not enabled for this bundle")
    if z.shape[-1] != discriminator.in_dim:
        raise InvalidArgumentError(f"embedding dim {z.shape[-1]} != discriminator input {discriminator.in_dim}")
    return discriminator(z)


@torch.no_grad()
def momentum_update(bundle: ModelBundle, coefficient: float | None = None) -> ModelBundle:
    """``p' <- m * p' + (1 - m) * p`` for the encoder and projector twins, in place."""
    m = bundle.momentum_coefficient if coefficient is None else coefficient
    pairs = [(bundle.encoder, bundle.encoder_momentum), (bundle.projector, bundle.projector_momentum)]
    for online, twin in pairs:
        for p, p_m in zip(online.parameters(), twin.parameters()):
            if p.shape != p_m.shape:
                raise InvalidStateError("online/momentum parameter shapes diverged")
            p_m.mul_(m).add_(p.detach(), alpha=1.0 - m)
    return bundle


CHECKPOINT_GROUPS = {
    "encoder_online": "encoder",
    "encoder_momentum": "encoder_momentum",
    "projector_online": "projector",
    "projector_momentum": "projector_momentum",
    "predictor": "predictor",
    "discriminator": "discriminator",
}


def bundle_state(bundle: ModelBundle) -> dict:
    state = {}
    for key, attr in CHECKPOINT_GROUPS.items():
        module = getattr(bundle, attr)
        if module is not None:
            state[key] = {k: v.detach().clone() for k, v in module.state_dict().items()}
    return state


def load_bundle_state(bundle: ModelBundle, state: dict) -> ModelBundle:
    for key, attr in CHECKPOINT_GROUPS.items():
        module = getattr(bundle, attr)
        if module is None:
            continue
        if key not in state:
            raise InvalidArgumentError(f"checkpoint lacks parameter group {key!r}")
        module.load_state_dict(state[key])
    return bundle


def save_checkpoint(path: str | os.PathLike, bundle: ModelBundle, config: dict, global_step: int, **extra) -> None:
    """Write one archive with every parameter group, the config and the step count.

    ``extra`` carries trainer state (banks, optimizer, epoch) so runs can resume.
    """
    payload = {"params": bundle_state(bundle), "config": config, "global_step": int(global_step), **extra}
    tmp = f"{os.fspath(path)}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)
