"""Encoder, projector with iterative whitening, discriminator and classifier head."""
from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn
from torch import Tensor

ENCODER_FAMILIES = ("resnet34_1ch", "tiny_cnn")
MIN_INPUT_WIDTH = 8


@dataclass
class EncoderConfig:
    family: str = "resnet34_1ch"
    representation_dim: int = 512

    def __post_init__(self) -> None:
        if self.family not in ENCODER_FAMILIES:
            raise ValueError(f"unknown encoder family {self.family!r}")
        if self.family == "resnet34_1ch" and self.representation_dim != 512:
            raise ValueError("resnet34_1ch has a fixed representation_dim of 512")


@dataclass
class ProjectorConfig:
    hidden_dim: int = 1024
    output_dim: int = 512
    hidden_layers: int = 2
    whitening_iterations: int = 5
    whitening_group_size: int = 64

    def __post_init__(self) -> None:
        if self.output_dim % self.whitening_group_size:
            raise ValueError("projector output_dim must be divisible by whitening_group_size")


@dataclass
class DiscriminatorConfig:
    hidden_dim: Optional[int] = None  # defaults to the representation dim
    dropout: float = 0.5


class TinyCNN(nn.Module):
    """Four stride-2 conv blocks then global average pooling."""

    def __init__(self, representation_dim: int = 64, widths=(16, 32, 64)) -> None:
        super().__init__()
        layers = []
        c_in = 1
        for c_out in (*widths, representation_dim):
            layers += [
                nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
            ]
            c_in = c_out
        self.features = nn.Sequential(*layers)

    def forward(self, x: Tensor) -> Tensor:
        return self.features(x).mean(dim=(2, 3))


def _resnet34_1ch() -> nn.Module:
    from torchvision.models import resnet34

    net = resnet34(weights=None)
    net.conv1 = nn.Conv2d(1, 64, kernel_size=7, stride=2, padding=3, bias=False)
    nn.init.kaiming_normal_(net.conv1.weight, mode="fan_out", nonlinearity="relu")
    net.fc = nn.Identity()
    return net


class Encoder(nn.Module):
    def __init__(self, config: EncoderConfig = EncoderConfig()) -> None:
        super().__init__()
        self.config = config
        if config.family == "tiny_cnn":
            self.net = TinyCNN(config.representation_dim)
        else:
            self.net = _resnet34_1ch()

    @property
    def output_dim(self) -> int:
        return self.config.representation_dim

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ValueError(f"encoder expects (B, 1, H, W), got {tuple(x.shape)}")
        if x.shape[-1] < MIN_INPUT_WIDTH:
            raise ValueError(f"input width {x.shape[-1]} below minimum {MIN_INPUT_WIDTH}")
        return self.net(x)


class IterNorm(nn.Module):
    """Group whitening of (B, F) features via Newton iterations for Sigma^{-1/2}.

    Training mode whitens with the batch covariance and updates running estimates;
    eval mode applies the running mean and whitening matrix.
    """

    def __init__(self, num_features: int, group_size: int = 64, iterations: int = 5,
                 eps: float = 1e-5, momentum: float = 0.1) -> None:
        super().__init__()
        if num_features % group_size:
            raise ValueError("num_features must be divisible by group_size")
        self.num_features = num_features
        self.group_size = group_size
        self.groups = num_features // group_size
        self.iterations = iterations
        self.eps = eps
        self.momentum = momentum
        self.register_buffer("running_mean", torch.zeros(self.groups, group_size, 1))
        self.register_buffer("running_wm", torch.eye(group_size).repeat(self.groups, 1, 1))

    def forward(self, x: Tensor) -> Tensor:
        b = x.shape[0]
        xg = x.T.reshape(self.groups, self.group_size, b)
        if self.training:
            if b < 2:
                raise ValueError("whitening needs a batch of at least 2 in training mode")
            mean = xg.mean(dim=-1, keepdim=True)
            xc = xg - mean
            eye = torch.eye(self.group_size, dtype=x.dtype, device=x.device).expand(self.groups, -1, -1)
            sigma = self.eps * eye + xc @ xc.transpose(1, 2) / b
            r_tr = 1.0 / (sigma * eye).sum(dim=(1, 2), keepdim=True)
            sigma_n = sigma * r_tr
            p = eye
            for _ in range(self.iterations):
                p = 1.5 * p - 0.5 * (p @ p @ p @ sigma_n)
            wm = p * r_tr.sqrt()
            with torch.no_grad():
                self.running_mean.lerp_(mean.detach(), self.momentum)
                self.running_wm.lerp_(wm.detach(), self.momentum)
        else:
            xc = xg - self.running_mean
            wm = self.running_wm
        out = wm @ xc
        return out.reshape(self.num_features, b).T

    def extra_repr(self) -> str:
        return f"{self.num_features}, group_size={self.group_size}, iterations={self.iterations}"


class Projector(nn.Module):
    def __init__(self, input_dim: int, config: ProjectorConfig = ProjectorConfig()) -> None:
        super().__init__()
        self.config = config
        layers = []
        d = input_dim
        for _ in range(config.hidden_layers):
            layers += [nn.Linear(d, config.hidden_dim), nn.BatchNorm1d(config.hidden_dim), nn.ReLU(inplace=True)]
            d = config.hidden_dim
        layers.append(nn.Linear(d, config.output_dim))
        self.mlp = nn.Sequential(*layers)
        self.whiten = IterNorm(config.output_dim, config.whitening_group_size, config.whitening_iterations)

    def forward(self, y: Tensor) -> Tensor:
        if self.training and y.shape[0] < 2:
            raise ValueError("projector needs a batch of at least 2 in training mode")
        return self.whiten(self.mlp(y))


class Discriminator(nn.Module):
    """Neighbour probability for a pair of representations, from their concatenation."""

    def __init__(self, representation_dim: int, config: DiscriminatorConfig = DiscriminatorConfig()) -> None:
        super().__init__()
        hidden = config.hidden_dim or representation_dim
        self.net = nn.Sequential(
            nn.Linear(2 * representation_dim, hidden),
            nn.ReLU(inplace=True),
            nn.Dropout(config.dropout),
            nn.Linear(hidden, 1),
        )

    def forward(self, y_a: Tensor, y_b: Tensor) -> Tensor:
        if y_a.shape != y_b.shape:
            raise ValueError(f"shape mismatch: {tuple(y_a.shape)} vs {tuple(y_b.shape)}")
        return torch.sigmoid(self.net(torch.cat([y_a, y_b], dim=1))).squeeze(1)


class Classifier(nn.Linear):
    """Single affine head; ``argmax`` of the logits breaks ties toward the lowest index."""

    def __init__(self, representation_dim: int, n_classes: int = 8) -> None:
        super().__init__(representation_dim, n_classes)


class SSLModel(nn.Module):
    """Encoder, projector and discriminator trained jointly during pretraining."""

    def __init__(self, encoder: EncoderConfig, projector: ProjectorConfig,
                 discriminator: DiscriminatorConfig = DiscriminatorConfig()) -> None:
        super().__init__()
        self.encoder = Encoder(encoder)
        self.projector = Projector(self.encoder.output_dim, projector)
        self.discriminator = Discriminator(self.encoder.output_dim, discriminator)
        self.configs = {"encoder": asdict(encoder), "projector": asdict(projector),
                        "discriminator": asdict(discriminator)}


def predict(logits: Tensor) -> Tensor:
    # torch.argmax returns the first maximal index
    return torch.argmax(logits, dim=1)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def parameter_checksum(module: nn.Module) -> str:
    digest = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(p.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(path, **payload) -> None:
    payload = {"format_version": CHECKPOINT_FORMAT_VERSION, **payload}
    tmp = f"{path}.tmp"
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version is None or version > CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    return payload
