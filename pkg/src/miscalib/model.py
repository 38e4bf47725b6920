"""Two-stream ResNet18 encoders, pixel-wise contrastive loss and classifier head."""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from torch import nn
from torchvision.models import resnet18

VARIANTS = ("resnet18_small", "resnet18_all")
DEFAULT_MARGIN = 4.0
BCE_EPS = 1e-7


@dataclass(frozen=True)
class EncoderConfig:
    variant: str = "resnet18_small"
    in_channels: int = 3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown encoder variant {self.variant!r}; expected one of {VARIANTS}")
        if self.in_channels not in (1, 3):
            raise ValueError("in_channels must be 1 (depth) or 3 (RGB)")

    @property
    def stride(self) -> int:
        return 8 if self.variant == "resnet18_small" else 32

    @property
    def out_channels(self) -> int:
        return 128 if self.variant == "resnet18_small" else 512


@dataclass(frozen=True)
class LossParams:
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError("margin must be positive")


class Encoder(nn.Module):
    """ResNet18 trunk without pooling/FC; ``resnet18_small`` keeps stages 1-2 only."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        net = resnet18(weights=None)
        conv1 = net.conv1
        if config.in_channels != 3:
            conv1 = nn.Conv2d(config.in_channels, 64, kernel_size=7, stride=2, padding=3, bias=False)
            nn.init.kaiming_normal_(conv1.weight, mode="fan_out", nonlinearity="relu")
        self.stem = nn.Sequential(conv1, net.bn1, net.relu, net.maxpool)
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        if config.variant == "resnet18_all":
            self.layer3 = net.layer3
            self.layer4 = net.layer4
        else:
            self.layer3 = self.layer4 = None

    def stages(self) -> list[nn.Module]:
        return [m for m in (self.layer1, self.layer2, self.layer3, self.layer4) if m is not None]

    def capture_points(self) -> list[tuple[str, nn.Module]]:
        """Stem plus every basic block, in depth order."""
        points = [("stem", self.stem)]
        for i, stage in enumerate(self.stages(), 1):
            for j, block in enumerate(stage):
                points.append((f"layer{i}.{j}", block))
        return points

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected N x {self.config.in_channels} x H x W input, got {tuple(x.shape)}")
        s = self.config.stride
        if x.shape[2] % s or x.shape[3] % s:
            raise ValueError(f"input size {tuple(x.shape[2:])} not divisible by {s}")
        x = self.stem(x)
        for stage in self.stages():
            x = stage(x)
        return x


def encode(x: torch.Tensor, encoder: Encoder) -> torch.Tensor:
    return encoder(x)


def _conv_bn_relu(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=2, padding=1, bias=False),
                         nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class ClassifierHead(nn.Module):
    """Conv reduction, global average pooling and an MLP producing a logit.

    For the small variant the concatenated 256 channels go through three
    stride-2 3x3 convs (128, 64, 32); the deep variant uses a single conv.
    """

    def __init__(self, in_channels: int = 256, single_conv: bool = False):
        super().__init__()
        if single_conv:
            self.convs = _conv_bn_relu(in_channels, 32)
        else:
            self.convs = nn.Sequential(_conv_bn_relu(in_channels, 128), _conv_bn_relu(128, 64),
                                       _conv_bn_relu(64, 32))
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.mlp = nn.Sequential(
            nn.Linear(32, 512), nn.ReLU(inplace=True),
            nn.Linear(512, 216), nn.ReLU(inplace=True),
            nn.Linear(216, 216), nn.ReLU(inplace=True),
            nn.Linear(216, 1),
        )

    def forward(self, image_emb: torch.Tensor, lidar_emb: torch.Tensor) -> torch.Tensor:
        if image_emb.shape != lidar_emb.shape:
            raise ValueError(f"embedding shapes differ: {tuple(image_emb.shape)} vs {tuple(lidar_emb.shape)}")
        x = torch.cat([image_emb, lidar_emb], dim=1)
        x = self.pool(self.convs(x)).flatten(1)
        return self.mlp(x).squeeze(1)


class EmbeddingPair(NamedTuple):
    image_emb: torch.Tensor
    lidar_emb: torch.Tensor

    def check(self) -> EmbeddingPair:
        if self.image_emb.shape != self.lidar_emb.shape:
            raise ValueError(f"embedding shapes differ: {tuple(self.image_emb.shape)} "
                             f"vs {tuple(self.lidar_emb.shape)}")
        return self


class MiscalibrationDetector(nn.Module):
    """Image encoder, LiDAR encoder (no weight sharing) and classifier head."""

    def __init__(self, variant: str = "resnet18_small"):
        super().__init__()
        self.variant = variant
        self.image_encoder = Encoder(EncoderConfig(variant, 3))
        self.lidar_encoder = Encoder(EncoderConfig(variant, 1))
        c = self.image_encoder.config.out_channels
        self.head = ClassifierHead(2 * c, single_conv=variant == "resnet18_all")

    def embed(self, images: torch.Tensor, depths: torch.Tensor) -> EmbeddingPair:
        return EmbeddingPair(self.image_encoder(images), self.lidar_encoder(depths)).check()

    def forward(self, images: torch.Tensor, depths: torch.Tensor) -> torch.Tensor:
        """Probability of miscalibration per sample."""
        e_img, e_lid = self.embed(images, depths)
        return torch.sigmoid(self.head(e_img, e_lid))

    def encoders(self) -> list[nn.Module]:
        return [self.image_encoder, self.lidar_encoder]

    def freeze_encoders(self) -> None:
        for enc in self.encoders():
            enc.eval()
            for p in enc.parameters():
                p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        # frozen encoders keep their batch-norm statistics
        for enc in self.encoders():
            if not any(p.requires_grad for p in enc.parameters()):
                enc.eval()
        return self


def classify(image_emb: torch.Tensor, lidar_emb: torch.Tensor, head: ClassifierHead) -> torch.Tensor:
    return torch.sigmoid(head(image_emb, lidar_emb))


def pixel_distance(image_emb: torch.Tensor, lidar_emb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-pixel squared distance and distance over channels (N x H x W each).

    The distance has gradient 0 where it is exactly 0 instead of NaN.
    """
    sq = (image_emb - lidar_emb).pow(2).sum(dim=1)
    pos = sq > 0
    dist = torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))
    return sq, dist


def contrastive_loss(image_emb: torch.Tensor, lidar_emb: torch.Tensor, labels: torch.Tensor,
                     params: LossParams | float = DEFAULT_MARGIN) -> torch.Tensor:
    """Pixel-wise contrastive loss averaged over batch and spatial positions.

    Calibrated pairs (label 0) pay the squared feature distance at every
    pixel; miscalibrated pairs (label 1) pay the squared shortfall of the
    distance below the margin.
    """
    margin = params.margin if isinstance(params, LossParams) else float(params)
    if image_emb.shape != lidar_emb.shape:
        raise ValueError(f"embedding shapes differ: {tuple(image_emb.shape)} vs {tuple(lidar_emb.shape)}")
    if not (torch.isfinite(image_emb).all() and torch.isfinite(lidar_emb).all()):
        raise FloatingPointError("non-finite values in embeddings")
    y = labels.to(image_emb.dtype).view(-1, 1, 1)
    sq, dist = pixel_distance(image_emb, lidar_emb)
    per_pixel = (1 - y) * sq + y * torch.clamp(margin - dist, min=0).pow(2)
    return per_pixel.mean()


def bce_loss(prob: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    p = prob.clamp(BCE_EPS, 1 - BCE_EPS)
    y = label.to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def _n_params(module: nn.Module, trainable_only: bool = False) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


def count_parameters(model: MiscalibrationDetector) -> dict[str, int]:
    """Parameter counts per component (weights, regardless of freezing) and total."""
    counts = {
        "image_encoder": _n_params(model.image_encoder),
        "lidar_encoder": _n_params(model.lidar_encoder),
        "head": _n_params(model.head),
    }
    counts["total"] = sum(counts.values())
    return counts


def state_hash(module: nn.Module) -> str:
    """SHA-256 over the raw bytes of every tensor in ``module``'s state dict."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------- checkpoints

HEADER_KEY = "__header__"


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path: str | Path, model: MiscalibrationDetector, *, stage: str,
                    input_size: tuple[int, int], margin: float = DEFAULT_MARGIN,
                    extra: dict | None = None) -> dict:
    """Write weights as named arrays in one ``.npz`` archive with a JSON text header."""
    header = {
        "variant": model.variant,
        "input_size": list(input_size),
        "margin": margin,
        "parameter_count": count_parameters(model),
        "stage": stage,
    }
    header.update(extra or {})
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    arrays[HEADER_KEY] = np.array(json.dumps(header, sort_keys=True))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())
    return header


def read_header(path: str | Path) -> dict:
    with np.load(path) as data:
        return json.loads(str(data[HEADER_KEY]))


def load_checkpoint(path: str | Path, variant: str | None = None) -> tuple[MiscalibrationDetector, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path) as data:
        header = json.loads(str(data[HEADER_KEY]))
        state = {k: torch.from_numpy(np.array(data[k])) for k in data.files if k != HEADER_KEY}
    if variant is not None and header["variant"] != variant:
        raise ValueError(f"checkpoint variant {header['variant']!r} does not match {variant!r}")
    model = MiscalibrationDetector(header["variant"])
    model.load_state_dict(state)
    return model, header
