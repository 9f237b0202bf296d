"""Network components: feature extractor F, quality head Q, consensus
classifier C, domain discriminator D, and the gradient reversal layer."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigurationError, ValidationError

STD_FLOOR = 1e-4


@dataclass
class BackboneConfig:
    kind: str = "small_conv"
    feature_dim: int = 64
    input_size: tuple = (96, 96)

    def __post_init__(self):
        if self.kind not in ("small_conv", "resnet18_like"):
            raise ConfigurationError(f"unknown backbone kind {self.kind!r}")
        if self.kind == "resnet18_like" and self.feature_dim != 512:
            raise ConfigurationError("resnet18_like backbones have feature_dim 512")
        if self.feature_dim < 4:
            raise ConfigurationError("feature_dim must be at least 4")
        self.input_size = tuple(int(v) for v in self.input_size)

    def to_dict(self):
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d


@dataclass
class QualityOutput:
    score: torch.Tensor
    std: torch.Tensor


class _GradientReversalFn(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.scale * grad, None


class GradientReversal(nn.Module):
    """Identity in the forward pass; multiplies gradients by ``-scale`` going back."""

    def __init__(self, scale: float = 1.0):
        super().__init__()
        if scale < 0:
            raise ValidationError("gradient reversal scale must be >= 0")
        self.scale = float(scale)

    def forward(self, x):
        return _GradientReversalFn.apply(x, self.scale)


class SmallConv(nn.Module):
    """Four conv blocks, each halving resolution, then global log-energy pooling.

    Each block is conv-BN-LeakyReLU followed by a stride-2 conv-BN-LeakyReLU.
    Without normalization the randomly initialized stack trains too slowly
    for the desk-scale budget. Pooling averages the squared activations over
    space and takes the log, so blur and noise (which scale local energy by
    orders of magnitude) move the features additively.
    """

    min_size = 16
    energy_eps = 1e-4

    def __init__(self, feature_dim: int = 64):
        super().__init__()
        widths = [3, 16, 32, 48, feature_dim]
        layers = []
        for cin, cout in zip(widths[:-1], widths[1:]):
            layers += [
                nn.Conv2d(cin, cout, 3, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.LeakyReLU(0.1),
                nn.Conv2d(cout, cout, 3, stride=2, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.LeakyReLU(0.1),
            ]
        self.body = nn.Sequential(*layers)
        self.feature_dim = feature_dim
        for mod in self.body:
            if isinstance(mod, nn.Conv2d):
                nn.init.kaiming_normal_(mod.weight, a=0.1, nonlinearity="leaky_relu")

    def forward(self, x):
        h = self.body(x - 0.5)
        return torch.log(h.pow(2).mean(dim=(2, 3)) + self.energy_eps)


class ResNet18Like(nn.Module):
    min_size = 32

    def __init__(self):
        super().__init__()
        from torchvision.models import resnet18

        net = resnet18(weights=None)
        net.fc = nn.Identity()
        self.net = net
        self.feature_dim = 512
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, x):
        return self.net((x - self.mean) / self.std)


def _mlp(dims, act):
    layers = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        layers.append(nn.Linear(a, b))
        if i < len(dims) - 2:
            layers.append(act())
    return nn.Sequential(*layers)


def _taper(d_in, d_out):
    return [d_in, max(d_in // 2, 1), max(d_in // 4, 1), d_out]


class QualityHead(nn.Module):
    """Three linear layers with LeakyReLU; outputs a score and a positive std."""

    def __init__(self, feature_dim: int, std_floor: float = STD_FLOOR):
        super().__init__()
        self.mlp = _mlp(_taper(feature_dim, 2), nn.LeakyReLU)
        self.std_floor = std_floor

    def forward(self, feat):
        out = self.mlp(feat)
        return out[:, 0], F.softplus(out[:, 1]) + self.std_floor


class ConsensusClassifier(nn.Module):
    def __init__(self, feature_dim: int):
        super().__init__()
        self.mlp = _mlp(_taper(2 * feature_dim, 1), nn.ReLU)

    def forward(self, feat_pair):
        return torch.sigmoid(self.mlp(feat_pair)[:, 0])


class DomainDiscriminator(nn.Module):
    def __init__(self, feature_dim: int):
        super().__init__()
        self.mlp = _mlp(_taper(feature_dim, 1), nn.ReLU)

    def forward(self, feat):
        return torch.sigmoid(self.mlp(feat)[:, 0])


class ModelBundle(nn.Module):
    def __init__(self, backbone: BackboneConfig | None = None, std_floor: float = STD_FLOOR, grl_scale: float = 1.0):
        super().__init__()
        self.backbone = backbone or BackboneConfig()
        if self.backbone.kind == "small_conv":
            self.features = SmallConv(self.backbone.feature_dim)
        else:
            self.features = ResNet18Like()
        d = self.backbone.feature_dim
        self.quality = QualityHead(d, std_floor)
        self.clc = ConsensusClassifier(d)
        self.discriminator = DomainDiscriminator(d)
        self.grl = GradientReversal(grl_scale)

    @property
    def feature_dim(self) -> int:
        return self.backbone.feature_dim

    @property
    def min_size(self) -> int:
        return self.features.min_size

    def extract(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValidationError(f"expected a (N, 3, H, W) batch, got {tuple(x.shape)}")
        if min(x.shape[2:]) < self.min_size:
            raise ValidationError(f"images must be at least {self.min_size}px on each side, got {tuple(x.shape[2:])}")
        return self.features(x)

    def parameter_groups(self) -> dict:
        return {
            "features": list(self.features.parameters()),
            "quality": list(self.quality.parameters()),
            "clc": list(self.clc.parameters()),
            "discriminator": list(self.discriminator.parameters()),
        }


def to_batch(img, dtype=torch.float32) -> torch.Tensor:
    """Convert an ``(H, W, 3)`` array (or a stack of them) to ``(N, 3, H, W)``."""
    if isinstance(img, torch.Tensor):
        return img if img.ndim == 4 else img.unsqueeze(0)
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float32) / 255.0
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(dtype)


def forward_quality(model: ModelBundle, img) -> QualityOutput:
    x = to_batch(img, dtype=next(model.parameters()).dtype)
    score, std = model.quality(model.extract(x))
    return QualityOutput(score, std)


def _check_feat(model, feat, name):
    if feat.ndim != 2 or feat.shape[1] != model.feature_dim:
        raise ValidationError(f"{name} must have shape (N, {model.feature_dim}), got {tuple(feat.shape)}")


def forward_clc(model: ModelBundle, feat_x, feat_y) -> torch.Tensor:
    _check_feat(model, feat_x, "feat_x")
    _check_feat(model, feat_y, "feat_y")
    return model.clc(torch.cat([feat_x, feat_y], dim=1))


def forward_domain(model: ModelBundle, feat, grl: GradientReversal | None = None) -> torch.Tensor:
    """Probability that ``feat`` comes from the source domain; gradients are reversed on the way back."""
    _check_feat(model, feat, "feat")
    grl = grl if grl is not None else model.grl
    return model.discriminator(grl(feat))


@torch.no_grad()
def predict_scores(model: ModelBundle, images, batch_size: int = 16) -> np.ndarray:
    """Quality scores for a list of ``(H, W, 3)`` arrays; images of different sizes are run one by one."""
    was_training = model.training
    model.eval()
    out = []
    try:
        shapes = {np.asarray(im).shape for im in images}
        if len(shapes) == 1:
            for i in range(0, len(images), batch_size):
                out.append(forward_quality(model, np.stack(images[i : i + batch_size])).score)
        else:
            for im in images:
                out.append(forward_quality(model, im).score)
    finally:
        model.train(was_training)
    return torch.cat(out).double().numpy() if out else np.zeros(0)


@torch.no_grad()
def extract_features(model: ModelBundle, images, batch_size: int = 16) -> np.ndarray:
    was_training = model.training
    model.eval()
    out = []
    try:
        for i in range(0, len(images), batch_size):
            out.append(model.extract(to_batch(np.stack(images[i : i + batch_size]), next(model.parameters()).dtype)))
    finally:
        model.train(was_training)
    return torch.cat(out).double().numpy()
