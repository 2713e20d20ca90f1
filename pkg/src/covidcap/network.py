"""3D residual classification network with a weight-shared attention branch.

The classifier is a 34-layer-style 3D ResNet (basic blocks, last stage kept
at stride 1) ending in global average pooling and a single-logit linear head.
The attention branch reuses the head's weight vector as a frozen 1x1x1
convolution over the last feature map; its gradient therefore flows into the
features but never into the shared kernel.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class NetworkConfig:
    """Backbone layout plus soft-mask parameters.

    ``stage_strides`` must end in 1 so the deepest feature map keeps the
    resolution of the previous stage (total reduction 16x with the stem and
    pooling); ``alpha``/``beta`` are the soft-mask sigmoid gain and threshold.
    """

    block_counts: tuple[int, ...] = (3, 4, 6, 3)
    base_channels: int = 64
    stage_strides: tuple[int, ...] = (1, 2, 2, 1)
    alpha: float = 100.0
    beta: float = 0.4

    def __post_init__(self) -> None:
        if len(self.block_counts) != len(self.stage_strides) or not self.block_counts:
            raise ValueError("block_counts and stage_strides must have equal, nonzero length")
        if any(int(n) < 1 for n in self.block_counts):
            raise ValueError(f"every stage needs at least one block: {self.block_counts}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be positive: {self.base_channels}")
        if any(s not in (1, 2) for s in self.stage_strides):
            raise ValueError(f"stage strides must be 1 or 2: {self.stage_strides}")
        if self.stage_strides[-1] != 1:
            raise ValueError("the last stage stride must be 1")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive: {self.alpha}")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1): {self.beta}")

    def to_dict(self) -> dict:
        return {
            "block_counts": list(self.block_counts),
            "base_channels": self.base_channels,
            "stage_strides": list(self.stage_strides),
            "alpha": self.alpha,
            "beta": self.beta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(
            block_counts=tuple(d["block_counts"]),
            base_channels=int(d["base_channels"]),
            stage_strides=tuple(d["stage_strides"]),
            alpha=float(d["alpha"]),
            beta=float(d["beta"]),
        )


def feature_shape(config: NetworkConfig, input_shape: tuple[int, int, int]) -> tuple[int, int, int]:
    """Spatial size of the last feature map for a given input size.

    The stem convolution, the pooling layer and every stride-2 stage each
    halve a dimension with ceiling rounding.
    """
    dims = list(input_shape)
    for stride in (2, 2, *config.stage_strides):
        if stride == 2:
            dims = [math.ceil(d / 2) for d in dims]
    return tuple(dims)


@dataclass
class ForwardOutput:
    """One forward pass: per-sample logit, last feature map and raw attention."""

    logit: torch.Tensor  # (N,)
    features: torch.Tensor  # (N, C, D', H', W')
    attention: torch.Tensor  # (N, D', H', W'), >= 0


class _BasicBlock3d(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm3d(out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm3d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv3d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm3d(out_ch),
            )
        else:
            self.downsample = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)), inplace=True)
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity, inplace=True)


def raw_attention(features: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """ReLU of a 1x1x1 convolution of the feature map with ``weight``.

    ``features`` is (N, C, D, H, W) or (C, D, H, W); ``weight`` is (C,).
    The caller decides whether ``weight`` is detached from the graph.
    """
    single = features.dim() == 4
    if single:
        features = features[None]
    if features.dim() != 5:
        raise ValueError(f"features must be 4D or 5D, got shape {tuple(features.shape)}")
    weight = weight.reshape(-1)
    if weight.numel() != features.shape[1]:
        raise ValueError(
            f"kernel has {weight.numel()} channels, features have {features.shape[1]}"
        )
    out = torch.einsum("ncdhw,c->ndhw", features, weight).clamp_min(0)
    return out[0] if single else out


def soft_mask(
    attention: torch.Tensor,
    out_shape: tuple[int, int, int],
    alpha: float = 100.0,
    beta: float = 0.4,
) -> torch.Tensor:
    """Turn a raw attention map into a soft mask in (0, 1) at ``out_shape``.

    Upsamples trilinearly, min-max normalizes per sample (a constant map
    normalizes to all zeros), then applies the steep sigmoid
    ``1 / (1 + exp(-alpha * (a - beta)))``.
    """
    single = attention.dim() == 3
    if single:
        attention = attention[None]
    if attention.dim() != 4:
        raise ValueError(f"attention must be 3D or 4D, got shape {tuple(attention.shape)}")
    a = attention[:, None]
    if not a.is_floating_point():
        a = a.float()
    if tuple(a.shape[2:]) != tuple(out_shape):
        a = F.interpolate(a, size=tuple(out_shape), mode="trilinear", align_corners=False)
    a = a[:, 0]
    lo = a.amin(dim=(1, 2, 3), keepdim=True)
    hi = a.amax(dim=(1, 2, 3), keepdim=True)
    span = hi - lo
    norm = torch.where(span > 0, (a - lo) / torch.where(span > 0, span, torch.ones_like(span)), torch.zeros_like(a))
    out = torch.sigmoid(alpha * (norm - beta))
    return out[0] if single else out


class AttentionNet3d(nn.Module):
    """Residual 3D classifier whose head weight doubles as an attention kernel."""

    def __init__(self, config: NetworkConfig = NetworkConfig()) -> None:
        super().__init__()
        self.config = config
        c = config.base_channels
        self.stem = nn.Sequential(
            nn.Conv3d(1, c, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm3d(c),
            nn.ReLU(inplace=True),
            nn.MaxPool3d(3, stride=2, padding=1),
        )
        stages = []
        in_ch = c
        for i, (count, stride) in enumerate(zip(config.block_counts, config.stage_strides)):
            out_ch = c * 2**i
            blocks = [_BasicBlock3d(in_ch, out_ch, stride)]
            blocks += [_BasicBlock3d(out_ch, out_ch, 1) for _ in range(count - 1)]
            stages.append(nn.Sequential(*blocks))
            in_ch = out_ch
        self.stages = nn.ModuleList(stages)
        self.fc = nn.Linear(in_ch, 1)

    @property
    def attention_kernel(self) -> torch.Tensor:
        """The attention branch's 1x1x1 kernel: a view of the head weight."""
        return self.fc.weight.detach().reshape(-1)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        out = self.stem(x)
        for stage in self.stages:
            out = stage(out)
        return out

    def forward(self, x: torch.Tensor) -> ForwardOutput:
        if x.dim() != 5 or x.shape[1] != 1:
            raise ValueError(f"expected input of shape (N, 1, D, H, W), got {tuple(x.shape)}")
        if not torch.isfinite(x).all():
            raise ValueError("input contains non-finite values")
        f = self.features(x)
        logit = self.fc(f.mean(dim=(2, 3, 4))).squeeze(1)
        attention = raw_attention(f, self.attention_kernel)
        return ForwardOutput(logit=logit, features=f, attention=attention)


def grad_cam(model: AttentionNet3d, x: torch.Tensor, out_shape: tuple[int, int, int] | None = None) -> torch.Tensor:
    """Classic gradient-weighted activation map for the positive-class logit.

    Channel weights are the spatial means of d(logit)/d(features); the
    weighted feature sum is rectified, upsampled to ``out_shape`` (default:
    the input size) and min-max normalized to [0, 1].
    """
    if x.dim() == 4:
        x = x[None]
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            f = model.features(x)
        with torch.enable_grad():
            f_leaf = f.detach().requires_grad_(True)
            logit = model.fc(f_leaf.mean(dim=(2, 3, 4))).squeeze(1)
            (grad,) = torch.autograd.grad(logit.sum(), f_leaf)
        weights = grad.mean(dim=(2, 3, 4))
        cam = torch.relu((weights[:, :, None, None, None] * f).sum(dim=1))
    finally:
        model.train(was_training)
    target = tuple(out_shape) if out_shape is not None else tuple(x.shape[2:])
    if tuple(cam.shape[1:]) != target:
        cam = F.interpolate(cam[:, None], size=target, mode="trilinear", align_corners=False)[:, 0]
    lo = cam.amin(dim=(1, 2, 3), keepdim=True)
    hi = cam.amax(dim=(1, 2, 3), keepdim=True)
    span = hi - lo
    cam = torch.where(span > 0, (cam - lo) / torch.where(span > 0, span, torch.ones_like(span)), torch.zeros_like(cam))
    return cam


def init_model(config: NetworkConfig = NetworkConfig(), seed: int = 0) -> AttentionNet3d:
    """Build a network with seeded He initialization (training from scratch)."""
    torch.manual_seed(seed)
    model = AttentionNet3d(config)
    for m in model.modules():
        if isinstance(m, nn.Conv3d):
            nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
        elif isinstance(m, nn.BatchNorm3d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
        elif isinstance(m, nn.Linear):
            nn.init.normal_(m.weight, std=0.01)
            nn.init.zeros_(m.bias)
    return model


def save_checkpoint(
    model: AttentionNet3d,
    path: str | Path,
    *,
    epoch: int,
    val_auc: float,
    seed: int,
    sampling_strategy: str,
) -> None:
    """Save parameters plus a JSON sidecar describing how they were trained."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(model.state_dict(), tmp)
    tmp.replace(path)
    meta = {
        "config": model.config.to_dict(),
        "epoch": int(epoch),
        "val_auc": float(val_auc),
        "seed": int(seed),
        "sampling_strategy": sampling_strategy,
    }
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)


def load_checkpoint(path: str | Path) -> tuple[AttentionNet3d, dict]:
    """Rebuild a model from a checkpoint and its sidecar; strict key matching."""
    path = Path(path)
    sidecar = path.with_suffix(".json")
    if not sidecar.exists():
        raise FileNotFoundError(f"missing checkpoint sidecar {sidecar}")
    with open(sidecar, "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    if meta.get("sampling_strategy") not in ("US", "SS"):
        raise ValueError(f"{sidecar}: sampling_strategy must be 'US' or 'SS'")
    config = NetworkConfig.from_dict(meta["config"])
    model = AttentionNet3d(config)
    state = torch.load(path, map_location="cpu", weights_only=True)
    model.load_state_dict(state, strict=True)
    model.eval()
    return model, meta
