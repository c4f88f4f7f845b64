"""Contour-embedded segmentation network built from dense separable blocks.

All tensors use the (batch, channel, depth, height, width) layout.  The
network body is a V-shaped stack of dense blocks; multi-scale decoder
features are upsampled, concatenated and fed to three deeply supervised
transition branches (two shape, one contour) whose 2-channel outputs are
fused by two out-transitions into the final 2-class prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import Ablation, NetworkConfig
from .errors import ConfigurationError, ShapeError


def _require_even_spatial(x, who):
    if any(d % 2 for d in x.shape[2:]):
        raise ShapeError(f"{who} needs even spatial dims, got {tuple(x.shape[2:])}")


class _DenseStage(nn.Module):
    """Grouped 3x3x3 conv -> 1x1x1 projection to k features -> BN -> ReLU."""

    def __init__(self, in_channels, growth_k, group_n):
        super().__init__()
        if group_n is None:
            groups = 1  # dense reference variant, used for parameter comparisons
        else:
            if in_channels % group_n:
                raise ConfigurationError(
                    f"stage input of {in_channels} channels is not divisible by "
                    f"group size n={group_n}")
            groups = in_channels // group_n
        self.spatial = nn.Conv3d(in_channels, in_channels, 3, padding=1,
                                 groups=groups, bias=False)
        self.project = nn.Conv3d(in_channels, growth_k, 1, bias=False)
        self.bn = nn.BatchNorm3d(growth_k)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.relu(self.bn(self.project(self.spatial(x))))


class DBlock(nn.Module):
    """Densely connected block of three separable stages, emitting 3k channels.

    Stage l consumes the concatenation of the block input and all previous
    stage outputs; the block output concatenates the three stage outputs.
    """

    def __init__(self, in_channels, growth_k, group_n, separable=True):
        super().__init__()
        n = group_n if separable else None
        self.stages = nn.ModuleList(
            _DenseStage(in_channels + i * growth_k, growth_k, n) for i in range(3))
        self.out_channels = 3 * growth_k

    def forward(self, x):
        feats = [x]
        outs = []
        for stage in self.stages:
            y = stage(torch.cat(feats, dim=1) if len(feats) > 1 else x)
            feats.append(y)
            outs.append(y)
        return torch.cat(outs, dim=1)


class DownTransition(nn.Module):
    """Stride-2 convolution halving the spatial dims, channel count preserved."""

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv3d(channels, channels, 2, stride=2, bias=False)
        self.bn = nn.BatchNorm3d(channels)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        _require_even_spatial(x, "down-transition")
        return self.relu(self.bn(self.conv(x)))


class UpTransition(nn.Module):
    """Transposed convolution doubling the spatial dims.

    The output channel count matches the skip-connected layer so the caller
    can sum the two feature maps element-wise.
    """

    def __init__(self, in_channels, skip_channels):
        super().__init__()
        self.conv = nn.ConvTranspose3d(in_channels, skip_channels, 2, stride=2,
                                       bias=False)
        self.bn = nn.BatchNorm3d(skip_channels)
        self.relu = nn.ReLU(inplace=True)

    def forward(self, x):
        return self.relu(self.bn(self.conv(x)))


class DeepTransition(nn.Module):
    """Deeply supervised branch producing a 2-channel map at the input size.

    Internally contracts once and expands once so the branch sees a larger
    receptive field: 3x3x3 conv, stride-2 down, dilated (d=2) conv, transposed
    up, then a 1x1x1 conv to 2 channels.  Every conv except the last is
    followed by BN and ReLU.
    """

    def __init__(self, in_channels, width):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv3d(in_channels, width, 3, padding=1, bias=False),
            nn.BatchNorm3d(width), nn.ReLU(inplace=True),
            nn.Conv3d(width, width, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm3d(width), nn.ReLU(inplace=True),
            nn.Conv3d(width, width, 3, padding=2, dilation=2, bias=False),
            nn.BatchNorm3d(width), nn.ReLU(inplace=True),
            nn.ConvTranspose3d(width, width, 2, stride=2, bias=False),
            nn.BatchNorm3d(width), nn.ReLU(inplace=True),
        )
        self.head = nn.Conv3d(width, 2, 1)

    def forward(self, x):
        _require_even_spatial(x, "deep transition")
        return self.head(self.body(x))


class OutTransition(nn.Module):
    """Densely connected conv/BN/ReLU stages closed by a 1x1x1 convolution."""

    def __init__(self, in_channels, growth, out_channels):
        super().__init__()
        self.stage1 = nn.Sequential(
            nn.Conv3d(in_channels, growth, 3, padding=1, bias=False),
            nn.BatchNorm3d(growth), nn.ReLU(inplace=True))
        self.stage2 = nn.Sequential(
            nn.Conv3d(in_channels + growth, growth, 3, padding=1, bias=False),
            nn.BatchNorm3d(growth), nn.ReLU(inplace=True))
        self.head = nn.Conv3d(in_channels + 2 * growth, out_channels, 1)

    def forward(self, x):
        s1 = self.stage1(x)
        s2 = self.stage2(torch.cat([x, s1], dim=1))
        return self.head(torch.cat([x, s1, s2], dim=1))


@dataclass
class FeatureBundle:
    """The supervised network outputs for one forward pass.

    ``f_shape0``/``f_shape1``/``f_contour`` are None for ablations that remove
    the corresponding branch.  ``shape_is_residual`` records whether the shape
    estimate is the subtraction of the two shape maps or the stacked output.
    """

    f_out: torch.Tensor
    f_shape0: torch.Tensor | None
    f_shape1: torch.Tensor | None
    f_contour: torch.Tensor | None
    prob: torch.Tensor
    shape_is_residual: bool = True

    @property
    def shape_feature(self):
        if self.f_shape0 is None:
            return None
        if self.shape_is_residual:
            return residual_shape(self.f_shape0, self.f_shape1)
        return self.f_shape1


def residual_shape(f_shape0, f_shape1):
    """Shape estimate as the element-wise difference of the two shape maps."""
    if f_shape0.shape != f_shape1.shape:
        raise ShapeError(
            f"shape maps differ: {tuple(f_shape0.shape)} vs {tuple(f_shape1.shape)}")
    return f_shape0 - f_shape1


class CENet(nn.Module):
    """Full network: dense V-shaped body, shape/contour branches, fused output."""

    def __init__(self, cfg: NetworkConfig, separable=True):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        k3 = 3 * cfg.growth_k

        self.stem = nn.Sequential(
            nn.Conv3d(1, cfg.base_channels, 3, padding=1, bias=False),
            nn.BatchNorm3d(cfg.base_channels), nn.ReLU(inplace=True))

        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        ch = cfg.base_channels
        for _ in range(cfg.levels):
            self.enc_blocks.append(DBlock(ch, cfg.growth_k, cfg.group_n, separable))
            self.downs.append(DownTransition(k3))
            ch = k3
        self.bottom = DBlock(k3, cfg.growth_k, cfg.group_n, separable)

        self.ups = nn.ModuleList(
            UpTransition(k3, k3) for _ in range(cfg.levels))
        self.dec_blocks = nn.ModuleList(
            DBlock(k3, cfg.growth_k, cfg.group_n, separable) for _ in range(cfg.levels))

        # decoder outputs at every scale (plus the bottom block) are upsampled
        # to full resolution and concatenated, shallowest first
        deep_channels = (cfg.levels + 1) * k3
        ablation = cfg.ablation

        self.contour_transition = None
        if ablation is not Ablation.C_NO_CONTOUR:
            self.contour_transition = DeepTransition(deep_channels, cfg.transition_width)

        self.shape_transition0 = None
        self.shape_transition1 = None
        if ablation is not Ablation.S_NO_SHAPE:
            self.shape_transition0 = DeepTransition(deep_channels, cfg.transition_width)
            shape1_in = 2 if ablation is Ablation.R_NO_RESIDUAL else deep_channels
            self.shape_transition1 = DeepTransition(shape1_in, cfg.transition_width)

        out1_in = deep_channels + (0 if self.contour_transition is None else 2)
        self.out_transition1 = OutTransition(out1_in, cfg.out_growth, cfg.fuse_channels)
        out2_in = cfg.fuse_channels + (0 if self.shape_transition0 is None else 2)
        self.out_transition2 = OutTransition(out2_in, cfg.out_growth, 2)

        if cfg.bn_momentum != 0.1:
            for m in self.modules():
                if isinstance(m, nn.BatchNorm3d):
                    m.momentum = cfg.bn_momentum

    def forward(self, x) -> FeatureBundle:
        if x.ndim != 5 or x.shape[1] != 1:
            raise ShapeError(f"expected (B, 1, D, H, W) input, got {tuple(x.shape)}")
        scale = 2 ** self.cfg.levels
        if any(d % scale for d in x.shape[2:]):
            raise ShapeError(
                f"spatial dims {tuple(x.shape[2:])} not divisible by 2^levels={scale}")
        full_size = x.shape[2:]

        h = self.stem(x)
        skips = []
        for block, down in zip(self.enc_blocks, self.downs):
            h = block(h)
            skips.append(h)
            h = down(h)
        h = self.bottom(h)

        pyramid = [h]  # deepest first
        for up, block, skip in zip(self.ups, self.dec_blocks, reversed(skips)):
            h = up(h) + skip
            h = block(h)
            pyramid.append(h)

        fused = []
        for level in reversed(pyramid):  # shallowest (full resolution) first
            if level.shape[2:] != full_size:
                level = F.interpolate(level, size=full_size, mode="trilinear",
                                      align_corners=False)
            fused.append(level)
        deep = torch.cat(fused, dim=1)

        ablation = self.cfg.ablation
        f_contour = None
        if self.contour_transition is not None:
            f_contour = self.contour_transition(deep)

        f_shape0 = f_shape1 = None
        residual = True
        if self.shape_transition0 is not None:
            f_shape0 = self.shape_transition0(deep)
            if ablation is Ablation.R_NO_RESIDUAL:
                f_shape1 = self.shape_transition1(f_shape0)
                residual = False
            else:
                f_shape1 = self.shape_transition1(deep)

        fuse_in = deep if f_contour is None else torch.cat([deep, f_contour], dim=1)
        fused1 = self.out_transition1(fuse_in)
        if f_shape0 is not None:
            shape_feat = residual_shape(f_shape0, f_shape1) if residual else f_shape1
            fused1 = torch.cat([fused1, shape_feat], dim=1)
        f_out = self.out_transition2(fused1)

        return FeatureBundle(
            f_out=f_out, f_shape0=f_shape0, f_shape1=f_shape1, f_contour=f_contour,
            prob=torch.softmax(f_out, dim=1), shape_is_residual=residual)


def init_parameters(model, seed):
    """Glorot-uniform conv weights, zero biases, identity BN; seeded."""
    gen = torch.Generator().manual_seed(int(seed))
    for m in model.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.xavier_uniform_(m.weight, generator=gen)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm3d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return model


def conv_weights(model):
    """Convolution weight tensors, the set the L2 loss term penalizes."""
    return [m.weight for m in model.modules()
            if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d))]


def count_parameters(cfg: NetworkConfig, separable=True):
    """Total trainable parameter count for a configuration."""
    model = CENet(cfg, separable=separable)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
