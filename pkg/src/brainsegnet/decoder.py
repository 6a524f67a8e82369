"""Multi-scale attention decoder: dual ASPP -> CSA -> boundary refinement."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import AblationSwitches, DecoderConfig
from .errors import ConfigError


def gn_groups(channels: int) -> int:
    if channels < 8:
        return channels
    return math.gcd(8, channels)


class WrapConv2d(nn.Conv2d):
    """Stride-1 conv with periodic padding of any width (taps wrap modulo the map size)."""

    def __init__(self, cin, cout, kernel, dilation=1, bias=True):
        super().__init__(cin, cout, kernel, dilation=dilation, bias=bias)
        self.wrap = dilation * (kernel // 2)

    def forward(self, x):
        p = self.wrap
        if p:
            h, w = x.shape[-2:]
            rows = torch.arange(-p, h + p, device=x.device) % h
            cols = torch.arange(-p, w + p, device=x.device) % w
            x = x.index_select(-2, rows).index_select(-1, cols)
        return F.conv2d(x, self.weight, self.bias, dilation=self.dilation)


def conv_gn_relu(cin, cout, kernel=3, dilation=1):
    return nn.Sequential(
        WrapConv2d(cin, cout, kernel, dilation=dilation, bias=False),
        nn.GroupNorm(gn_groups(cout), cout),
        nn.ReLU(inplace=True),
    )


class DualASPP(nn.Module):
    """ASPP with an extra pooled context vector injected before the widest branch.

    Branches: one per dilation rate (rate 1 is a 1x1 conv) plus a global-pooling
    branch. A second pooled path is projected and added to the input of the
    largest-rate ("bottom") branch. All branch outputs are concatenated and fused
    by a 1x1 conv. Convs pad periodically, so constant maps stay constant and
    the stage commutes with cyclic shifts.
    """

    def __init__(self, in_channels: int, out_channels: int, rates=(1, 6, 12, 18)):
        super().__init__()
        self.rates = tuple(rates)
        self.branches = nn.ModuleList(
            conv_gn_relu(in_channels, out_channels, kernel=1 if r == 1 else 3, dilation=r)
            for r in self.rates)
        self.global_branch = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(in_channels, out_channels, 1, bias=False),
            nn.ReLU(inplace=True),
        )
        self.bottom_pool = nn.Sequential(
            nn.AdaptiveAvgPool2d(1),
            nn.Conv2d(in_channels, in_channels, 1),
        )
        self.fuse = conv_gn_relu(out_channels * (len(self.rates) + 1), out_channels, kernel=1)

    @property
    def fusion_in_channels(self) -> int:
        return self.fuse[0].in_channels

    def forward(self, x):
        h, w = x.shape[-2:]
        last = len(self.branches) - 1
        outs = []
        for i, branch in enumerate(self.branches):
            inp = x + self.bottom_pool(x) if i == last else x
            outs.append(branch(inp))
        outs.append(self.global_branch(x).expand(-1, -1, h, w))
        return self.fuse(torch.cat(outs, dim=1))


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int = 8):
        super().__init__()
        if channels % reduction:
            raise ConfigError(f"channels={channels} not divisible by reduction={reduction}")
        self.mlp = nn.Sequential(
            nn.Conv2d(channels, channels // reduction, 1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels // reduction, channels, 1, bias=False),
        )

    def forward(self, x):
        avg = F.adaptive_avg_pool2d(x, 1)
        mx = F.adaptive_max_pool2d(x, 1)
        return torch.sigmoid(self.mlp(avg) + self.mlp(mx))


class SpatialAttention(nn.Module):
    def __init__(self, kernel: int = 7):
        super().__init__()
        if kernel % 2 == 0:
            raise ConfigError(f"spatial attention kernel must be odd, got {kernel}")
        self.conv = WrapConv2d(2, 1, kernel, bias=False)

    def forward(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return torch.sigmoid(self.conv(pooled))


class CSA(nn.Module):
    def __init__(self, channels: int, reduction: int = 8, kernel: int = 7):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction)
        self.spatial = SpatialAttention(kernel)

    def forward(self, x):
        x = x * self.channel(x)
        return x * self.spatial(x)


def make_classifier(cin: int, cfg: DecoderConfig) -> nn.Module:
    if cfg.upsample_mode == "transposed":
        f = cfg.upsample_factor
        return nn.ConvTranspose2d(cin, cfg.num_classes, kernel_size=f, stride=f)
    return nn.Conv2d(cin, cfg.num_classes, 1)


class BoundaryRefine(nn.Module):
    """Predict an edge map, feed it back with the features, and classify.

    Returns class scores at feature resolution (or already upsampled when the
    classifier is a transposed conv) and the edge map in (0, 1).
    """

    def __init__(self, channels: int, cfg: DecoderConfig):
        super().__init__()
        mid = max(channels // 2, 1)
        self.edge_head = nn.Sequential(
            WrapConv2d(channels, mid, 3),
            nn.ReLU(inplace=True),
            WrapConv2d(mid, 1, 3),
        )
        self.refine = nn.Sequential(
            conv_gn_relu(channels + 1, cfg.br_channels),
            conv_gn_relu(cfg.br_channels, cfg.br_channels),
        )
        self.classifier = make_classifier(cfg.br_channels, cfg)

    def forward(self, x):
        edge = torch.sigmoid(self.edge_head(x))
        y = self.refine(torch.cat([x, edge], dim=1))
        return self.classifier(y), edge


class MlpHead(nn.Module):
    """Per-pixel MLP used in place of boundary refinement."""

    def __init__(self, channels: int, cfg: DecoderConfig):
        super().__init__()
        self.hidden = nn.Conv2d(channels, cfg.br_channels, 1)
        self.classifier = make_classifier(cfg.br_channels, cfg)

    def forward(self, x):
        return self.classifier(F.relu(self.hidden(x))), None


class Decoder(nn.Module):
    """Decoder whose wiring is fixed by the ablation switches.

    full: ASPP -> CSA -> BR. Without CSA the ASPP output feeds BR directly.
    Without ASPP a 1x1 conv matches encoder channels before CSA. Without BR a
    per-pixel MLP produces the logits and no edge map is returned.
    """

    def __init__(self, cfg: DecoderConfig, switches: AblationSwitches | None = None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.switches = switches or AblationSwitches()
        a = cfg.aspp_channels
        if self.switches.use_aspp:
            self.aspp = DualASPP(cfg.in_channels, a, cfg.dilation_rates)
        else:
            self.channel_match = nn.Conv2d(cfg.in_channels, a, 1)
        if self.switches.use_csa:
            self.csa = CSA(a, cfg.reduction, cfg.spatial_kernel)
        if self.switches.use_br:
            self.br = BoundaryRefine(a, cfg)
        else:
            self.mlp_head = MlpHead(a, cfg)

    def features(self, x):
        x = self.aspp(x) if self.switches.use_aspp else self.channel_match(x)
        if self.switches.use_csa:
            x = self.csa(x)
        return x

    def head(self, x):
        """Class scores before upsampling, plus the edge map (or None)."""
        x = self.features(x)
        return self.br(x) if self.switches.use_br else self.mlp_head(x)

    def forward(self, x):
        scores, edge = self.head(x)
        if self.cfg.upsample_mode == "bilinear" and self.cfg.upsample_factor > 1:
            scores = F.interpolate(scores, scale_factor=self.cfg.upsample_factor,
                                   mode="bilinear", align_corners=False)
        return scores, edge
