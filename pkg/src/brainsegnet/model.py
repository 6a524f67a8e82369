from __future__ import annotations

import torch.nn as nn

from .config import AblationSwitches, DecoderConfig, EncoderConfig
from .decoder import Decoder
from .encoder import ImageEncoder, is_adaptation_param


class BrainSegNet(nn.Module):
    """Encoder + decoder wired according to ``switches``.

    ``forward`` takes a ``(B, 5, H, W)`` slab and returns ``(logits, edge_map)``;
    ``edge_map`` is None when boundary refinement is ablated.
    """

    def __init__(self, encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig,
                 switches: AblationSwitches | None = None):
        super().__init__()
        self.switches = switches or AblationSwitches()
        if decoder_cfg.in_channels != encoder_cfg.embed_dim:
            raise ValueError(f"decoder in_channels {decoder_cfg.in_channels} != "
                             f"encoder embed_dim {encoder_cfg.embed_dim}")
        if decoder_cfg.upsample_factor != encoder_cfg.patch_size:
            raise ValueError(f"decoder upsample_factor {decoder_cfg.upsample_factor} != "
                             f"patch_size {encoder_cfg.patch_size}")
        self.encoder_cfg = encoder_cfg
        self.decoder_cfg = decoder_cfg
        self.encoder = ImageEncoder(encoder_cfg, use_skips=self.switches.use_unet_skips)
        self.decoder = Decoder(decoder_cfg, self.switches)

    def forward(self, slab):
        return self.decoder(self.encoder(slab))

    def parameter_manifest(self) -> list[str]:
        return sorted(name for name, _ in self.named_parameters())

    def param_groups(self, adapt_lr: float, base_lr: float) -> list[dict]:
        """Optimizer groups: new/adaptation weights at ``adapt_lr``, unfrozen ViT base at ``base_lr``."""
        adapt, base = [], []
        for name, p in self.named_parameters():
            if not p.requires_grad:
                continue
            if name.startswith("decoder.") or is_adaptation_param(name):
                adapt.append(p)
            else:
                base.append(p)
        groups = [{"params": adapt, "lr": adapt_lr, "initial_lr": adapt_lr}]
        if base:
            groups.append({"params": base, "lr": base_lr, "initial_lr": base_lr})
        return groups
