"""ViT image encoder with symmetric long skips, 3D adapters and LoRA factors.

Token tensors flowing between blocks have shape ``(batch, slab_depth, tokens, embed_dim)``.
Attention runs per slice (slices folded into the batch); only the adapters mix
information across the slab.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import EncoderConfig
from .errors import ConfigError

ADAPTATION_KEYS = (".lora.", ".adapter.", "fuse.", "slice_embed")


def is_adaptation_param(name: str) -> bool:
    """True for parameters added for fine-tuning (never part of an imported ViT)."""
    return any(key in name for key in ADAPTATION_KEYS)


def skip_pairs(num_blocks: int) -> list[tuple[int, int]]:
    """(consumer, producer) pairs, 1-based: block ``N+1-i`` receives block ``i``'s output."""
    if num_blocks % 2:
        raise ConfigError(f"num_blocks must be even, got {num_blocks}")
    half = num_blocks // 2
    return [(half + k, half + 1 - k) for k in range(1, half + 1)]


def lora_linear(x, base_weight, A, B, scale=1.0, bias=None):
    """``x @ W + scale * (x @ A) @ B``.

    ``base_weight`` is laid out (in, out). A rank-0 factor (``A`` with zero
    columns) reduces to the base product.
    """
    out = x @ base_weight
    if bias is not None:
        out = out + bias
    if A is not None and A.shape[-1] > 0:
        out = out + scale * ((x @ A) @ B)
    return out


class LoraFactor(nn.Module):
    def __init__(self, in_features: int, out_features: int, rank: int, scale: float = 1.0):
        super().__init__()
        self.rank = rank
        self.scale = scale
        self.A = nn.Parameter(torch.empty(in_features, rank))
        self.B = nn.Parameter(torch.zeros(rank, out_features))
        if rank:
            nn.init.kaiming_uniform_(self.A.T, a=math.sqrt(5))


class LoraLinear(nn.Module):
    """A frozen ``nn.Linear`` plus a trainable low-rank update."""

    def __init__(self, in_features: int, out_features: int, rank: int, scale: float = 1.0):
        super().__init__()
        self.base = nn.Linear(in_features, out_features)
        self.lora = LoraFactor(in_features, out_features, rank, scale) if rank > 0 else None

    def forward(self, x):
        if self.lora is None:
            return self.base(x)
        return lora_linear(x, self.base.weight.t(), self.lora.A, self.lora.B,
                           self.lora.scale, self.base.bias)


class PatchEmbed(nn.Module):
    """Patchify each slice of a ``(B, S, H, W)`` slab with shared weights."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.embed_dim
        self.proj = nn.Conv2d(1, c, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, 1, cfg.num_tokens, c))
        self.slice_embed = nn.Parameter(torch.zeros(1, cfg.slab_depth, 1, c))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.slice_embed, std=0.02)

    def forward(self, slab):
        if slab.ndim != 4:
            raise ConfigError(f"slab must be (batch, depth, H, W), got shape {tuple(slab.shape)}")
        b, s, h, w = slab.shape
        for axis, got, want in (("depth", s, self.cfg.slab_depth),
                                ("height", h, self.cfg.input_size[0]),
                                ("width", w, self.cfg.input_size[1])):
            if got != want:
                raise ConfigError(f"slab {axis} is {got}, encoder configured for {want}")
        x = self.proj(slab.reshape(b * s, 1, h, w))
        x = x.flatten(2).transpose(1, 2).reshape(b, s, -1, self.cfg.embed_dim)
        return x + self.pos_embed + self.slice_embed


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int, rank: int, scale: float):
        super().__init__()
        self.num_heads = num_heads
        self.q = LoraLinear(dim, dim, rank, scale)
        self.k = nn.Linear(dim, dim)
        self.v = LoraLinear(dim, dim, rank, scale)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x, return_attn: bool = False):
        # x: (batch*slices, tokens, dim)
        n, t, c = x.shape
        hd = c // self.num_heads

        def heads(y):
            return y.reshape(n, t, self.num_heads, hd).transpose(1, 2)

        q, k, v = heads(self.q(x)), heads(self.k(x)), heads(self.v(x))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(hd), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, t, c)
        out = self.proj(out)
        return (out, attn) if return_attn else out


class Adapter3D(nn.Module):
    """Residual bottleneck that mixes the slab axis at each token position."""

    def __init__(self, dim: int, bottleneck: int, kernel: int = 3):
        super().__init__()
        self.down = nn.Linear(dim, bottleneck)
        self.depth_mix = nn.Conv1d(bottleneck, bottleneck, kernel, padding=kernel // 2,
                                   groups=bottleneck, padding_mode="replicate")
        self.up = nn.Linear(bottleneck, dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x):
        b, s, n, _ = x.shape
        h = self.down(x)
        k = h.shape[-1]
        h = h.permute(0, 2, 3, 1).reshape(b * n, k, s)
        h = self.depth_mix(h)
        h = h.reshape(b, n, k, s).permute(0, 3, 1, 2)
        return x + self.up(F.gelu(h))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        c = cfg.embed_dim
        self.norm1 = nn.LayerNorm(c)
        self.attn = Attention(c, cfg.num_heads, cfg.lora_rank, cfg.lora_scale)
        self.adapter = Adapter3D(c, cfg.adapter_bottleneck)
        self.norm2 = nn.LayerNorm(c)
        self.mlp = Mlp(c, int(c * cfg.mlp_ratio))

    def forward(self, x, return_attn: bool = False):
        b, s, n, c = x.shape
        a = self.attn(self.norm1(x).reshape(b * s, n, c), return_attn=return_attn)
        if return_attn:
            a, attn = a
        x = x + a.reshape(b, s, n, c)
        x = self.adapter(x)
        x = x + self.mlp(self.norm2(x))
        return (x, attn) if return_attn else x


class SkipFusion(nn.Module):
    """Concatenate a long-skip snapshot onto the running tokens and project back.

    The projection starts as ``[I | 0]`` so the skip is ignored until trained.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(2 * dim, dim)
        with torch.no_grad():
            self.proj.weight.zero_()
            self.proj.weight[:, :dim] = torch.eye(dim)
            self.proj.bias.zero_()

    def forward(self, tokens, skip):
        if tokens.shape != skip.shape:
            raise RuntimeError(
                f"skip wiring error: tokens {tuple(tokens.shape)} vs skip {tuple(skip.shape)}")
        return self.proj(torch.cat([tokens, skip], dim=-1))


class ImageEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, use_skips: bool = True):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.use_skips = use_skips
        self.patch_embed = PatchEmbed(cfg)
        self.blocks = nn.ModuleList(TransformerBlock(cfg) for _ in range(cfg.num_blocks))
        if use_skips:
            self.fuse = nn.ModuleDict(
                {str(consumer): SkipFusion(cfg.embed_dim) for consumer, _ in skip_pairs(cfg.num_blocks)})
        self.set_base_trainable(not cfg.freeze_base)

    def set_base_trainable(self, trainable: bool):
        for name, p in self.named_parameters():
            p.requires_grad_(trainable or is_adaptation_param("encoder." + name))

    def tokens(self, slab, use_skips: bool | None = None):
        """Run the blocks and return the final TokenGrid plus the skip store."""
        use_skips = self.use_skips if use_skips is None else use_skips
        if use_skips and not self.use_skips:
            raise ConfigError("encoder was built without skip fusion layers")
        n = self.cfg.num_blocks
        half = n // 2
        x = self.patch_embed(slab)
        store = []
        for j, block in enumerate(self.blocks, start=1):
            if j > half and use_skips:
                x = self.fuse[str(j)](x, store[n - j])
            x = block(x)
            if j <= half:
                store.append(x)
        return x, store

    def forward(self, slab, use_skips: bool | None = None):
        x, _ = self.tokens(slab, use_skips)
        if self.cfg.slice_fusion == "mean":
            x = x.mean(dim=1)
        else:
            x = x[:, self.cfg.slab_depth // 2]
        b, _, c = x.shape
        h, w = self.cfg.grid_size
        return x.transpose(1, 2).reshape(b, c, h, w)


def import_vit_weights(encoder: ImageEncoder, state_dict, name_map=None):
    """Copy compatible tensors from an external ViT checkpoint into ``encoder``.

    ``name_map`` translates external names to encoder names. Returns the lists
    of loaded and skipped external names; shape mismatches are skipped.
    """
    own = dict(encoder.named_parameters())
    loaded, skipped = [], []
    with torch.no_grad():
        for key, value in state_dict.items():
            target = name_map(key) if callable(name_map) else (name_map or {}).get(key, key)
            param = own.get(target)
            value = torch.as_tensor(value)
            if param is None or param.shape != value.shape:
                skipped.append(key)
                continue
            param.copy_(value.to(param.dtype))
            loaded.append(key)
    return loaded, skipped
