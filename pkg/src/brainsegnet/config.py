"""Hyperparameter records shared by the model, the trainer and the CLI."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from typing import Any

from .errors import ConfigError


@dataclass
class EncoderConfig:
    embed_dim: int = 96
    num_blocks: int = 8
    num_heads: int = 4
    patch_size: int = 8
    slab_depth: int = 5
    adapter_bottleneck: int = 16
    lora_rank: int = 4
    lora_scale: float = 1.0
    mlp_ratio: float = 4.0
    input_size: tuple[int, int] = (64, 64)
    freeze_base: bool = True
    slice_fusion: str = "mean"

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.validate()

    def validate(self):
        for name in ("embed_dim", "num_blocks", "num_heads", "patch_size",
                     "slab_depth", "adapter_bottleneck"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer, got {getattr(self, name)}")
        if self.num_blocks % 2:
            raise ConfigError(f"num_blocks must be even for symmetric skip pairing, got {self.num_blocks}")
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim={self.embed_dim} is not divisible by num_heads={self.num_heads}")
        if self.lora_rank < 0:
            raise ConfigError(f"lora_rank must be >= 0, got {self.lora_rank}")
        if len(self.input_size) != 2:
            raise ConfigError(f"input_size must be (H, W), got {self.input_size}")
        for axis, size in zip(("height", "width"), self.input_size):
            if size % self.patch_size:
                raise ConfigError(f"input {axis} {size} is not divisible by patch_size {self.patch_size}")
        if self.slice_fusion not in ("mean", "center"):
            raise ConfigError(f"unknown slice_fusion {self.slice_fusion!r}")

    @property
    def grid_size(self) -> tuple[int, int]:
        return (self.input_size[0] // self.patch_size, self.input_size[1] // self.patch_size)

    @property
    def num_tokens(self) -> int:
        h, w = self.grid_size
        return h * w


@dataclass
class DecoderConfig:
    in_channels: int = 96
    aspp_channels: int = 128
    dilation_rates: tuple[int, ...] = (1, 6, 12, 18)
    num_classes: int = 11
    reduction: int = 8
    spatial_kernel: int = 7
    br_channels: int = 64
    upsample_factor: int = 8
    upsample_mode: str = "bilinear"

    def __post_init__(self):
        self.dilation_rates = tuple(int(r) for r in self.dilation_rates)
        self.validate()

    def validate(self):
        rates = self.dilation_rates
        if not rates:
            raise ConfigError("dilation_rates must not be empty")
        if any(r < 1 for r in rates) or any(b <= a for a, b in zip(rates, rates[1:])):
            raise ConfigError(f"dilation_rates must be strictly increasing and >= 1, got {list(rates)}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.spatial_kernel % 2 == 0:
            raise ConfigError(f"spatial_kernel must be odd, got {self.spatial_kernel}")
        if self.aspp_channels % self.reduction:
            raise ConfigError(
                f"aspp_channels={self.aspp_channels} is not divisible by reduction={self.reduction}")
        if self.upsample_factor < 1:
            raise ConfigError(f"upsample_factor must be >= 1, got {self.upsample_factor}")
        if self.upsample_mode not in ("bilinear", "transposed"):
            raise ConfigError(f"unknown upsample_mode {self.upsample_mode!r}")


@dataclass
class AblationSwitches:
    use_unet_skips: bool = True
    use_aspp: bool = True
    use_csa: bool = True
    use_br: bool = True

    @property
    def name(self) -> str:
        off = [n for n, on in (("unet", self.use_unet_skips), ("aspp", self.use_aspp),
                               ("csa", self.use_csa), ("br", self.use_br)) if not on]
        return "full" if not off else "no_" + "_".join(off)


ABLATION_VARIANTS = {
    "full": AblationSwitches(),
    "no_unet": AblationSwitches(use_unet_skips=False),
    "no_aspp": AblationSwitches(use_aspp=False),
    "no_csa": AblationSwitches(use_csa=False),
    "no_br": AblationSwitches(use_br=False),
}


@dataclass
class LossConfig:
    alpha: float = 0.2
    beta: float = 0.8
    edge_weight: float = 0.1
    smooth_eps: float = 1e-5
    include_background_in_dice: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ConfigError(f"need alpha, beta >= 0 and alpha + beta > 0, got {self.alpha}, {self.beta}")
        if self.edge_weight < 0:
            raise ConfigError(f"edge_weight must be >= 0, got {self.edge_weight}")
        if self.smooth_eps <= 0:
            raise ConfigError(f"smooth_eps must be > 0, got {self.smooth_eps}")


@dataclass
class TrainConfig:
    base_lr: float = 1e-3
    base_param_lr: float = 1e-4
    warmup_steps: int = 50
    decay_gamma: float = 0.9
    batch_size: int = 8
    epochs: int = 20
    max_steps: int | None = None
    seed: int = 0
    axis: int = 0
    validate_every: int = 1
    flip_prob: float = 0.5
    noise_sigma: float = 0.05
    augment: bool = True
    deterministic: bool = True

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 < self.decay_gamma < 1:
            raise ConfigError(f"decay_gamma must lie in (0, 1), got {self.decay_gamma}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")


@dataclass
class DataConfig:
    data_dir: str = "data"
    split: str = "split.json"
    dims: tuple[int, int, int] = (64, 64, 64)
    num_foreground: int = 10
    count: int = 10
    train_fraction: float = 0.8
    val_count: int = 1

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ConfigError(f"dims must be three positive sizes, got {list(self.dims)}")
        if self.num_foreground < 1:
            raise ConfigError(f"num_foreground must be >= 1, got {self.num_foreground}")
        if self.count < 1:
            raise ConfigError(f"count must be >= 1, got {self.count}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.val_count < 0:
            raise ConfigError(f"val_count must be >= 0, got {self.val_count}")


# fields that RunSpec.sync computes from others
DERIVED = {
    "decoder.in_channels": "encoder.embed_dim",
    "decoder.upsample_factor": "encoder.patch_size",
    "decoder.num_classes": "data.num_foreground + 1",
    "encoder.input_size": "data.dims without train.axis",
}

SECTIONS = {
    "encoder": EncoderConfig,
    "decoder": DecoderConfig,
    "switches": AblationSwitches,
    "loss": LossConfig,
    "train": TrainConfig,
    "data": DataConfig,
}


@dataclass
class RunSpec:
    """Everything a CLI run needs, merged from defaults, a JSON file and flags."""

    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    switches: AblationSwitches = field(default_factory=AblationSwitches)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "RunSpec":
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for section, klass in SECTIONS.items():
            values = dict(raw.get(section, {}))
            names = {f.name for f in fields(klass)}
            bad = set(values) - names
            if bad:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(bad)}")
            kwargs[section] = klass(**values)
        spec = cls(**kwargs)
        spec.sync()
        for key, source in DERIVED.items():
            section, name = key.split(".")
            if name in raw.get(section, {}):
                given = raw[section][name]
                given = tuple(given) if isinstance(given, list) else given
                if given != getattr(getattr(spec, section), name):
                    raise ConfigError(f"{key}={given!r} contradicts its derivation from {source} "
                                      f"({getattr(getattr(spec, section), name)!r})")
        return spec

    def to_dict(self) -> dict[str, Any]:
        return {name: _plain(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}

    def sync(self):
        """Propagate values the decoder derives from the encoder."""
        self.decoder.in_channels = self.encoder.embed_dim
        self.decoder.upsample_factor = self.encoder.patch_size
        self.decoder.num_classes = self.data.num_foreground + 1
        self.encoder.input_size = tuple(
            d for i, d in enumerate(self.data.dims) if i != self.train.axis)
        self.encoder.validate()
        self.decoder.validate()

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
