"""On-disk checkpoints.

A checkpoint is a directory holding ``weights.safetensors`` (dot-separated
parameter names mapped to little-endian float32 tensors with their shapes) and
``manifest.json`` recording the format version and the model configuration.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import torch
from safetensors.torch import load_file, save_file

from .config import AblationSwitches, DecoderConfig, EncoderConfig
from .model import BrainSegNet

FORMAT_VERSION = 1


def save_checkpoint(model: BrainSegNet, path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors = {name: t.detach().to(torch.float32).contiguous().cpu()
               for name, t in model.state_dict().items()}
    save_file(tensors, str(path / "weights.safetensors"), metadata={"format_version": str(FORMAT_VERSION)})
    manifest = {
        "format_version": FORMAT_VERSION,
        "encoder": asdict(model.encoder_cfg),
        "decoder": asdict(model.decoder_cfg),
        "switches": asdict(model.switches),
        "parameters": {name: list(t.shape) for name, t in sorted(tensors.items())},
    }
    if extra:
        manifest["extra"] = extra
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_manifest(path) -> dict:
    manifest = json.loads((Path(path) / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format_version')!r}")
    return manifest


def load_checkpoint(path, model: BrainSegNet | None = None, strict: bool = True) -> BrainSegNet:
    """Rebuild the model described by the manifest (or fill ``model``) from disk.

    With ``strict=False`` only names present on both sides are loaded, which is
    how weights move between ablation variants.
    """
    path = Path(path)
    manifest = read_manifest(path)
    if model is None:
        model = BrainSegNet(EncoderConfig(**manifest["encoder"]),
                            DecoderConfig(**manifest["decoder"]),
                            AblationSwitches(**manifest["switches"]))
    tensors = load_file(str(path / "weights.safetensors"))
    if not strict:
        own = model.state_dict()
        tensors = {k: v for k, v in tensors.items() if k in own and own[k].shape == v.shape}
    model.load_state_dict(tensors, strict=strict)
    return model
