"""Training loop, learning-rate schedule, slab-sweep inference and the ablation suite."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .config import (ABLATION_VARIANTS, AblationSwitches, DecoderConfig, EncoderConfig,
                     LossConfig, TrainConfig)
from .data import SlabDataset, augment, collate, extract_slab, slab_rng
from .errors import ConfigError, TrainingError
from .losses import DiceReport, hybrid_loss, mean_dice
from .model import BrainSegNet

log = logging.getLogger(__name__)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``base_lr`` over ``warmup_steps``, then ``gamma`` decay per warm-up period."""
    w = cfg.warmup_steps
    if step < w:
        return cfg.base_lr * (step + 1) / w
    return cfg.base_lr * cfg.decay_gamma ** ((step - w) / w)


def set_deterministic(enabled: bool = True, seed: int | None = None):
    torch.use_deterministic_algorithms(enabled)
    if seed is not None:
        torch.manual_seed(seed)


def build_model(encoder_cfg: EncoderConfig, decoder_cfg: DecoderConfig,
                switches: AblationSwitches | None = None, seed: int = 0) -> BrainSegNet:
    """Seeded construction; the encoder is built first so its init does not depend on the decoder."""
    torch.manual_seed(seed)
    return BrainSegNet(copy.deepcopy(encoder_cfg), copy.deepcopy(decoder_cfg),
                       copy.deepcopy(switches or AblationSwitches()))


@dataclass
class RunRecord:
    train_loss: list[dict] = field(default_factory=list)
    val_dice: list[float | None] = field(default_factory=list)
    lr_trace: list[float] = field(default_factory=list)
    wall_clock: float | None = None
    config_hash: str = ""
    data_order_digest: str = ""
    steps: int = 0
    best_epoch: int | None = None
    best_val_dice: float | None = None

    @property
    def epochs_completed(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "run.json").write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        with open(out_dir / "metrics.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "total", "ce", "dice", "edge", "val_dice", "lr"])
            for i, (row, val) in enumerate(zip(self.train_loss, self.val_dice), start=1):
                writer.writerow([i, repr(row["total"]), repr(row["ce"]), repr(row["dice"]),
                                 repr(row.get("edge", 0.0)), "" if val is None else repr(val),
                                 repr(row["lr"])])


def config_hash(*configs) -> str:
    blob = json.dumps([asdict(c) for c in configs], sort_keys=True, default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@torch.no_grad()
def infer_volume(model: BrainSegNet, vol, axis: int = 0, batch_size: int = 8) -> np.ndarray:
    """Predict every slice along ``axis`` from its centred slab and restack the argmax labels."""
    in_plane = tuple(d for i, d in enumerate(vol.shape) if i != axis)
    if in_plane != tuple(model.encoder_cfg.input_size):
        raise ConfigError(f"volume in-plane dims {in_plane} do not match the model input "
                          f"{tuple(model.encoder_cfg.input_size)}")
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    out = np.empty((vol.shape[axis],) + in_plane, dtype=np.int64)
    for start in range(0, vol.shape[axis], batch_size):
        centers = range(start, min(start + batch_size, vol.shape[axis]))
        x = torch.from_numpy(np.stack([extract_slab(vol, axis, c).slices for c in centers]))
        logits, _ = model(x.to(dtype))
        out[start:start + len(centers)] = logits.argmax(dim=1).numpy()
    model.train(was_training)
    return np.moveaxis(out, 0, axis)


def evaluate(model: BrainSegNet, volumes, axis: int = 0, include_background: bool = False) -> DiceReport:
    preds = [infer_volume(model, v, axis) for v in volumes]
    return mean_dice(preds, [v.labels for v in volumes], model.decoder_cfg.num_classes,
                     subjects=[v.subject_id for v in volumes], include_background=include_background)


def train(model: BrainSegNet, dataset, cfg: TrainConfig, loss_cfg: LossConfig | None = None,
          val_volumes=None, out_dir=None, on_step=None) -> RunRecord:
    """Adam + warm-up/exponential-decay schedule over shuffled slabs of ``dataset``.

    ``dataset`` is a list of normalized VolumeBundles. When ``val_volumes`` are
    given, each validated epoch scores them with :func:`evaluate`; with ``out_dir``
    the best and last checkpoints plus ``run.json``/``metrics.csv`` are written.
    ``on_step(step, components)`` is an optional hook for monitoring.
    """
    loss_cfg = loss_cfg or LossConfig()
    set_deterministic(cfg.deterministic, cfg.seed)
    slabs = SlabDataset(dataset, axis=cfg.axis)
    optimizer = torch.optim.Adam(model.param_groups(cfg.base_lr, cfg.base_param_lr))
    dtype = next(model.parameters()).dtype
    record = RunRecord(config_hash=config_hash(model.encoder_cfg, model.decoder_cfg,
                                               model.switches, cfg, loss_cfg))
    order_hash = hashlib.sha256()
    out_dir = Path(out_dir) if out_dir is not None else None
    start = time.perf_counter()
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(slabs))
        sums: dict[str, float] = {}
        n_batches = 0
        for b in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            idx = order[b:b + cfg.batch_size]
            batch = []
            for i in idx:
                slab = slabs.slab(int(i))
                if cfg.augment:
                    slab = augment(slab, slab_rng(cfg.seed, slab.subject_id, int(i), epoch),
                                   cfg.flip_prob, cfg.noise_sigma)
                batch.append(slab)
                order_hash.update(f"{slab.subject_id}:{slab.center_index};".encode())
            x, y, e = collate(batch)
            factor = lr_at(step, cfg) / cfg.base_lr
            for group in optimizer.param_groups:
                group["lr"] = group["initial_lr"] * factor
            logits, edge = model(x.to(dtype))
            total, comps = hybrid_loss(logits, y, edge, None if edge is None else e.to(dtype), loss_cfg)
            if not torch.isfinite(total):
                ids = [(s.subject_id, s.center_index) for s in batch]
                raise TrainingError(f"non-finite loss {float(total.detach())} at step {step}, batch {ids}")
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            record.lr_trace.append(lr_at(step, cfg))
            for k, v in comps.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
            if on_step is not None:
                on_step(step, {k: float(v.detach()) for k, v in comps.items()})
            n_batches += 1
            step += 1
        if n_batches == 0:
            break
        row = {k: v / n_batches for k, v in sums.items()}
        row.setdefault("edge", 0.0)
        row["lr"] = record.lr_trace[-1]
        row["steps"] = n_batches
        record.train_loss.append(row)

        val = None
        last_epoch = epoch == cfg.epochs - 1 or (cfg.max_steps is not None and step >= cfg.max_steps)
        if val_volumes and ((epoch + 1) % cfg.validate_every == 0 or last_epoch):
            val = evaluate(model, val_volumes, cfg.axis).grand_mean
            if record.best_val_dice is None or val > record.best_val_dice:
                record.best_val_dice, record.best_epoch = val, epoch + 1
                if out_dir is not None:
                    save_checkpoint(model, out_dir / "checkpoints" / "best", {"epoch": epoch + 1, "val_dice": val})
        record.val_dice.append(val)
        log.info("epoch %d loss %.4f val_dice %s", epoch + 1, row["total"], val)
        if last_epoch:
            break

    record.steps = step
    record.data_order_digest = order_hash.hexdigest()
    record.wall_clock = None if cfg.deterministic else time.perf_counter() - start
    if out_dir is not None:
        save_checkpoint(model, out_dir / "checkpoints" / "last", {"epoch": record.epochs_completed})
        record.write(out_dir)
    return record


def repeated_batch_losses(model: BrainSegNet, slabs, steps: int = 20, lr: float = 1e-3,
                          loss_cfg: LossConfig | None = None) -> list[float]:
    """Take ``steps`` Adam steps on one fixed batch at constant ``lr``; return the loss before each."""
    loss_cfg = loss_cfg or LossConfig()
    x, y, e = collate(slabs)
    dtype = next(model.parameters()).dtype
    optimizer = torch.optim.Adam(model.param_groups(lr, lr * 0.1))
    model.train()
    losses = []
    for _ in range(steps):
        logits, edge = model(x.to(dtype))
        total, _ = hybrid_loss(logits, y, edge, None if edge is None else e.to(dtype), loss_cfg)
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
        losses.append(float(total.detach()))
    return losses


def run_ablation_suite(train_volumes, test_volumes, encoder_cfg: EncoderConfig,
                       decoder_cfg: DecoderConfig, train_cfg: TrainConfig,
                       loss_cfg: LossConfig | None = None, out_dir=None,
                       variants: dict | None = None) -> list[dict]:
    """Train each ablation variant with identical data, seed and schedule; score on the test set."""
    variants = variants or ABLATION_VARIANTS
    rows = []
    for name, switches in variants.items():
        model = build_model(encoder_cfg, decoder_cfg, switches, seed=train_cfg.seed)
        sub = Path(out_dir) / name if out_dir is not None else None
        record = train(model, train_volumes, train_cfg, loss_cfg, out_dir=sub)
        report = evaluate(model, test_volumes, train_cfg.axis)
        rows.append({
            "variant": name,
            "grand_mean_dice": report.grand_mean,
            "final_loss": record.train_loss[-1]["total"],
            "data_order_digest": record.data_order_digest,
            "num_parameters": sum(p.numel() for p in model.parameters()),
        })
        log.info("ablation %s: dice %.4f", name, report.grand_mean)
    if out_dir is not None:
        write_ablation_table(rows, out_dir)
    return rows


def write_ablation_table(rows, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "grand_mean_dice"])
        for row in rows:
            writer.writerow([row["variant"], repr(row["grand_mean_dice"])])
    full = next((r["grand_mean_dice"] for r in rows if r["variant"] == "full"), math.nan)
    summary = {
        "rows": rows,
        "full_is_best": bool(all(full >= r["grand_mean_dice"] for r in rows)),
    }
    (out_dir / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
