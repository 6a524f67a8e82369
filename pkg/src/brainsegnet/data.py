"""Volume bundles, preprocessing, 5-slice slabs, augmentation and synthetic phantoms."""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .errors import (BundleError, ChecksumError, DataError, DimensionMismatchError,
                     LabelRangeError)
from .losses import edge_target_from_labels

SLAB_DEPTH = 5
DTYPES = {"f32": np.dtype("<f4"), "u16": np.dtype("<u2")}


@dataclass
class VolumeBundle:
    intensities: np.ndarray
    labels: np.ndarray
    voxel_size_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    subject_id: str = "subject"

    def __post_init__(self):
        self.voxel_size_mm = tuple(float(v) for v in self.voxel_size_mm)

    @property
    def shape(self):
        return self.intensities.shape

    def validate(self, num_classes: int | None = None):
        if self.intensities.ndim != 3:
            raise DimensionMismatchError(f"{self.subject_id}: intensities must be 3D, got {self.intensities.shape}")
        if self.intensities.shape != self.labels.shape:
            raise DimensionMismatchError(
                f"{self.subject_id}: intensities {self.intensities.shape} vs labels {self.labels.shape}")
        if num_classes is not None and self.labels.size:
            lo, hi = int(self.labels.min()), int(self.labels.max())
            if lo < 0 or hi >= num_classes:
                bad = lo if lo < 0 else hi
                where = tuple(int(i) for i in np.argwhere(self.labels == bad)[0])
                raise LabelRangeError(
                    f"{self.subject_id}: label {bad} at voxel {where} outside [0, {num_classes})")
        return self


@dataclass
class SliceSlab:
    slices: np.ndarray
    center_labels: np.ndarray
    center_edge: np.ndarray
    subject_id: str = ""
    axis: int = 0
    center_index: int = 0


@dataclass
class SplitManifest:
    train_ids: list[str]
    test_ids: list[str]
    seed: int

    def __post_init__(self):
        overlap = set(self.train_ids) & set(self.test_ids)
        if overlap:
            raise DataError(f"train and test overlap: {sorted(overlap)}")

    def save(self, path):
        Path(path).write_text(json.dumps(
            {"train_ids": self.train_ids, "test_ids": self.test_ids, "seed": self.seed},
            indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        raw = json.loads(Path(path).read_text())
        return cls(list(raw["train_ids"]), list(raw["test_ids"]), int(raw["seed"]))


# -- bundle I/O ---------------------------------------------------------------

def _sha256(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def save_volume_bundle(vol: VolumeBundle, path, num_classes: int | None = None) -> Path:
    """Write ``header.json`` + ``intensities.raw`` + ``labels.raw`` (little endian, X fastest)."""
    vol.validate()
    if vol.labels.size and (vol.labels.min() < 0 or vol.labels.max() > np.iinfo(np.uint16).max):
        raise LabelRangeError(f"{vol.subject_id}: labels do not fit in u16")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    payloads = {
        "intensities": np.asarray(vol.intensities, dtype=DTYPES["f32"]).tobytes(order="F"),
        "labels": np.asarray(vol.labels, dtype=DTYPES["u16"]).tobytes(order="F"),
    }
    header = {
        "dims": [int(d) for d in vol.shape],
        "dtypes": {"intensities": "f32", "labels": "u16"},
        "voxel_size_mm": list(vol.voxel_size_mm),
        "subject_id": vol.subject_id,
        "sha256": {name: _sha256(blob) for name, blob in payloads.items()},
    }
    if num_classes is not None:
        header["num_classes"] = int(num_classes)
    for name, blob in payloads.items():
        (path / f"{name}.raw").write_bytes(blob)
    (path / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True))
    return path


def load_volume_bundle(path, num_classes: int | None = None) -> VolumeBundle:
    path = Path(path)
    try:
        header = json.loads((path / "header.json").read_text())
    except FileNotFoundError as exc:
        raise BundleError(f"{path}: missing header.json") from exc
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 3:
        raise DimensionMismatchError(f"{path}: header dims must have 3 entries, got {dims}")
    arrays = {}
    for name in ("intensities", "labels"):
        code = header["dtypes"][name]
        if code not in DTYPES:
            raise BundleError(f"{path}: unknown dtype code {code!r} for {name}")
        blob = (path / f"{name}.raw").read_bytes()
        if _sha256(blob) != header["sha256"][name]:
            raise ChecksumError(f"{path}: sha256 mismatch for {name}.raw")
        dtype = DTYPES[code]
        count = len(blob) // dtype.itemsize
        if len(blob) % dtype.itemsize or count != math.prod(dims):
            raise DimensionMismatchError(
                f"{path}: {name}.raw holds {len(blob) / dtype.itemsize:g} elements, header dims "
                f"{dims} need {math.prod(dims)}")
        arrays[name] = np.frombuffer(blob, dtype=dtype).reshape(dims, order="F")
    vol = VolumeBundle(
        intensities=arrays["intensities"].astype(np.float32),
        labels=arrays["labels"].astype(np.int64),
        voxel_size_mm=tuple(header.get("voxel_size_mm", (1.0, 1.0, 1.0))),
        subject_id=str(header.get("subject_id", path.name)),
    )
    if num_classes is None:
        num_classes = header.get("num_classes")
    return vol.validate(num_classes)


# -- preprocessing ------------------------------------------------------------

def center_crop(vol: VolumeBundle, target) -> VolumeBundle:
    """Symmetric crop; with an odd margin the high side loses the extra voxel."""
    target = tuple(int(t) for t in target)
    if len(target) != vol.intensities.ndim:
        raise DataError(f"crop target {target} does not match volume rank {vol.intensities.ndim}")
    index = []
    for axis, (src, dst) in enumerate(zip(vol.shape, target)):
        if dst > src:
            raise DataError(f"crop target {dst} exceeds source extent {src} on axis {axis}")
        lo = (src - dst) // 2
        index.append(slice(lo, lo + dst))
    index = tuple(index)
    return replace(vol, intensities=vol.intensities[index].copy(), labels=vol.labels[index].copy())


def normalize(vol: VolumeBundle) -> VolumeBundle:
    """Z-score over nonzero voxels; zero voxels stay zero."""
    x = np.asarray(vol.intensities, dtype=np.float64)
    mask = x != 0
    if not mask.any():
        raise DataError(f"{vol.subject_id}: volume has no nonzero voxels")
    values = x[mask]
    std = values.std()
    if std == 0 or not np.isfinite(std):
        raise DataError(f"{vol.subject_id}: nonzero intensities are constant, cannot normalize")
    out = np.zeros_like(x)
    out[mask] = (values - values.mean()) / std
    return replace(vol, intensities=out.astype(np.float32))


# -- slabs ----------------------------------------------------------------------

def slab_indices(center: int, extent: int, depth: int = SLAB_DEPTH) -> np.ndarray:
    half = depth // 2
    return np.clip(np.arange(center - half, center + half + 1), 0, extent - 1)


def extract_slab(vol: VolumeBundle, axis: int, center_index: int, depth: int = SLAB_DEPTH) -> SliceSlab:
    """``depth`` consecutive slices around ``center_index``; out-of-range slices replicate the edge."""
    extent = vol.shape[axis]
    if not 0 <= center_index < extent:
        raise IndexError(f"center_index {center_index} outside [0, {extent}) on axis {axis}")
    img = np.moveaxis(vol.intensities, axis, 0)
    lab = np.moveaxis(vol.labels, axis, 0)
    slices = np.ascontiguousarray(img[slab_indices(center_index, extent, depth)], dtype=np.float32)
    center = np.ascontiguousarray(lab[center_index])
    edge = edge_target_from_labels(torch.from_numpy(center)[None])[0, 0].numpy().astype(np.uint8)
    return SliceSlab(slices, center, edge, vol.subject_id, axis, center_index)


def augment(slab: SliceSlab, rng: np.random.Generator, flip_prob: float = 0.5,
            noise_sigma: float = 0.05, flip_axes=(1,)) -> SliceSlab:
    """Random in-plane flips (applied to slices, labels and edges) plus Gaussian noise.

    ``flip_axes`` index the in-plane axes (0 = rows, 1 = columns). One flip draw
    per axis and one noise draw are always consumed so the rng stream does not
    depend on outcomes.
    """
    slices, labels, edge = slab.slices, slab.center_labels, slab.center_edge
    for ax in flip_axes:
        if rng.random() < flip_prob:
            slices = np.flip(slices, axis=ax + 1)
            labels = np.flip(labels, axis=ax)
            edge = np.flip(edge, axis=ax)
    noise = rng.standard_normal(slices.shape).astype(np.float32)
    if noise_sigma:
        slices = slices + np.float32(noise_sigma) * noise
    return replace(slab, slices=np.ascontiguousarray(slices, dtype=np.float32),
                   center_labels=np.ascontiguousarray(labels), center_edge=np.ascontiguousarray(edge))


def slab_rng(seed: int, subject_id: str, slab_index: int, epoch: int = 0) -> np.random.Generator:
    """Independent generator for one slab draw, keyed by (seed, subject, slab, epoch)."""
    key = zlib.crc32(subject_id.encode())
    return np.random.default_rng(np.random.SeedSequence([seed, key, slab_index, epoch]))


class SlabDataset:
    """All (volume, center slice) pairs along one axis, one per slice per volume."""

    def __init__(self, volumes, axis: int = 0, depth: int = SLAB_DEPTH):
        self.volumes = list(volumes)
        self.axis = axis
        self.depth = depth
        self.index = [(v, c) for v, vol in enumerate(self.volumes) for c in range(vol.shape[axis])]

    def __len__(self):
        return len(self.index)

    def slab(self, i: int) -> SliceSlab:
        v, c = self.index[i]
        return extract_slab(self.volumes[v], self.axis, c, self.depth)


def collate(slabs):
    x = torch.from_numpy(np.stack([s.slices for s in slabs]))
    y = torch.from_numpy(np.stack([s.center_labels for s in slabs]).astype(np.int64))
    e = torch.from_numpy(np.stack([s.center_edge for s in slabs]).astype(np.float32))[:, None]
    return x, y, e


# -- phantoms and splits ------------------------------------------------------

def make_phantom(seed: int, dims=(64, 64, 64), num_foreground: int = 10,
                 subject_id: str | None = None, voxel_size_mm=(1.0, 1.0, 1.0)) -> VolumeBundle:
    """Synthetic labelled head: nested wavy ellipsoidal shells plus small blobs in the core.

    Labels 1..n_shells are shells from outside in (the last one a solid core);
    the remaining labels are non-overlapping balls inside the core. Intensity is
    a per-label level times a smooth bias field plus noise, background is 0.
    """
    if num_foreground < 1:
        raise DataError(f"num_foreground must be >= 1, got {num_foreground}")
    dims = tuple(int(d) for d in dims)
    rng = np.random.default_rng(seed)
    n_shells = min(3, num_foreground)
    n_blobs = num_foreground - n_shells

    shape = np.asarray(dims, dtype=np.float64)
    center = shape / 2 + rng.uniform(-0.03, 0.03, 3) * shape
    radii = 0.44 * shape * rng.uniform(0.9, 1.0, 3)
    grid = np.meshgrid(*[np.arange(d) + 0.5 for d in dims], indexing="ij")
    rel = [(g - c) / r for g, c, r in zip(grid, center, radii)]
    rho = np.sqrt(sum(r * r for r in rel))
    wobble_amp = 0.05
    freq = rng.integers(2, 4, 3)
    phase = rng.uniform(0, 2 * np.pi, 3)
    wobble = 1 + wobble_amp * np.mean(
        [np.sin(f * np.arctan2(rel[(i + 1) % 3], rel[i]) + p) for i, (f, p) in enumerate(zip(freq, phase))],
        axis=0)
    rho = rho / wobble

    labels = np.zeros(dims, dtype=np.int64)
    core_frac = 0.6 if n_shells > 1 else 1.0
    fractions = np.linspace(1.0, core_frac, n_shells)
    for i, frac in enumerate(fractions):
        labels[rho <= frac] = i + 1

    if n_blobs:
        # conservative radius (in voxels) of a ball around `center` inside the core
        core_r = core_frac * (1 - wobble_amp) * radii.min()
        blob_r = max(1.5, 0.05 * min(dims))
        placed = []
        for b in range(n_blobs):
            for _ in range(2000):
                r = blob_r * rng.uniform(0.8, 1.2)
                direction = rng.standard_normal(3)
                direction /= np.linalg.norm(direction)
                offset = direction * (core_r - r - 1.5) * rng.uniform() ** (1 / 3)
                pos = center + offset
                if all(np.linalg.norm(pos - q) > r + qr + 1.5 for q, qr in placed):
                    placed.append((pos, r))
                    break
            else:
                raise DataError(f"cannot fit {n_blobs} blob regions into a volume of dims {dims}")
        for b, (pos, r) in enumerate(placed):
            dist2 = sum((g - p) ** 2 for g, p in zip(grid, pos))
            labels[dist2 <= r * r] = n_shells + 1 + b

    present = np.unique(labels)
    if len(present) != num_foreground + 1:
        raise DataError(f"dims {dims} too small for {num_foreground} regions")

    levels = np.concatenate([[0.0], rng.permutation(np.linspace(0.3, 1.0, num_foreground))])
    bias = 1 + 0.08 * np.prod([np.cos(np.pi * g / d * rng.uniform(0.5, 1.5) + rng.uniform(0, np.pi))
                               for g, d in zip(grid, dims)], axis=0)
    intensities = levels[labels] * bias + rng.normal(0, 0.02, dims)
    intensities[labels == 0] = 0.0
    sid = subject_id if subject_id is not None else f"phantom-{seed:05d}"
    return VolumeBundle(intensities.astype(np.float32), labels, voxel_size_mm, sid)


def make_split(subject_ids, train_fraction: float = 0.9, seed: int = 0) -> SplitManifest:
    """Shuffle with ``seed`` and give ``floor(n * train_fraction)`` subjects to training."""
    ids = list(subject_ids)
    if len(ids) < 2:
        raise DataError(f"need at least 2 subjects to split, got {len(ids)}")
    if not 0 < train_fraction < 1:
        raise DataError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n_train = math.floor(len(ids) * train_fraction + 1e-9)
    n_train = min(max(n_train, 1), len(ids) - 1)
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return SplitManifest(shuffled[:n_train], shuffled[n_train:], seed)
