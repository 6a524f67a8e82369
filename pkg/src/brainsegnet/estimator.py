"""scikit-learn style wrapper: ``fit`` on labelled volumes, ``predict`` label volumes."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import DecoderConfig, EncoderConfig, LossConfig, TrainConfig
from .data import VolumeBundle, normalize
from .losses import mean_dice
from .training import build_model, infer_volume, train
from .validation import check_in_plane, check_intensities, check_volume_pairs


class BrainSegNetSegmenter(BaseEstimator):
    """Slab-based volumetric segmenter.

    ``X`` is one 3D intensity volume, a 4D stack or a list of volumes; ``y`` the
    matching integer label volumes. Slices are taken along ``axis``; the two
    remaining dims must be divisible by ``patch_size``. ``num_classes=None``
    infers ``max(y) + 1``.
    """

    def __init__(self, embed_dim=96, num_blocks=8, num_heads=4, patch_size=8, lora_rank=4,
                 adapter_bottleneck=16, freeze_base=True, aspp_channels=128, br_channels=64,
                 upsample_mode="bilinear", num_classes=None, epochs=20, max_steps=None,
                 batch_size=8, base_lr=1e-3, warmup_steps=50, decay_gamma=0.9, augment=True,
                 alpha=0.2, beta=0.8, edge_weight=0.1, axis=0, normalize=True, seed=0):
        self.embed_dim = embed_dim
        self.num_blocks = num_blocks
        self.num_heads = num_heads
        self.patch_size = patch_size
        self.lora_rank = lora_rank
        self.adapter_bottleneck = adapter_bottleneck
        self.freeze_base = freeze_base
        self.aspp_channels = aspp_channels
        self.br_channels = br_channels
        self.upsample_mode = upsample_mode
        self.num_classes = num_classes
        self.epochs = epochs
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.base_lr = base_lr
        self.warmup_steps = warmup_steps
        self.decay_gamma = decay_gamma
        self.augment = augment
        self.alpha = alpha
        self.beta = beta
        self.edge_weight = edge_weight
        self.axis = axis
        self.normalize = normalize
        self.seed = seed

    def _bundles(self, vols, labs=None):
        out = []
        for i, v in enumerate(vols):
            lab = labs[i] if labs is not None else np.zeros(v.shape, np.int64)
            b = VolumeBundle(v, lab, subject_id=f"x{i}")
            out.append(normalize(b) if self.normalize else b)
        return out

    def fit(self, X, y):
        vols, labs = check_volume_pairs(X, y, self.num_classes)
        k = self.num_classes or int(max(lab.max() for lab in labs)) + 1
        k = max(k, 2)
        plane = tuple(d for a, d in enumerate(vols[0].shape) if a != self.axis)
        check_in_plane(vols, self.axis, plane)
        enc = EncoderConfig(embed_dim=self.embed_dim, num_blocks=self.num_blocks, num_heads=self.num_heads,
                            patch_size=self.patch_size, lora_rank=self.lora_rank,
                            adapter_bottleneck=self.adapter_bottleneck, input_size=plane,
                            freeze_base=self.freeze_base)
        dec = DecoderConfig(in_channels=self.embed_dim, aspp_channels=self.aspp_channels,
                            br_channels=self.br_channels, num_classes=k,
                            upsample_factor=self.patch_size, upsample_mode=self.upsample_mode)
        tcfg = TrainConfig(base_lr=self.base_lr, warmup_steps=self.warmup_steps,
                           decay_gamma=self.decay_gamma, batch_size=self.batch_size,
                           epochs=self.epochs, max_steps=self.max_steps, seed=self.seed,
                           axis=self.axis, augment=self.augment)
        lcfg = LossConfig(alpha=self.alpha, beta=self.beta, edge_weight=self.edge_weight)
        self.model_ = build_model(enc, dec, seed=self.seed)
        self.record_ = train(self.model_, self._bundles(vols, labs), tcfg, lcfg)
        self.n_classes_ = k
        self.input_size_ = plane
        return self

    def predict(self, X):
        """Label volumes, returned as a list in the order of ``X``."""
        check_is_fitted(self, "model_")
        vols = check_intensities(X)
        check_in_plane(vols, self.axis, self.input_size_)
        return [infer_volume(self.model_, b, self.axis) for b in self._bundles(vols)]

    def score(self, X, y):
        """Grand-mean foreground Dice of ``predict(X)`` against ``y``."""
        check_is_fitted(self, "model_")
        _, labs = check_volume_pairs(X, y, self.n_classes_)
        return mean_dice(self.predict(X), labs, self.n_classes_).grand_mean
