"""Slab-based brain parcellation: adapted ViT encoder plus a multi-scale attention decoder."""

from .checkpoint import load_checkpoint, save_checkpoint
from .config import (ABLATION_VARIANTS, AblationSwitches, DataConfig, DecoderConfig, EncoderConfig,
                     LossConfig, RunSpec, TrainConfig)
from .data import (SliceSlab, SplitManifest, VolumeBundle, augment, center_crop, extract_slab,
                   load_volume_bundle, make_phantom, make_split, normalize, save_volume_bundle)
from .decoder import Decoder
from .encoder import ImageEncoder
from .errors import (BundleError, ChecksumError, ConfigError, DataError, DimensionMismatchError,
                     LabelRangeError, TrainingError)
from .estimator import BrainSegNetSegmenter
from .losses import DiceReport, edge_target_from_labels, hybrid_loss, mean_dice, soft_dice_loss
from .model import BrainSegNet
from .training import build_model, evaluate, infer_volume, lr_at, run_ablation_suite, train

__version__ = "0.1.0"
