"""``brainsegnet`` command line: generate, train, eval, predict, ablate.

Every RunSpec field is a flag named ``--<section>.<field>``. Values resolve as
built-in defaults < ``--config`` JSON file < flags. Failures print one JSON
object on stderr and exit with 1 (runtime) or 2 (usage/configuration).
"""

from __future__ import annotations

import argparse
import colorsys
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import load_checkpoint
from .config import DERIVED, SECTIONS, RunSpec
from .data import (SplitManifest, VolumeBundle, load_volume_bundle, make_phantom, make_split,
                   normalize, save_volume_bundle)
from .errors import ConfigError, DataError, TrainingError
from .training import build_model, evaluate, infer_volume, run_ablation_suite, train

log = logging.getLogger("brainsegnet")

COMMANDS = ("generate", "train", "eval", "predict", "ablate")
GENERATE_ALIASES = {"data.count": "--count", "data.dims": "--dims", "data.num_foreground": "--classes"}


class UsageError(Exception):
    pass


class JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- flag plumbing ---------------------------------------------------------------

def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_ints(text: str) -> list[int]:
    try:
        return [int(t) for t in text.replace("x", ",").split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _parse_optional_int(text: str):
    return None if text.lower() in ("none", "null", "") else int(text)


def _converter(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, tuple):
        return _parse_ints
    if default is None:
        return _parse_optional_int
    return type(default)


def _add_spec_flags(parser, aliases=None):
    aliases = aliases or {}
    for section, klass in SECTIONS.items():
        group = parser.add_argument_group(f"{section} options")
        for f in dataclasses.fields(klass):
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            dest = f"{section}.{f.name}"
            shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
            names = [f"--{dest}"] + ([aliases[dest]] if dest in aliases else [])
            group.add_argument(*names, dest=dest, type=_converter(default), default=None,
                               metavar=type(default).__name__.upper() if default is not None else "INT",
                               help=f"(default: {shown})" + (f"; derived from {DERIVED[dest]}"
                                                              if dest in DERIVED else ""))


def build_parser() -> argparse.ArgumentParser:
    common = JsonArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON file with RunSpec sections")
    common.add_argument("--seed", type=int, help="overrides train.seed (and the phantom seed for generate)")
    common.add_argument("--out", type=Path, default=None,
                        help="output directory (default: data.data_dir for generate, runs otherwise)")
    common.add_argument("--deterministic", dest="deterministic", action="store_true", default=None,
                        help="deterministic kernels, no wall-clock in artifacts (default)")
    common.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = JsonArgumentParser(prog="brainsegnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=JsonArgumentParser)
    helps = {
        "generate": "write synthetic phantom bundles and split.json",
        "train": "train on the split's training subjects",
        "eval": "score a checkpoint with mean Dice",
        "predict": "segment one volume bundle and render overlays",
        "ablate": "train and score the five ablation variants",
    }
    subparsers = {}
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
        _add_spec_flags(p, GENERATE_ALIASES if name == "generate" else None)
        subparsers[name] = p
    for name in ("eval", "predict"):
        subparsers[name].add_argument("--checkpoint", type=Path,
                                      help="checkpoint directory (default: <out>/checkpoints/best)")
    subparsers["eval"].add_argument("--subset", choices=("test", "train", "all"), default="test",
                                    help="which split subjects to score (default: test)")
    subparsers["predict"].add_argument("--volume", type=Path, required=True, help="input bundle directory")
    subparsers["predict"].add_argument("--slices", type=_parse_ints, default=None,
                                       help="slice indices along the axis to render (default: middle)")
    return parser


def resolve_spec(args) -> RunSpec:
    raw: dict = {}
    if args.config is not None:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file {args.config} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    raw = {k: dict(v) for k, v in raw.items()}
    for key, value in vars(args).items():
        if "." in key and value is not None:
            section, name = key.split(".", 1)
            raw.setdefault(section, {})[name] = value
    if args.seed is not None:
        raw.setdefault("train", {})["seed"] = args.seed
    if args.deterministic is not None:
        raw.setdefault("train", {})["deterministic"] = args.deterministic
    try:
        return RunSpec.from_dict(raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# -- data helpers ------------------------------------------------------------------

def _split_path(spec: RunSpec) -> Path:
    p = Path(spec.data.split)
    return p if p.is_absolute() else Path(spec.data.data_dir) / p


def load_subjects(spec: RunSpec, ids) -> list[VolumeBundle]:
    k = spec.decoder.num_classes
    return [normalize(load_volume_bundle(Path(spec.data.data_dir) / sid, num_classes=k)) for sid in ids]


def load_split(spec: RunSpec) -> SplitManifest:
    path = _split_path(spec)
    if not path.exists():
        raise DataError(f"split manifest {path} not found; run `brainsegnet generate` first")
    return SplitManifest.load(path)


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


# -- overlays --------------------------------------------------------------------

def class_color(c: int) -> tuple[int, int, int]:
    """Fixed colour per class: black background, golden-ratio hue steps for the rest."""
    if c == 0:
        return (0, 0, 0)
    r, g, b = colorsys.hsv_to_rgb((c * 0.618033988749895) % 1.0, 0.65, 0.95)
    return (round(255 * r), round(255 * g), round(255 * b))


def palette(num_classes: int) -> np.ndarray:
    return np.array([class_color(c) for c in range(num_classes)], dtype=np.uint8)


def render_overlay(image: np.ndarray, labels: np.ndarray, num_classes: int, alpha: float = 0.5) -> np.ndarray:
    lo, hi = float(image.min()), float(image.max())
    gray = np.zeros_like(image, dtype=np.float64) if hi <= lo else (image - lo) / (hi - lo)
    rgb = np.repeat(gray[..., None] * 255.0, 3, axis=-1)
    colors = palette(num_classes)[labels].astype(np.float64)
    fg = labels > 0
    rgb[fg] = (1 - alpha) * rgb[fg] + alpha * colors[fg]
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def save_overlay_pair(path: Path, image, pred, truth, num_classes: int):
    """Prediction on the left, ground truth on the right."""
    left = render_overlay(image, pred, num_classes)
    right = render_overlay(image, truth, num_classes)
    gap = np.full((left.shape[0], 2, 3), 255, np.uint8)
    Image.fromarray(np.concatenate([left, gap, right], axis=1)).save(path, optimize=False)


# -- commands --------------------------------------------------------------------

def cmd_generate(spec: RunSpec, args) -> dict:
    d = spec.data
    out = Path(args.out or d.data_dir)
    if d.count < 2:
        raise ConfigError("generate needs count >= 2 to build a train/test split")
    seed = spec.train.seed
    out.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(d.count):
        sid = f"phantom-{i:03d}"
        vol = make_phantom(seed * 100_003 + i, dims=d.dims, num_foreground=d.num_foreground, subject_id=sid)
        save_volume_bundle(vol, out / sid, num_classes=d.num_foreground + 1)
        ids.append(sid)
    split = make_split(ids, d.train_fraction, seed)
    split.save(out / "split.json")
    return {"data_dir": str(out), "subjects": len(ids), "train": len(split.train_ids),
            "test": len(split.test_ids)}


def _train_val(spec: RunSpec):
    split = load_split(spec)
    ids = list(split.train_ids)
    n_val = spec.data.val_count if len(ids) > spec.data.val_count else 0
    fit_ids, val_ids = (ids[:len(ids) - n_val], ids[len(ids) - n_val:]) if n_val else (ids, ids)
    return load_subjects(spec, fit_ids), load_subjects(spec, val_ids)


def cmd_train(spec: RunSpec, args) -> dict:
    fit, val = _train_val(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "spec.json", spec.to_dict())
    model = build_model(spec.encoder, spec.decoder, spec.switches, seed=spec.train.seed)
    record = train(model, fit, spec.train, spec.loss, val_volumes=val, out_dir=out)
    return {"out": str(out), "steps": record.steps, "best_epoch": record.best_epoch,
            "best_val_dice": record.best_val_dice}


def _checkpoint(args) -> Path:
    path = args.checkpoint or Path(args.out) / "checkpoints" / "best"
    if not (Path(path) / "manifest.json").exists():
        raise DataError(f"no checkpoint at {path}")
    return Path(path)


def cmd_eval(spec: RunSpec, args) -> dict:
    model = load_checkpoint(_checkpoint(args))
    split = load_split(spec)
    ids = {"test": split.test_ids, "train": split.train_ids,
           "all": split.train_ids + split.test_ids}[args.subset]
    report = evaluate(model, load_subjects(spec, ids), spec.train.axis)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / "dice.csv")
    report.to_json(out / "dice.json")
    return {"grand_mean": report.grand_mean, "subjects": len(ids), "subset": args.subset}


def cmd_predict(spec: RunSpec, args) -> dict:
    model = load_checkpoint(_checkpoint(args))
    k = model.decoder_cfg.num_classes
    raw = load_volume_bundle(args.volume)
    axis = spec.train.axis
    pred = infer_volume(model, normalize(raw), axis)
    out = Path(args.out)
    target = out / f"{raw.subject_id}-pred"
    save_volume_bundle(VolumeBundle(raw.intensities, pred.astype(np.uint16), raw.voxel_size_mm,
                                    raw.subject_id), target, num_classes=k)
    slices = args.slices if args.slices is not None else [raw.shape[axis] // 2]
    overlays = []
    truth = np.clip(raw.labels.astype(np.int64), 0, k - 1)
    for s in slices:
        if not 0 <= s < raw.shape[axis]:
            raise UsageError(f"slice {s} outside [0, {raw.shape[axis]})")
        png = out / f"{raw.subject_id}-slice{s:03d}.png"
        save_overlay_pair(png, np.take(raw.intensities, s, axis), np.take(pred, s, axis),
                          np.take(truth, s, axis), k)
        overlays.append(str(png))
    return {"prediction": str(target), "dims": list(pred.shape), "overlays": overlays}


def cmd_ablate(spec: RunSpec, args) -> dict:
    split = load_split(spec)
    rows = run_ablation_suite(load_subjects(spec, split.train_ids), load_subjects(spec, split.test_ids),
                              spec.encoder, spec.decoder, spec.train, spec.loss, out_dir=args.out)
    return {"rows": [{"variant": r["variant"], "grand_mean_dice": r["grand_mean_dice"]} for r in rows]}


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "predict": cmd_predict, "ablate": cmd_ablate}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command != "generate" and args.out is None:
        args.out = Path("runs")
    try:
        spec = resolve_spec(args)
        result = HANDLERS[args.command](spec, args)
    except (UsageError, ConfigError) as exc:
        return _fail("usage", exc, 2)
    except (DataError, TrainingError, OSError, ValueError, RuntimeError) as exc:
        return _fail("runtime", exc, 1)
    sys.stdout.write(json.dumps(result, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
