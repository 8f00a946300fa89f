"""Run configuration: one YAML file plus ``--set key=value`` overrides."""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .augment import AugmentationSpec
from .exceptions import ConfigError, SkinLesionError
from .model import BACKBONES
from .preprocess import IMAGENET_MEANS, NormalizationParams
from .train import TrainSchedule

SEEDED_SECTIONS = ("split", "model", "train")


def derive_seed(seed: int, name: str) -> int:
    """Stable 32-bit sub-seed for module ``name``."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass(frozen=True)
class DataConfig:
    ground_truth: tuple = ()
    image_root: Path | None = None
    image_extension: str = ".jpg"
    validation_images: Path | None = None
    validation_ground_truth: Path | None = None


@dataclass(frozen=True)
class SplitConfig:
    holdout_fraction: float = 0.1
    seed: int = 0


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "tiny-test"
    hidden_units: int | None = None
    init_seed: int = 0
    dtype: str = "float32"


@dataclass(frozen=True)
class OversampleConfig:
    epoch_size: int = 7007
    balance: float = 1.0


@dataclass(frozen=True)
class EnsembleConfig:
    members: tuple = ()
    weights: tuple | None = None
    mode: str = "mean"


@dataclass(frozen=True)
class RuntimeConfig:
    n_jobs: int = 1
    threads: int | None = None


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    normalization: NormalizationParams = field(default_factory=NormalizationParams)
    augmentation: AugmentationSpec | None = field(default_factory=AugmentationSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    oversample: OversampleConfig = field(default_factory=OversampleConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    runtime: RuntimeConfig = field(default_factory=RuntimeConfig)
    output_dir: Path = Path("runs/default")
    seed: int | None = None


def parse_override(item: str):
    """``"train.max_epochs=3"`` -> ``(["train", "max_epochs"], 3)``."""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {item!r} is not KEY=VALUE")
    return key.strip().split("."), yaml.safe_load(raw)


def apply_overrides(raw: dict, overrides) -> dict:
    raw = copy.deepcopy(raw)
    for item in overrides or ():
        path, value = parse_override(item)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {part!r} is not a section", field=".".join(path))
        node[path[-1]] = value
    return raw


def _section(cls, data, name):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected a mapping", field=name)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{name}.{unknown[0]}: unknown key", field=f"{name}.{unknown[0]}")
    try:
        return cls(**data)
    except (ValueError, TypeError, SkinLesionError) as exc:
        raise ConfigError(f"{name}: {exc}", field=name) from None


def _resolve(base: Path, p):
    if p is None:
        return None
    p = Path(p).expanduser()
    return p if p.is_absolute() else base / p


def build_config(raw: dict, base_dir=".", seed=None, output=None) -> RunConfig:
    """Validate a raw mapping into a :class:`RunConfig`.

    Relative paths resolve against ``base_dir`` (the config file's folder).
    A top-level ``seed`` (or the ``seed`` argument) replaces the split,
    model-init and training seeds with sub-seeds derived from it.
    """
    raw = dict(raw or {})
    base = Path(base_dir)
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown top-level key", field=unknown[0])

    if seed is not None:
        raw["seed"] = seed
    if raw.get("seed") is not None:
        top = raw["seed"]
        if not isinstance(top, int):
            raise ConfigError("seed: must be an integer", field="seed")
        raw["split"] = {**(raw.get("split") or {}), "seed": derive_seed(top, "split")}
        raw["model"] = {**(raw.get("model") or {}), "init_seed": derive_seed(top, "model")}
        raw["train"] = {**(raw.get("train") or {}), "seed": derive_seed(top, "train")}

    data = dict(raw.get("data") or {})
    gt = data.get("ground_truth", ())
    gt = [gt] if isinstance(gt, (str, Path)) else list(gt or ())
    data["ground_truth"] = tuple(_resolve(base, p) for p in gt)
    for key in ("image_root", "validation_images", "validation_ground_truth"):
        data[key] = _resolve(base, data.get(key))

    norm = raw.get("normalization") or {}
    if not isinstance(norm, dict) or set(norm) - {"channel_means"}:
        raise ConfigError("normalization: only 'channel_means' is accepted", field="normalization")
    try:
        normalization = NormalizationParams(tuple(norm.get("channel_means", IMAGENET_MEANS)))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"normalization.channel_means: {exc}", field="normalization.channel_means") from None

    aug_raw = raw.get("augmentation", {})
    if aug_raw is None or aug_raw is False:
        augmentation = None
    else:
        try:
            augmentation = AugmentationSpec.from_dict(aug_raw or {})
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"augmentation: {exc}", field="augmentation") from None

    ens = dict(raw.get("ensemble") or {})
    ens["members"] = tuple(_resolve(base, p) for p in ens.get("members", ()) or ())
    if ens.get("weights") is not None:
        ens["weights"] = tuple(ens["weights"])

    cfg = RunConfig(
        data=_section(DataConfig, data, "data"),
        split=_section(SplitConfig, raw.get("split"), "split"),
        normalization=normalization,
        augmentation=augmentation,
        model=_section(ModelConfig, raw.get("model"), "model"),
        train=_section(TrainSchedule, raw.get("train"), "train"),
        oversample=_section(OversampleConfig, raw.get("oversample"), "oversample"),
        ensemble=_section(EnsembleConfig, ens, "ensemble"),
        runtime=_section(RuntimeConfig, raw.get("runtime"), "runtime"),
        output_dir=_resolve(base, output or raw.get("output_dir") or "runs/default"),
        seed=raw.get("seed"),
    )
    _check_values(cfg)
    return cfg


def _check_values(cfg: RunConfig):
    if not 0.0 < cfg.split.holdout_fraction < 1.0:
        raise ConfigError("split.holdout_fraction: must lie in (0, 1)", field="split.holdout_fraction")
    if cfg.model.backbone not in BACKBONES:
        raise ConfigError(f"model.backbone: must be one of {sorted(BACKBONES)}", field="model.backbone")
    if cfg.model.dtype not in ("float32", "float64"):
        raise ConfigError("model.dtype: must be float32 or float64", field="model.dtype")
    if cfg.model.hidden_units is not None and cfg.model.hidden_units < 1:
        raise ConfigError("model.hidden_units: must be >= 1 when set", field="model.hidden_units")
    if cfg.oversample.epoch_size < 7:
        raise ConfigError("oversample.epoch_size: must be >= 7", field="oversample.epoch_size")
    if not 0.0 <= cfg.oversample.balance <= 1.0:
        raise ConfigError("oversample.balance: must lie in [0, 1]", field="oversample.balance")
    if cfg.ensemble.mode not in ("mean", "geometric"):
        raise ConfigError("ensemble.mode: must be 'mean' or 'geometric'", field="ensemble.mode")
    if cfg.ensemble.weights is not None and any(not w > 0 for w in cfg.ensemble.weights):
        raise ConfigError("ensemble.weights: must all be positive", field="ensemble.weights")
    if cfg.runtime.n_jobs < 1:
        raise ConfigError("runtime.n_jobs: must be >= 1", field="runtime.n_jobs")


def check_paths(cfg: RunConfig, need_dataset=True):
    """Fail early if referenced inputs do not exist."""
    if need_dataset:
        if not cfg.data.ground_truth:
            raise ConfigError("data.ground_truth: at least one file is required", field="data.ground_truth")
        for p in cfg.data.ground_truth:
            if not p.is_file():
                raise ConfigError(f"data.ground_truth: file not found: {p}", field="data.ground_truth")
        if cfg.data.image_root is None or not cfg.data.image_root.is_dir():
            raise ConfigError(f"data.image_root: directory not found: {cfg.data.image_root}", field="data.image_root")
    for key in ("validation_images", "validation_ground_truth"):
        p = getattr(cfg.data, key)
        if p is not None and not p.exists():
            raise ConfigError(f"data.{key}: not found: {p}", field=f"data.{key}")


def load_config(path=None, overrides=(), seed=None, output=None) -> RunConfig:
    if path is None:
        return build_config(apply_overrides({}, overrides), ".", seed, output)
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return build_config(apply_overrides(raw, overrides), path.parent, seed, output)
