"""Run configuration: flat key=value config files and dataset recipes.

A config file is plain text, one ``key = value`` per line, ``#`` comments.
Every key must be known; unknown keys are a hard error so typos cannot
silently fall back to defaults. The same keys drive the library API through
RunConfig.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    LabeledDataset,
    gaussian_blobs,
    load_cifar_binary,
    make_long_tailed,
    subset_per_class,
)
from .errors import ConfigError
from .losses import SosrConfig

REGULARIZER_TOKENS = ("none", "sosr", "label_smoothing", "confidence_penalty", "cutmix", "cutout")


@dataclass(frozen=True)
class RegularizerSpec:
    """Which loss pieces and input-mixing steps a run applies."""

    sosr: SosrConfig | None = None
    label_smoothing_epsilon: float | None = None
    confidence_penalty_weight: float | None = None
    cutmix_alpha: float | None = None
    cutout_size: int | None = None


@dataclass(frozen=True)
class RunConfig:
    """One training experiment, mirroring the config file keys."""

    dataset: str
    model: str
    epochs: int
    batch_size: int

    blobs_classes: int = 10
    blobs_per_class: int = 500
    blobs_val_per_class: int = 200
    blobs_dim: int = 16
    blobs_separation: float = 6.0
    blobs_noise_sigma: float = 1.0

    train_path: str = ""
    val_path: str = ""
    subset_n: int = 0
    imbalance_rho: float = 1.0

    augment: str = "none"
    augment_pad: int = 4
    augment_crop: int = 32
    augment_flip_prob: float = 0.5

    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_milestones: tuple[int, ...] = ()
    lr_factor: float = 0.1

    regularizer: str = "none"
    sosr_threshold_p: float = 0.99
    sosr_beta: float = 1.0
    sosr_variant: str = "standard"
    sosr_random_fraction: float = 0.1
    sosr_schedule: str = "constant"
    sosr_warmup_peak_epoch: int = 0
    label_smoothing_epsilon: float = 0.1
    confidence_penalty_weight: float = 0.1
    cutmix_alpha: float = 1.0
    cutout_size: int = 8

    census_thresholds: tuple[str, ...] = ("0.7", "0.9", "0.99")
    seeds: tuple[int, ...] = (0,)
    out_dir: str = ""

    def __post_init__(self):
        if self.dataset not in ("blobs", "cifar10", "cifar100"):
            raise ConfigError(f"dataset must be blobs, cifar10, or cifar100, got {self.dataset!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be at least 1")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.augment not in ("none", "crop_flip"):
            raise ConfigError(f"augment must be none or crop_flip, got {self.augment!r}")
        if self.imbalance_rho < 1.0:
            raise ConfigError(f"data.imbalance_rho must be >= 1, got {self.imbalance_rho}")
        if self.dataset != "blobs" and not self.train_path:
            raise ConfigError(f"dataset {self.dataset} requires data.train_path")
        for t in self.census_thresholds:
            if not 0.0 < float(t) < 1.0:
                raise ConfigError(f"census threshold {t} outside (0, 1)")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        spec = self.regularizer_spec()  # validate eagerly
        if self.dataset == "blobs":
            image_only = [
                name
                for name, active in (
                    ("augment=crop_flip", self.augment == "crop_flip"),
                    ("cutmix", spec.cutmix_alpha is not None),
                    ("cutout", spec.cutout_size is not None),
                )
                if active
            ]
            if image_only:
                raise ConfigError(
                    f"{', '.join(image_only)} needs image-shaped inputs; "
                    "blobs features are flat vectors"
                )

    def regularizer_spec(self) -> RegularizerSpec:
        tokens = [t.strip() for t in self.regularizer.split("+") if t.strip()]
        if not tokens:
            raise ConfigError("empty regularizer")
        for t in tokens:
            if t not in REGULARIZER_TOKENS:
                raise ConfigError(f"unknown regularizer {t!r}; expected one of {REGULARIZER_TOKENS}")
        if len(tokens) != len(set(tokens)):
            raise ConfigError(f"repeated regularizer token in {self.regularizer!r}")
        if "none" in tokens and len(tokens) > 1:
            raise ConfigError("'none' cannot be combined with other regularizers")
        if "label_smoothing" in tokens and "cutmix" in tokens:
            raise ConfigError("label_smoothing and cutmix both reshape targets; pick one")
        try:
            sosr = (
                SosrConfig(
                    threshold_p=self.sosr_threshold_p,
                    beta=self.sosr_beta,
                    variant=self.sosr_variant,
                    random_fraction=self.sosr_random_fraction,
                    schedule=self.sosr_schedule,
                    warmup_peak_epoch=self.sosr_warmup_peak_epoch,
                )
                if "sosr" in tokens
                else None
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return RegularizerSpec(
            sosr=sosr,
            label_smoothing_epsilon=self.label_smoothing_epsilon if "label_smoothing" in tokens else None,
            confidence_penalty_weight=self.confidence_penalty_weight
            if "confidence_penalty" in tokens
            else None,
            cutmix_alpha=self.cutmix_alpha if "cutmix" in tokens else None,
            cutout_size=self.cutout_size if "cutout" in tokens else None,
        )

    def replace(self, **kwargs) -> "RunConfig":
        return dataclasses.replace(self, **kwargs)


def _parse_int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _parse_str_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


# config-file key -> (RunConfig field, caster)
CONFIG_KEYS = {
    "dataset": ("dataset", str),
    "model": ("model", str),
    "epochs": ("epochs", int),
    "batch_size": ("batch_size", int),
    "blobs.classes": ("blobs_classes", int),
    "blobs.per_class": ("blobs_per_class", int),
    "blobs.val_per_class": ("blobs_val_per_class", int),
    "blobs.dim": ("blobs_dim", int),
    "blobs.separation": ("blobs_separation", float),
    "blobs.noise_sigma": ("blobs_noise_sigma", float),
    "data.train_path": ("train_path", str),
    "data.val_path": ("val_path", str),
    "data.subset_per_class": ("subset_n", int),
    "data.imbalance_rho": ("imbalance_rho", float),
    "augment": ("augment", str),
    "augment.pad": ("augment_pad", int),
    "augment.crop": ("augment_crop", int),
    "augment.flip_prob": ("augment_flip_prob", float),
    "lr": ("lr", float),
    "momentum": ("momentum", float),
    "weight_decay": ("weight_decay", float),
    "lr.milestones": ("lr_milestones", _parse_int_list),
    "lr.factor": ("lr_factor", float),
    "regularizer": ("regularizer", str),
    "sosr.threshold_p": ("sosr_threshold_p", float),
    "sosr.beta": ("sosr_beta", float),
    "sosr.variant": ("sosr_variant", str),
    "sosr.random_fraction": ("sosr_random_fraction", float),
    "sosr.schedule": ("sosr_schedule", str),
    "sosr.warmup_peak_epoch": ("sosr_warmup_peak_epoch", int),
    "label_smoothing.epsilon": ("label_smoothing_epsilon", float),
    "confidence_penalty.weight": ("confidence_penalty_weight", float),
    "cutmix.alpha": ("cutmix_alpha", float),
    "cutout.size": ("cutout_size", int),
    "census.thresholds": ("census_thresholds", _parse_str_list),
    "seeds": ("seeds", _parse_int_list),
    "out_dir": ("out_dir", str),
}

REQUIRED_KEYS = ("dataset", "model", "epochs", "batch_size")


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    fields = {}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        field, caster = CONFIG_KEYS[key]
        try:
            fields[field] = caster(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    missing = [k for k in REQUIRED_KEYS if CONFIG_KEYS[k][0] not in fields]
    if missing:
        raise ConfigError(f"{source}: missing required keys: {', '.join(missing)}")
    return RunConfig(**fields)


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, source=str(path))


def blobs_split(
    classes: int,
    per_class: int,
    val_per_class: int,
    dim: int,
    separation: float,
    noise_sigma: float,
    seed: int,
) -> tuple[LabeledDataset, LabeledDataset]:
    """Train/validation blob pair drawn together so both share class centers."""
    per = per_class + val_per_class
    full = gaussian_blobs(classes, per, dim, separation, noise_sigma, seed=[seed, 0])
    base = np.arange(classes) * per
    train_idx = (base[:, None] + np.arange(per_class)).ravel()
    val_idx = (base[:, None] + per_class + np.arange(val_per_class)).ravel()
    return full.take(train_idx), full.take(val_idx)


def build_datasets(cfg: RunConfig, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Materialize the train/validation pair for one run.

    Subsetting and long-tail reduction apply to the training split only,
    seeded by the run seed.
    """
    if cfg.dataset == "blobs":
        train, val = blobs_split(
            cfg.blobs_classes,
            cfg.blobs_per_class,
            cfg.blobs_val_per_class,
            cfg.blobs_dim,
            cfg.blobs_separation,
            cfg.blobs_noise_sigma,
            seed,
        )
    else:
        train = load_cifar_binary(cfg.train_path, layout=cfg.dataset)
        if not cfg.val_path:
            raise ConfigError(f"dataset {cfg.dataset} requires data.val_path")
        val = load_cifar_binary(cfg.val_path, layout=cfg.dataset)
    if cfg.subset_n > 0:
        train = subset_per_class(train, cfg.subset_n, seed=[seed, 1])
    if cfg.imbalance_rho > 1.0:
        train, _ = make_long_tailed(train, cfg.imbalance_rho, seed=[seed, 2])
    return train, val


def parse_data_recipe(text: str) -> LabeledDataset:
    """Build a dataset from a compact CLI recipe string.

    Forms: ``blobs:classes=10,per_class=500,val_per_class=200,dim=16,
    separation=6.0,noise_sigma=1.0,seed=0,split=train`` and
    ``cifar100:path=train.bin`` / ``cifar10:path=train.bin`` (optional
    ``subset=N,rho=R,seed=S``). A blobs recipe with the same parameters and
    seed as a training run reproduces that run's splits exactly.
    """
    name, _, rest = text.partition(":")
    opts = {}
    for part in filter(None, (p.strip() for p in rest.split(","))):
        if "=" not in part:
            raise ConfigError(f"recipe option {part!r} is not key=value")
        k, v = part.split("=", 1)
        opts[k.strip()] = v.strip()

    def pop(key, caster, default):
        return caster(opts.pop(key)) if key in opts else default

    try:
        if name == "blobs":
            split = pop("split", str, "train")
            if split not in ("train", "val"):
                raise ConfigError(f"blobs split must be train or val, got {split!r}")
            train, val = blobs_split(
                classes=pop("classes", int, 10),
                per_class=pop("per_class", int, 500),
                val_per_class=pop("val_per_class", int, 0),
                dim=pop("dim", int, 16),
                separation=pop("separation", float, 6.0),
                noise_sigma=pop("noise_sigma", float, 1.0),
                seed=pop("seed", int, 0),
            )
            ds = train if split == "train" else val
        elif name in ("cifar10", "cifar100"):
            if "path" not in opts:
                raise ConfigError(f"{name} recipe requires path=<file>")
            ds = load_cifar_binary(opts.pop("path"), layout=name)
            subset = pop("subset", int, 0)
            rho = pop("rho", float, 1.0)
            seed = pop("seed", int, 0)
            if subset > 0:
                ds = subset_per_class(ds, subset, seed=[seed, 1])
            if rho > 1.0:
                ds, _ = make_long_tailed(ds, rho, seed=[seed, 2])
        else:
            raise ConfigError(f"unknown data recipe {name!r}")
    except (ValueError, OSError) as exc:
        raise ConfigError(f"bad data recipe {text!r}: {exc}") from exc
    if opts:
        raise ConfigError(f"unknown recipe options: {', '.join(sorted(opts))}")
    return ds
