"""Attack and experiment configuration.

Per-dataset defaults (target label, poison ratio, trigger side, transparency,
gradient augmentation factor) are baked in for the named evaluation datasets;
everything can be overridden from the YAML experiment file.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

# name -> (target_label, poison_ratio, trigger_side, transparency, theta)
DATASET_DEFAULTS = {
    "vgg_flower_l": (0, 0.20, 4, 0.4, 30.0),
    "vgg_flower_h": (3, 0.15, 8, 0.7, 30.0),
    "cifar10": (2, 0.05, 4, 0.4, 3.0),
    "gtsrb": (10, 0.05, 3, 0.4, 21.0),
    "cifar100": (0, 0.005, 2, 0.4, 4.0),
    "imagenette": (3, 0.15, 8, 0.7, 2.0),
}


@dataclass
class QoEWeights:
    lam: float = 0.01    # weight of the trigger max-norm term
    eta: float = 0.1     # weight of the structural-similarity penalty
    theta: float = 3.0   # gradient augmentation factor for the key neuron

    def __post_init__(self):
        if self.lam < 0 or self.eta < 0:
            raise ConfigError("lam and eta must be >= 0")
        if self.theta < 1:
            raise ConfigError("theta must be >= 1")


@dataclass
class AttackConfig:
    target_label: int = 0
    poison_ratio: float = 0.05
    trigger_side: int = 4
    transparency: float = 0.4
    weights: QoEWeights = field(default_factory=QoEWeights)
    omega: float = 1.0            # clean-loss weight during mixed retraining
    trigger_lr: float = 0.05
    trigger_steps: int = 500
    trigger_batch: int = 64
    retrain_lr: float = 5e-4
    retrain_epochs: int = 3       # epoch-block length per retraining round
    retrain_batch: int = 64
    retrain_frac: float = 0.2     # fraction of the train split sampled per round
    clean_lr_scale: float = 0.2   # clean rounds refresh gently, mixed rounds at full lr
    max_iters: int = 10           # K
    tolerance: float = 0.005      # plateau threshold on ASR and CDA (fraction)
    seed: int = 0
    map_samples: int = 50         # N maps averaged for the representative map
    mask_strategy: str = "attention"   # attention | corner | random
    alternating: bool = True
    exclude_target_in_asr: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = QoEWeights(**self.weights)
        self.validate()

    def validate(self):
        if not (0.0 <= self.poison_ratio <= 1.0):
            raise ConfigError(f"poison_ratio must be in [0, 1], got {self.poison_ratio}")
        if not (0.0 <= self.transparency < 1.0):
            raise ConfigError(f"transparency must be in [0, 1), got {self.transparency}")
        if self.trigger_side < 1:
            raise ConfigError("trigger_side must be >= 1")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if not (0.0 < self.retrain_frac <= 1.0):
            raise ConfigError("retrain_frac must be in (0, 1]")
        if self.mask_strategy not in ("attention", "corner", "random"):
            raise ConfigError(f"unknown mask_strategy {self.mask_strategy!r}")
        if self.trigger_steps < 0 or self.retrain_epochs < 0:
            raise ConfigError("step counts must be >= 0")

    @classmethod
    def for_dataset(cls, name: str, **overrides) -> "AttackConfig":
        base = {}
        if name in DATASET_DEFAULTS:
            y_t, ratio, side, t, theta = DATASET_DEFAULTS[name]
            base = dict(target_label=y_t, poison_ratio=ratio, trigger_side=side,
                        transparency=t, weights=QoEWeights(theta=theta))
        base.update(overrides)
        return cls(**base)


@dataclass
class DatasetSpec:
    name: str = "synthetic"
    format: str = "synthetic"        # synthetic | cifar_binary | image_folder
    path: str | None = None
    test_path: str | None = None
    num_classes: int = 10
    height: int = 32
    width: int = 32
    channels: int = 3
    n_train: int = 10000
    n_test: int = 2000


@dataclass
class TrainSpec:
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 128


@dataclass
class ExperimentConfig:
    seed: int = 7
    deterministic: bool = True
    out_root: str = "runs"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    arch: str = "cnn_small"
    model_params: dict = field(default_factory=dict)
    input_size: int | None = None    # resize inputs (224 for the transformer)
    train: TrainSpec = field(default_factory=TrainSpec)
    ran_train: TrainSpec = field(default_factory=lambda: TrainSpec(epochs=6))
    attack: AttackConfig = field(default_factory=AttackConfig)
    defenses: list = field(default_factory=lambda: ["strip", "prune", "nc"])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        def sub(path, klass, value):
            if value is None:
                return klass()
            if not isinstance(value, dict):
                raise ConfigError(f"{path}: expected a mapping, got {type(value).__name__}")
            try:
                return klass(**value)
            except TypeError as e:
                raise ConfigError(f"{path}: {e}") from e
            except ConfigError as e:
                raise ConfigError(f"{path}: {e}") from e

        raw = dict(raw or {})
        known = {"seed", "deterministic", "out_root", "dataset", "arch", "model_params",
                 "input_size", "train", "ran_train", "attack", "defenses"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        dataset = sub("dataset", DatasetSpec, raw.get("dataset"))
        attack_raw = raw.get("attack") or {}
        if not isinstance(attack_raw, dict):
            raise ConfigError("attack: expected a mapping")
        try:
            attack = AttackConfig.for_dataset(dataset.name, **attack_raw)
        except TypeError as e:
            raise ConfigError(f"attack: {e}") from e
        except ConfigError as e:
            raise ConfigError(f"attack: {e}") from e
        cfg = cls(
            seed=int(raw.get("seed", 7)),
            deterministic=bool(raw.get("deterministic", True)),
            out_root=str(raw.get("out_root", "runs")),
            dataset=dataset,
            arch=str(raw.get("arch", "cnn_small")),
            model_params=dict(raw.get("model_params") or {}),
            input_size=raw.get("input_size"),
            train=sub("train", TrainSpec, raw.get("train")),
            ran_train=sub("ran_train", TrainSpec, raw.get("ran_train")),
            attack=attack,
            defenses=list(raw.get("defenses") or []),
        )
        cfg.validate()
        return cfg

    def validate(self):
        ds = self.dataset
        if ds.format not in ("synthetic", "cifar_binary", "image_folder"):
            raise ConfigError(f"dataset.format: unknown format {ds.format!r}")
        if ds.format != "synthetic":
            if not ds.path:
                raise ConfigError("dataset.path: required for non-synthetic formats")
            if not Path(ds.path).exists():
                raise ConfigError(f"dataset.path: does not exist: {ds.path}")
        else:
            if ds.n_train < 1 or ds.n_test < 1:
                raise ConfigError("dataset.n_train/n_test must be >= 1")
        if self.arch not in ("cnn_small", "vit_lite"):
            raise ConfigError(f"arch: must be cnn_small or vit_lite, got {self.arch!r}")
        side = self.attack.trigger_side
        h = self.input_size or ds.height
        w = self.input_size or ds.width
        if side * side > h * w:
            raise ConfigError(f"attack.trigger_side: {side}^2 pixels exceed {h}x{w} image")
        if not (0 <= self.attack.target_label < ds.num_classes):
            raise ConfigError("attack.target_label: out of range for dataset.num_classes")
        known_defenses = {"strip", "prune", "nc", "nad", "patch"}
        bad = [d for d in self.defenses if d not in known_defenses]
        if bad:
            raise ConfigError(f"defenses: unknown entries {bad}; known: {sorted(known_defenses)}")

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as e:
            raise ConfigError(f"config parse error: {e}") from e
        return cls.from_dict(raw)
