"""Experiment configuration: one JSON document per run.

A config names the dataset preset, imbalance, architectures, training
phase knobs, and unlearning defaults. CLI flags override individual
fields, and the fully resolved document is echoed into every output
directory so a run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .classifier import ArchSpec
from .data import ImbalanceSpec, load_idx, synth_blobs
from .errors import ConfigError
from .evaluation import resolve_rate
from .generator import GeneratorSpec
from .training import TrainPhaseConfig
from .unlearn import STRATEGIES

DATASET_PRESETS = ("blobs", "mnist-idx", "fashion-idx", "kuzushiji-idx")

ENV_SEED = "GENIU_SEED"


@dataclass
class DatasetConfig:
    preset: str = "blobs"
    # blobs parameters
    num_classes: int = 10
    dim: int = 64
    n_per_class: int = 100
    separation: float = 1.0
    noise_std: float = 0.1
    # idx parameters
    images_path: str = ""
    labels_path: str = ""
    test_images_path: str = ""
    test_labels_path: str = ""
    # published train-split size, used for storage accounting when the
    # files themselves are not on disk
    nominal_train_count: int = 0

    def __post_init__(self):
        if self.preset not in DATASET_PRESETS:
            raise ConfigError(
                f"dataset preset {self.preset!r} not one of {DATASET_PRESETS}")
        if self.preset != "blobs" and not (self.images_path and self.labels_path):
            raise ConfigError(f"{self.preset} needs images_path and labels_path")

    def build(self, seed):
        """Materialize (train, test); blob draws are governed by the seed."""
        if self.preset == "blobs":
            return synth_blobs(K=self.num_classes, dim=self.dim,
                               n_per_class=self.n_per_class,
                               separation=self.separation,
                               noise_std=self.noise_std, seed=seed)
        train = load_idx(self.images_path, self.labels_path)
        test = None
        if self.test_images_path and self.test_labels_path:
            test = load_idx(self.test_images_path, self.test_labels_path)
            test = dataclasses.replace(test, split="test")
        return train, test


@dataclass
class ImbalanceConfig:
    majority: tuple = (0,)
    rate: object = 0.1  # scalar, per-class list, or the token "vary"

    def __post_init__(self):
        if not self.majority:
            raise ConfigError("need at least one majority class")
        object.__setattr__(self, "majority", tuple(int(k) for k in self.majority))

    def spec(self, num_classes: int) -> ImbalanceSpec:
        return ImbalanceSpec(majority=frozenset(self.majority),
                             rate=resolve_rate(self.rate, num_classes))


@dataclass
class UnlearnDefaults:
    rounds: int = 100
    lr: float = 4e-4
    strategy: str = "in_batch"
    eps: float = 1e-6

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    imbalance: ImbalanceConfig
    train: TrainPhaseConfig  # carries arch, generator spec, and the seed
    unlearn: UnlearnDefaults = field(default_factory=UnlearnDefaults)
    out_dir: str = ""
    seed: int = None  # None defers to GENIU_SEED, then 0

    def resolved_seed(self, flag_seed=None) -> int:
        """Priority: explicit flag, config value, GENIU_SEED, 0."""
        if flag_seed is not None:
            return int(flag_seed)
        if self.seed is not None:
            return int(self.seed)
        env = os.environ.get(ENV_SEED, "")
        return int(env) if env else 0

    def train_config(self, seed) -> TrainPhaseConfig:
        return dataclasses.replace(self.train, seed=int(seed))

    def to_dict(self) -> dict:
        return {
            "dataset": dataclasses.asdict(self.dataset),
            "imbalance": {"majority": list(self.imbalance.majority),
                          "rate": self.imbalance.rate},
            "arch": self.train.arch.to_dict(),
            "generator": self.train.gen.to_dict(),
            "train": {k: getattr(self.train, k) for k in _TRAIN_KEYS},
            "unlearn": dataclasses.asdict(self.unlearn),
            "out_dir": self.out_dir,
            "seed": self.seed,
        }


_TRAIN_KEYS = (
    "epochs", "noise_steps", "gen_steps", "lr_classifier", "lr_noise",
    "lr_generator", "weight_decay", "batch_size", "optimizer",
    "selection_mode", "top_b", "threshold_t", "select_every",
)


def _check_keys(section: str, d: dict, allowed) -> None:
    unknown = [k for k in d if k not in allowed and not k.startswith("_")]
    if unknown:
        raise ConfigError(f"unknown {section} keys: {unknown}")


def config_from_dict(payload: dict) -> ExperimentConfig:
    _check_keys("top-level", payload, (
        "dataset", "imbalance", "arch", "generator", "train", "unlearn",
        "out_dir", "seed"))
    for section in ("dataset", "arch", "generator"):
        if section not in payload:
            raise ConfigError(f"config is missing the {section!r} section")

    ds_dict = dict(payload["dataset"])
    _check_keys("dataset", ds_dict, {f.name for f in dataclasses.fields(DatasetConfig)})
    dataset = DatasetConfig(**{k: v for k, v in ds_dict.items()
                               if not k.startswith("_")})

    imb_dict = dict(payload.get("imbalance", {}))
    _check_keys("imbalance", imb_dict, ("majority", "rate"))
    imbalance = ImbalanceConfig(**{k: v for k, v in imb_dict.items()
                                   if not k.startswith("_")})

    try:
        arch = ArchSpec.from_dict(payload["arch"])
    except KeyError as exc:
        raise ConfigError(f"arch section is missing key {exc}") from exc
    try:
        gen = GeneratorSpec.from_dict(payload["generator"])
    except KeyError as exc:
        raise ConfigError(f"generator section is missing key {exc}") from exc

    train_dict = dict(payload.get("train", {}))
    _check_keys("train", train_dict, _TRAIN_KEYS)
    try:
        train = TrainPhaseConfig(arch=arch, gen=gen,
                                 **{k: v for k, v in train_dict.items()
                                    if not k.startswith("_")})
    except TypeError as exc:
        raise ConfigError(f"train section: {exc}") from exc

    unlearn_dict = dict(payload.get("unlearn", {}))
    _check_keys("unlearn", unlearn_dict,
                {f.name for f in dataclasses.fields(UnlearnDefaults)})
    unlearn = UnlearnDefaults(**{k: v for k, v in unlearn_dict.items()
                                 if not k.startswith("_")})

    seed = payload.get("seed")
    return ExperimentConfig(dataset=dataset, imbalance=imbalance, train=train,
                            unlearn=unlearn, out_dir=payload.get("out_dir", ""),
                            seed=None if seed is None else int(seed))


def preset_path(name: str) -> Path:
    return Path(str(resources.files("geniu") / "presets" / f"{name}.json"))


def available_presets() -> list:
    preset_dir = resources.files("geniu") / "presets"
    return sorted(p.name[: -len(".json")] for p in preset_dir.iterdir()
                  if p.name.endswith(".json"))


def load_config(ref) -> ExperimentConfig:
    """Load a config from a JSON path, or from a shipped preset name."""
    path = Path(ref)
    if not path.is_file():
        candidate = preset_path(str(ref))
        if candidate.is_file():
            path = candidate
        else:
            raise FileNotFoundError(
                f"no config file {ref!r} and no preset named {ref!r} "
                f"(presets: {', '.join(available_presets())})")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(payload)


def echo_config(config: ExperimentConfig, out_dir, resolved_seed: int) -> None:
    """Write the fully resolved document next to the run's artifacts."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = config.to_dict()
    payload["seed"] = int(resolved_seed)
    payload["out_dir"] = str(out_dir)
    with open(out_dir / "config.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
