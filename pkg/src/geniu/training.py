"""Training phase orchestration: interleave classifier epochs, noise prompt
tuning, the gate, supervision selection, and generator training.

Per epoch the order is fixed: train the classifier; if the accuracy
threshold (when set) is met, tune the noise bank; if every prompt passes
the gate, select supervision samples by decision entropy and train the
generator, otherwise skip it for the epoch. The classifier's random
stream never depends on the noise or generator machinery, so the model
that falls out is bitwise identical to one trained alone.
"""

from __future__ import annotations

import csv
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .classifier import ArchSpec, ModelParams, OptimConfig, forward, init_model, train_epoch
from .data import Dataset
from .errors import ConfigError
from .generator import GeneratorParams, GeneratorSpec, init_generator, train_generator
from .noise import NoiseBank, gate_check, init_noise, train_noise_bank
from .optim import AdamState
from .seeding import component_seed

SELECTION_MODES = ("max_entropy", "min_entropy")


@dataclass
class TrainPhaseConfig:
    arch: ArchSpec
    gen: GeneratorSpec
    epochs: int
    noise_steps: int = 100
    gen_steps: int = 100
    lr_classifier: float = 0.01
    lr_noise: float = 0.02
    lr_generator: float = 0.005
    weight_decay: float = 1e-4
    batch_size: int = 256
    optimizer: str = "sgd"
    selection_mode: str = "max_entropy"
    top_b: int = 1  # supervision samples per class
    threshold_t: float = None  # delay noise/generator until this train accuracy
    select_every: int = 1  # re-select supervision every m gate-passing epochs
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("need at least one training epoch")
        if self.top_b < 1:
            raise ConfigError("supervision selection needs B >= 1")
        if self.threshold_t is not None and not 0.0 <= self.threshold_t < 1.0:
            raise ConfigError("accuracy threshold must lie in [0, 1)")
        if self.selection_mode not in SELECTION_MODES:
            raise ConfigError(f"selection mode must be one of {SELECTION_MODES}")
        if self.select_every < 1:
            raise ConfigError("select_every must be >= 1")

    def optim_config(self) -> OptimConfig:
        return OptimConfig(
            optimizer=self.optimizer,
            lr=self.lr_classifier,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
        )


def probs_entropy(probs: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats per row; zero-probability terms contribute 0."""
    p = np.asarray(probs, dtype=np.float64)
    terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def decision_entropy(model: ModelParams, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Entropy of the softmaxed logits for each image."""
    out = []
    for start in range(0, len(images), batch_size):
        logits = forward(model, images[start : start + batch_size]).data.astype(np.float64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        out.append(probs_entropy(e / e.sum(axis=1, keepdims=True)))
    return np.concatenate(out)


def select_supervision(model: ModelParams, ds: Dataset, mode: str, b: int):
    """Top-B samples per class by decision entropy; ties go to the lowest index.

    Returns (images [K*B, ...], labels [K*B]) grouped class by class, best
    rank first. min_entropy mirrors the ordering for the ablation.
    """
    if mode not in SELECTION_MODES:
        raise ConfigError(f"selection mode must be one of {SELECTION_MODES}")
    scores = decision_entropy(model, ds.images)
    picks = []
    for k in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == k)
        if len(idx) < b:
            raise ConfigError(f"class {k} has {len(idx)} samples, fewer than B={b}")
        key = -scores[idx] if mode == "max_entropy" else scores[idx]
        order = np.lexsort((idx, key))  # primary: score; secondary: dataset index
        picks.append(idx[order[:b]])
    sel = np.concatenate(picks)
    return ds.images[sel].copy(), ds.labels[sel].copy()


@dataclass
class EpochLog:
    epoch: int
    classifier_loss: float
    train_accuracy: float = None  # minority-class macro accuracy, when tracked
    noise_trained: bool = False
    gate_passed: bool = False
    selected: bool = False
    generator_trained: bool = False
    gen_loss: float = None
    rec_loss: float = None
    dis_loss: float = None
    timings: dict = field(default_factory=dict)  # stage -> seconds


@dataclass
class TrainPhaseResult:
    model: ModelParams
    bank: NoiseBank
    gen: GeneratorParams
    log: list
    events: list  # (epoch, stage) in execution order

    @property
    def gate_ever_passed(self) -> bool:
        return any(entry.gate_passed for entry in self.log)


def _minority_train_accuracy(model: ModelParams, ds: Dataset) -> float:
    """Macro accuracy over minority classes (all classes when balanced)."""
    from .classifier import predict

    counts = ds.class_counts
    minority = np.flatnonzero(counts < counts.max())
    if minority.size == 0:
        minority = np.arange(ds.num_classes)
    pred = predict(model, ds.images)
    accs = [float(np.mean(pred[ds.labels == k] == k)) for k in minority if counts[k]]
    return float(np.mean(accs))


def _epoch_shuffle_seeds(seed, epochs: int) -> list:
    return [int(s) for s in component_seed(seed, "epoch-shuffle").generate_state(epochs)]


def train_classifier(ds: Dataset, config: TrainPhaseConfig):
    """Classifier-only training with the exact stream run_training_phase uses."""
    model = init_model(config.arch, seed=config.seed)
    adam_state = None
    if config.optimizer == "adam":
        adam_state = AdamState.for_params(
            model.params, lr=config.lr_classifier, weight_decay=config.weight_decay
        )
    losses = []
    cfg = config.optim_config()
    for shuffle_seed in _epoch_shuffle_seeds(config.seed, config.epochs):
        _, loss = train_epoch(model, ds, cfg, shuffle_seed, adam_state=adam_state)
        losses.append(loss)
    return model, losses


def run_training_phase(ds: Dataset, config: TrainPhaseConfig) -> TrainPhaseResult:
    """The full training phase; emits model, noise bank, generator, and a log."""
    if ds.split != "train":
        raise ConfigError("training phase expects a train split")
    model = init_model(config.arch, seed=config.seed)
    bank = init_noise(config.arch.input_shape, config.arch.num_classes, seed=config.seed)
    gen = init_generator(config.gen, seed=config.seed)
    adam_state = None
    if config.optimizer == "adam":
        adam_state = AdamState.for_params(
            model.params, lr=config.lr_classifier, weight_decay=config.weight_decay
        )

    shuffle_seeds = _epoch_shuffle_seeds(config.seed, config.epochs)
    gen_seeds = component_seed(config.seed, "generator-train-epoch").generate_state(config.epochs)
    cfg = config.optim_config()
    log, events = [], []
    supervision = None
    epochs_since_select = None

    for epoch in range(config.epochs):
        entry = EpochLog(epoch=epoch, classifier_loss=0.0)
        t0 = time.perf_counter()
        _, entry.classifier_loss = train_epoch(
            model, ds, cfg, shuffle_seeds[epoch], adam_state=adam_state
        )
        entry.timings["classifier"] = time.perf_counter() - t0
        events.append((epoch, "classifier"))

        threshold_met = True
        if config.threshold_t is not None:
            entry.train_accuracy = _minority_train_accuracy(model, ds)
            threshold_met = entry.train_accuracy >= config.threshold_t

        if threshold_met and config.noise_steps > 0:
            t0 = time.perf_counter()
            train_noise_bank(bank, model, config.noise_steps, lr=config.lr_noise, epoch=epoch)
            entry.timings["noise"] = time.perf_counter() - t0
            entry.noise_trained = True
            events.append((epoch, "noise"))

            entry.gate_passed = gate_check(bank, model)
            events.append((epoch, "gate"))
            if entry.gate_passed:
                if supervision is None or epochs_since_select >= config.select_every:
                    t0 = time.perf_counter()
                    supervision = select_supervision(
                        model, ds, config.selection_mode, config.top_b
                    )
                    entry.timings["select"] = time.perf_counter() - t0
                    entry.selected = True
                    epochs_since_select = 0
                    events.append((epoch, "select"))
                epochs_since_select += 1

                history = []
                t0 = time.perf_counter()
                train_generator(
                    gen, bank, supervision[0], supervision[1], config.gen_steps,
                    lr=config.lr_generator, seed=int(gen_seeds[epoch]), loss_log=history,
                )
                entry.timings["generator"] = time.perf_counter() - t0
                entry.generator_trained = config.gen_steps > 0
                if history:
                    entry.gen_loss = float(np.mean([h[0] for h in history]))
                    entry.rec_loss = float(np.mean([h[1] for h in history]))
                    entry.dis_loss = float(np.mean([h[2] for h in history]))
                if entry.generator_trained:
                    events.append((epoch, "generator"))
        log.append(entry)

    result = TrainPhaseResult(model=model, bank=bank, gen=gen, log=log, events=events)
    if not result.gate_ever_passed:
        warnings.warn(
            "noise gate never passed; generator left untrained", RuntimeWarning
        )
    return result


PHASE_LOG_COLUMNS = [
    "epoch", "classifier_loss", "train_accuracy", "noise_trained", "gate_passed",
    "selected", "generator_trained", "gen_loss", "rec_loss", "dis_loss",
    "t_classifier", "t_noise", "t_select", "t_generator",
]


def write_phase_log(path, log) -> None:
    """Phase log as CSV: one row per epoch with losses, gate status, timings."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PHASE_LOG_COLUMNS)
        for e in log:
            writer.writerow([
                e.epoch, f"{e.classifier_loss:.6f}",
                "" if e.train_accuracy is None else f"{e.train_accuracy:.6f}",
                int(e.noise_trained), int(e.gate_passed), int(e.selected),
                int(e.generator_trained),
                "" if e.gen_loss is None else f"{e.gen_loss:.6f}",
                "" if e.rec_loss is None else f"{e.rec_loss:.6f}",
                "" if e.dis_loss is None else f"{e.dis_loss:.6f}",
                f"{e.timings.get('classifier', 0.0):.4f}",
                f"{e.timings.get('noise', 0.0):.4f}",
                f"{e.timings.get('select', 0.0):.4f}",
                f"{e.timings.get('generator', 0.0):.4f}",
            ])
