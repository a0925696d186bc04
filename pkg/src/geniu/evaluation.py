"""Measurement protocols: perception divergence, timing, storage, and the
imbalance-rate sweep harness.

Every report here is a pure function of saved artifacts, datasets, and a
seed; running one never mutates what it measures. Sweep cells execute the
full train-then-unlearn pipeline independently, so a grid can ship one CSV
row per (rate, forget class, seed) plus a JSON aggregate that averages
over forget-class choices.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .artifacts import (
    dir_nbytes,
    load_generator,
    load_noise_bank,
    save_generator,
    save_model,
    save_noise_bank,
)
from .classifier import ModelParams, evaluate, forward
from .data import Dataset, ImbalanceSpec, build_imbalanced, dataset_nbytes
from .errors import ConfigError, SweepCellError
from .seeding import component_rng
from .training import TrainPhaseConfig, run_training_phase, write_phase_log
from .unlearn import UnlearnRequest, run_unlearning, write_trajectory

# Rate vector for the "vary" sweep mode: one independent minority rate per
# class (majority entries are overridden to 1 downstream).
VARY_RATES = (0.2, 0.7, 0.3, 0.3, 0.6, 0.2, 0.2, 0.6, 0.2, 0.6)

KL_SAMPLE_COUNT = 256  # majority examples averaged into the reference perception
_SMOOTH = 1e-12


@dataclass
class EvalReport:
    """One cell's measurements: accuracy after unlearning, perception
    divergence of the original model, wall-clock, and artifact footprint."""

    per_class: tuple
    acc_retain: float
    acc_retain_macro: float
    acc_forget: float
    orig_acc_majority: float  # pre-unlearning, for the imbalance signature
    orig_acc_minority: float  # mean over non-majority classes, pre-unlearning
    kl_perception: float
    unlearn_ms: float
    noise_bank_bytes: int
    generator_bytes: int
    dataset_bytes: int
    storage_ratio: float
    config_echo: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        for name in ("acc_retain", "acc_retain_macro", "acc_forget",
                     "orig_acc_majority", "orig_acc_minority"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ConfigError(f"{name}={v} outside [0, 1]")
        for v in self.per_class:
            if np.isfinite(v) and not (0.0 <= v <= 1.0):
                raise ConfigError(f"per-class accuracy {v} outside [0, 1]")
        if self.kl_perception < 0:
            raise ConfigError(f"kl_perception={self.kl_perception} negative")
        if self.unlearn_ms < 0:
            raise ConfigError("negative wall clock")
        for name in ("noise_bank_bytes", "generator_bytes", "dataset_bytes"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _smooth(p: np.ndarray) -> np.ndarray:
    q = p + _SMOOTH
    return q / q.sum()


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats with additive 1e-12 smoothing on both sides."""
    p = _smooth(np.asarray(p, dtype=np.float64))
    q = _smooth(np.asarray(q, dtype=np.float64))
    return float(np.sum(p * np.log(p / q)))


def draw_majority_samples(ds: Dataset, majority_classes, count: int = KL_SAMPLE_COUNT,
                          seed=0) -> np.ndarray:
    """A seeded subsample of majority-class images (all of them when fewer)."""
    majority = sorted(set(int(k) for k in majority_classes))
    if not majority:
        raise ConfigError("need at least one majority class")
    idx = np.flatnonzero(np.isin(ds.labels, majority))
    if idx.size == 0:
        raise ConfigError(f"split holds no samples of classes {majority}")
    if idx.size > count:
        rng = component_rng(seed, "kl-majority")
        idx = np.sort(rng.choice(idx, size=count, replace=False))
    return ds.images[idx]


def kl_perception(model: ModelParams, majority_images: np.ndarray,
                  noises: np.ndarray) -> float:
    """Summed KL from each noise's softmax response to the mean response on
    real majority samples; large values mean the noises look nothing like
    the majority class to the classifier."""
    majority_images = np.asarray(majority_images)
    noises = np.asarray(noises)
    if majority_images.shape[0] == 0:
        raise ConfigError("need at least one majority sample")
    if noises.shape[0] == 0:
        raise ConfigError("need at least one noise")
    p_ref = _softmax_rows(forward(model, majority_images).data).mean(axis=0)
    p_obs = _softmax_rows(forward(model, noises).data)
    return float(sum(kl_divergence(row, p_ref) for row in p_obs))


def time_unlearning(fn) -> float:
    """Wall-clock milliseconds for one call; capture outputs via closure."""
    t0 = time.perf_counter()
    fn()
    return (time.perf_counter() - t0) * 1e3


def storage_report(noise_dir, generator_dir, dataset_bytes: int) -> dict:
    """Byte sizes of the unlearning-time artifacts and their ratio to the raw
    training data they replace. Loading validates both bundles."""
    if dataset_bytes <= 0:
        raise ConfigError(f"dataset_bytes must be positive, got {dataset_bytes}")
    load_noise_bank(noise_dir)
    load_generator(generator_dir)
    noise_bytes = dir_nbytes(noise_dir)
    gen_bytes = dir_nbytes(generator_dir)
    return {
        "noise_bank_bytes": noise_bytes,
        "generator_bytes": gen_bytes,
        "artifact_bytes": noise_bytes + gen_bytes,
        "dataset_bytes": int(dataset_bytes),
        "ratio": (noise_bytes + gen_bytes) / dataset_bytes,
    }


def resolve_rate(rate, num_classes: int):
    """Map the sweep token to an ImbalanceSpec rate; "vary" is the per-class
    rate vector and requires a matching class count."""
    if isinstance(rate, str):
        if rate != "vary":
            raise ConfigError(f"unknown rate token {rate!r}")
        if num_classes != len(VARY_RATES):
            raise ConfigError(
                f"vary mode defines {len(VARY_RATES)} rates, dataset has "
                f"{num_classes} classes")
        return VARY_RATES
    return rate


def rate_tag(rate) -> str:
    return rate if isinstance(rate, str) else format(float(rate), "g")


def run_cell(train_ds: Dataset, test_ds: Dataset, train_config: TrainPhaseConfig,
             rate, forget_class: int, cell_dir, rounds: int = 200,
             unlearn_lr: float = 1e-3, strategy: str = "in_batch") -> EvalReport:
    """One experiment cell: imbalance with the forget class as majority,
    train the full phase, save artifacts, unlearn, and measure."""
    K = train_config.arch.num_classes
    majority = frozenset({int(forget_class)})
    spec = ImbalanceSpec(majority=majority, rate=resolve_rate(rate, K))
    imb = build_imbalanced(train_ds, spec, seed=train_config.seed)

    phase = run_training_phase(imb, train_config)
    orig = evaluate(phase.model, test_ds, forget_classes=majority)
    per = np.asarray(orig.per_class, dtype=np.float64)
    minority_mask = np.ones(K, dtype=bool)
    minority_mask[forget_class] = False

    cell_dir = Path(cell_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    save_model(cell_dir / "model", phase.model)
    save_noise_bank(cell_dir / "noise_bank", phase.bank)
    save_generator(cell_dir / "generator", phase.gen)
    write_phase_log(cell_dir / "phase_log.csv", phase.log)

    request = UnlearnRequest(forget_classes=majority, rounds=rounds,
                             lr=unlearn_lr, strategy=strategy)
    box = {}

    def job():
        box["out"] = run_unlearning(phase.model, phase.bank, phase.gen, request)

    ms = time_unlearning(job)
    tuned, trajectory = box["out"]
    save_model(cell_dir / "model_unlearned", tuned)
    write_trajectory(cell_dir / "trajectory.csv", trajectory)

    after = evaluate(tuned, test_ds, forget_classes=majority)
    maj_images = draw_majority_samples(imb, majority, seed=train_config.seed)
    non_majority = [k for k in range(K) if k not in majority]
    kl = kl_perception(phase.model, maj_images, phase.bank.noises[non_majority])
    storage = storage_report(cell_dir / "noise_bank", cell_dir / "generator",
                             dataset_nbytes(imb))

    echo = {
        "rate": rate_tag(rate),
        "forget_class": int(forget_class),
        "seed": int(train_config.seed),
        "epochs": train_config.epochs,
        "rounds": rounds,
        "unlearn_lr": unlearn_lr,
        "strategy": strategy,
        "arch": train_config.arch.to_dict(),
    }
    report = EvalReport(
        per_class=tuple(float(v) for v in after.per_class),
        acc_retain=float(after.acc_retain),
        acc_retain_macro=float(after.macro_retain),
        acc_forget=float(after.acc_forget),
        orig_acc_majority=float(per[forget_class]),
        orig_acc_minority=float(per[minority_mask].mean()),
        kl_perception=kl,
        unlearn_ms=ms,
        noise_bank_bytes=storage["noise_bank_bytes"],
        generator_bytes=storage["generator_bytes"],
        dataset_bytes=storage["dataset_bytes"],
        storage_ratio=storage["ratio"],
        config_echo=echo,
        seed=int(train_config.seed),
    )
    with open(cell_dir / "report.json", "w") as fh:
        json.dump(dataclasses.asdict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


SWEEP_COLUMNS = [
    "rate", "forget_class", "seed", "acc_forget", "acc_retain",
    "acc_retain_macro", "orig_acc_majority", "orig_acc_minority",
    "kl_perception", "unlearn_ms", "noise_bank_bytes", "generator_bytes",
    "dataset_bytes", "storage_ratio",
]


def _sweep_row(report: EvalReport) -> dict:
    row = {k: report.config_echo[k] for k in ("rate", "forget_class", "seed")}
    for col in SWEEP_COLUMNS[3:]:
        row[col] = getattr(report, col)
    return row


def aggregate_rows(rows) -> list:
    """Mean accuracy over forget-class choices for each (rate, seed), the way
    the headline tables average per-class unlearning runs."""
    groups = {}
    for row in rows:
        groups.setdefault((row["rate"], row["seed"]), []).append(row)
    out = []
    for (rate, seed), members in sorted(groups.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
        out.append({
            "rate": rate,
            "seed": seed,
            "n_forget_choices": len(members),
            "mean_acc_forget": float(np.mean([m["acc_forget"] for m in members])),
            "mean_acc_retain": float(np.mean([m["acc_retain"] for m in members])),
            "mean_orig_gap": float(np.mean(
                [m["orig_acc_majority"] - m["orig_acc_minority"] for m in members])),
        })
    return out


def sweep(cell_fn, rates, forget_classes, seeds, out_dir) -> list:
    """Run cell_fn over the full (rate, forget class, seed) grid.

    cell_fn(rate, forget_class, seed, cell_dir) -> EvalReport. Emits
    sweep.csv (one row per cell) and sweep.json (rows + aggregates); a cell
    failure aborts the grid, renamed with the cell's identity.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports, rows = [], []
    for rate in rates:
        for forget in forget_classes:
            for seed in seeds:
                cell_dir = out_dir / f"cell_r{rate_tag(rate)}_f{forget}_s{seed}"
                try:
                    report = cell_fn(rate=rate, forget_class=forget, seed=seed,
                                     cell_dir=cell_dir)
                except Exception as exc:
                    raise SweepCellError(
                        f"cell rate={rate_tag(rate)} forget={forget} "
                        f"seed={seed} failed: {exc}") from exc
                reports.append(report)
                rows.append(_sweep_row(report))
    write_sweep_csv(out_dir / "sweep.csv", rows)
    with open(out_dir / "sweep.json", "w") as fh:
        json.dump({"columns": SWEEP_COLUMNS, "cells": rows,
                   "aggregates": aggregate_rows(rows)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return reports


def write_sweep_csv(path, rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
