"""Unlearning phase: data-free class removal by in-batch tuning on
generated proxies, plus the tuning-strategy and proxy-provenance ablations.

The deployment path, run_unlearning, accepts only the trained classifier,
the noise bank, the generator, and a request; no dataset can reach it
through the signature. Proxies are generated once up front and frozen.
The combined objective sums plain cross-entropy over retain-class proxies
with the reciprocal of (floored) cross-entropy over forget-class proxies,
pushing the model toward error on what must be forgotten while holding
the rest in place.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .classifier import ModelParams, forward
from .data import Dataset
from .errors import ConfigError, NonFiniteValue
from .generator import GeneratorParams, generate_proxies, init_generator, train_generator
from .noise import NoiseBank, init_noise, train_noise_bank
from .optim import AdamState, adam_step
from .seeding import component_seed
from .tensor import Tensor

TUNING_LR = 4e-4  # reference recipe lr for unlearning-time tuning
RECIPROCAL_FLOOR = 1e-6  # guards 1/CE when a forget proxy is perfectly classified

STRATEGIES = ("in_batch", "impair_repair")


@dataclass(frozen=True)
class UnlearnRequest:
    forget_classes: frozenset
    rounds: int = 100
    lr: float = TUNING_LR
    strategy: str = "in_batch"
    eps: float = RECIPROCAL_FLOOR

    def __post_init__(self):
        object.__setattr__(self, "forget_classes", frozenset(self.forget_classes))
        if not self.forget_classes:
            raise ConfigError("forget set must be nonempty")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.eps <= 0:
            raise ConfigError("reciprocal floor must be positive")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")

    def validate_against(self, num_classes: int) -> None:
        if any(not 0 <= k < num_classes for k in self.forget_classes):
            raise ConfigError("forget class out of range")
        if len(self.forget_classes) >= num_classes:
            raise ConfigError("forget set must be a proper subset of the classes")


def _clamped_reciprocal(ce: Tensor, eps: float) -> Tensor:
    # max(ce, eps) built from relu: relu(ce - eps) + eps
    return 1.0 / (T.relu(ce - eps) + eps)


def in_batch_loss(model: ModelParams, proxy_images, proxy_labels, forget_classes,
                  eps: float = RECIPROCAL_FLOOR) -> Tensor:
    """L_u: sum of retain-proxy CE plus reciprocal floored CE on forget proxies."""
    labels = np.asarray(proxy_labels)
    logits = forward(model, proxy_images)
    ce = T.softmax_cross_entropy(logits, labels)
    forget_mask = np.isin(labels, sorted(forget_classes)).astype(ce.data.dtype)
    retain_mask = 1.0 - forget_mask
    retain_term = (ce * Tensor(retain_mask)).sum()
    forget_term = (_clamped_reciprocal(ce, eps) * Tensor(forget_mask)).sum()
    return retain_term + forget_term


@dataclass
class RoundLog:
    phase: str  # "in_batch", "impair", or "repair"
    round: int
    loss: float
    forget_ce: float  # mean raw CE over forget proxies
    retain_ce: float  # mean raw CE over retain proxies
    extra: dict = field(default_factory=dict)  # eval-callback results


def _copy_model(model: ModelParams) -> ModelParams:
    params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in model.params.items()}
    return ModelParams(arch=model.arch, params=params)


def _mean_ce(ce: np.ndarray, mask: np.ndarray) -> float:
    return float(ce[mask.astype(bool)].mean()) if mask.any() else float("nan")


def run_unlearning(model: ModelParams, bank: NoiseBank, gen: GeneratorParams,
                   request: UnlearnRequest, eval_callback=None):
    """Algorithm: generate one proxy per class, then tune for `rounds` steps.

    Returns (unlearned model, per-round trajectory). The input model is
    never mutated. eval_callback, when given, is called with the evolving
    model after each round and its dict result lands in the trajectory;
    it is the only doorway to test data and lives entirely with the caller.
    """
    request.validate_against(bank.num_classes)
    if gen.trained_steps == 0:
        raise ConfigError("generator was never trained; no usable proxies")
    tuned = _copy_model(model)
    proxy_images, proxy_labels = generate_proxies(bank, gen)
    if request.strategy == "impair_repair":
        return _impair_repair(
            tuned, proxy_images, proxy_labels, request, eval_callback
        )

    forget_mask = np.isin(proxy_labels, sorted(request.forget_classes))
    state = AdamState.for_params(tuned.params, lr=request.lr, weight_decay=0.0)
    trajectory = []
    for rnd in range(request.rounds):
        ce_values = {}

        def loss_fn():
            logits = forward(tuned, proxy_images)
            ce = T.softmax_cross_entropy(logits, proxy_labels)
            ce_values["ce"] = ce.data.copy()
            retain = (ce * Tensor((~forget_mask).astype(ce.data.dtype))).sum()
            forget = (
                _clamped_reciprocal(ce, request.eps)
                * Tensor(forget_mask.astype(ce.data.dtype))
            ).sum()
            return retain + forget

        loss, grads = T.forward_backward(loss_fn, tuned.params)
        if not np.isfinite(loss):
            raise NonFiniteValue(f"unlearning loss at round {rnd}")
        adam_step(tuned.params, grads, state)
        entry = RoundLog(
            phase="in_batch", round=rnd, loss=loss,
            forget_ce=_mean_ce(ce_values["ce"], forget_mask),
            retain_ce=_mean_ce(ce_values["ce"], ~forget_mask),
        )
        if eval_callback is not None:
            entry.extra = dict(eval_callback(tuned))
        trajectory.append(entry)
    return tuned, trajectory


def impair_repair(model: ModelParams, proxy_images, proxy_labels, forget_classes,
                  rounds: int, lr: float = TUNING_LR, eval_callback=None):
    """Two-phase ablation: `rounds` of CE ascent on forget proxies, then
    `rounds` of CE descent on retain proxies (2x the in-batch round count)."""
    tuned = _copy_model(model)
    request = UnlearnRequest(
        forget_classes=frozenset(forget_classes), rounds=rounds, lr=lr,
        strategy="impair_repair",
    )
    return _impair_repair(tuned, proxy_images, proxy_labels, request, eval_callback)


def _impair_repair(tuned: ModelParams, proxy_images, proxy_labels,
                   request: UnlearnRequest, eval_callback):
    labels = np.asarray(proxy_labels)
    forget_mask = np.isin(labels, sorted(request.forget_classes))
    trajectory = []
    for phase, mask, sign in (("impair", forget_mask, -1.0), ("repair", ~forget_mask, 1.0)):
        state = AdamState.for_params(tuned.params, lr=request.lr, weight_decay=0.0)
        for rnd in range(request.rounds):
            ce_values = {}

            def loss_fn():
                logits = forward(tuned, proxy_images)
                ce = T.softmax_cross_entropy(logits, labels)
                ce_values["ce"] = ce.data.copy()
                return (ce * Tensor(mask.astype(ce.data.dtype))).sum() * sign

            loss, grads = T.forward_backward(loss_fn, tuned.params)
            if not np.isfinite(loss):
                raise NonFiniteValue(f"{phase} loss at round {rnd}")
            adam_step(tuned.params, grads, state)
            entry = RoundLog(
                phase=phase, round=rnd, loss=loss,
                forget_ce=_mean_ce(ce_values["ce"], forget_mask),
                retain_ce=_mean_ce(ce_values["ce"], ~forget_mask),
            )
            if eval_callback is not None:
                entry.extra = dict(eval_callback(tuned))
            trajectory.append(entry)
    return tuned, trajectory


def post_hoc_proxies(model: ModelParams, ds: Dataset, config):
    """Ablation: craft noises and generator only after training, against the
    frozen final classifier, with one full phase's worth of steps.

    This is the provenance control for concurrently trained prompts; the
    deployment path never touches this function.
    """
    from .training import select_supervision

    bank = init_noise(config.arch.input_shape, config.arch.num_classes, seed=config.seed)
    train_noise_bank(bank, model, config.noise_steps * config.epochs, lr=config.lr_noise)
    gen = init_generator(config.gen, seed=config.seed)
    supervision = select_supervision(model, ds, config.selection_mode, config.top_b)
    gen_seed = int(component_seed(config.seed, "post-hoc-generator").generate_state(1)[0])
    train_generator(
        gen, bank, supervision[0], supervision[1],
        steps=config.gen_steps * config.epochs, lr=config.lr_generator, seed=gen_seed,
    )
    return bank, gen


def retrain_oracle(ds_retain: Dataset, config) -> ModelParams:
    """Gold standard: fresh training on retained data only (reference runs)."""
    from .training import train_classifier

    model, _ = train_classifier(ds_retain, config)
    return model


def write_trajectory(path, trajectory) -> None:
    """Trajectory CSV: phase, round, loss, proxy CEs, any callback metrics."""
    extra_keys = sorted({k for e in trajectory for k in e.extra})
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phase", "round", "loss", "forget_ce", "retain_ce", *extra_keys])
        for e in trajectory:
            writer.writerow([
                e.phase, e.round, f"{e.loss:.6f}",
                f"{e.forget_ce:.6f}", f"{e.retain_ce:.6f}",
                *[f"{e.extra[k]:.6f}" if k in e.extra else "" for k in extra_keys],
            ])
