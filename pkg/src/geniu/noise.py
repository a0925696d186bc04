"""Per-class noise prompts: one tensor per class, tuned until the frozen
classifier assigns it to that class.

The bank is the only generation prompt available at unlearning time, so
its training never touches classifier parameters, and the all-classes
gate decides when the prompts are trustworthy enough to supervise the
proxy generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .classifier import ModelParams, forward, model_fingerprint
from .errors import ConfigError, NonFiniteValue
from .optim import AdamState, adam_step
from .seeding import component_rng
from .tensor import Tensor

NOISE_LR = 0.02  # reference recipe value for prompt tuning


@dataclass
class NoiseBank:
    noises: np.ndarray  # [K, channels, height, width], noise z_k for class k
    trained_at_epoch: int = -1  # last classifier epoch the bank was tuned against
    classifier_fingerprint: str = ""

    @property
    def num_classes(self) -> int:
        return self.noises.shape[0]

    @property
    def labels(self) -> np.ndarray:
        return np.arange(self.num_classes, dtype=np.int64)


def init_noise(input_shape, K, seed) -> NoiseBank:
    """K i.i.d. standard-normal noises shaped like one input sample."""
    if K < 1:
        raise ConfigError(f"need at least one class, got K={K}")
    rng = component_rng(seed, "noise-init")
    noises = rng.normal(size=(K, *input_shape)).astype(np.float32)
    return NoiseBank(noises=noises)


def noise_losses(bank: NoiseBank, model: ModelParams) -> np.ndarray:
    """Per-class cross-entropy of the classifier on each prompt."""
    logits = forward(model, bank.noises)
    return T.softmax_cross_entropy(logits, bank.labels).data.copy()


def train_noise_bank(bank: NoiseBank, model: ModelParams, steps: int,
                     lr: float = NOISE_LR, epoch: int = None) -> NoiseBank:
    """Adam-tune every prompt against its own class for `steps` iterations.

    Warm-starts from the bank's current noises; classifier parameters are
    read-only throughout. The K prompts sit in one batch, which is exactly
    per-class training because rows never mix and Adam is elementwise.
    Optimizer moments are rebuilt per call so the bank file alone carries
    all cross-epoch state.
    """
    z = Tensor(bank.noises.copy(), requires_grad=True)
    labels = bank.labels
    params = {"z": z}
    state = AdamState.for_params(params, lr=lr, weight_decay=0.0)
    for step in range(steps):
        def loss_fn():
            logits = forward(model, z)
            # sum, not mean: keeps each class's gradient identical to a
            # standalone per-class run
            return T.softmax_cross_entropy(logits, labels).sum()

        loss, grads = T.forward_backward(loss_fn, params)
        if not np.isfinite(loss):
            raise NonFiniteValue(f"noise prompt loss at step {step}")
        adam_step(params, grads, state)
    for p in model.params.values():
        p.zero_grad()  # backward scribbled grads on the frozen classifier
    bank.noises = z.data
    bank.classifier_fingerprint = model_fingerprint(model)
    if epoch is not None:
        bank.trained_at_epoch = int(epoch)
    return bank


def gate_check(bank: NoiseBank, model: ModelParams) -> bool:
    """True iff every prompt is classified as its own class (strict all-K)."""
    logits = forward(model, bank.noises)
    return bool(np.all(np.argmax(logits.data, axis=1) == bank.labels))
