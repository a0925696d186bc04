"""The classifier under study: a small configurable net, its training loop,
and split-wise evaluation with retained/forgotten class accuracy.

Two architectures cover the experiments: an MLP for low-dimensional blob
images and a reduced all-convolutional net (stride-2 conv blocks, global
average pool, linear head) for larger image data. Defaults mirror the
reference training recipe: SGD, lr 0.01, weight decay 1e-4, batch 256.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset, batches
from .errors import ConfigError, NonFiniteValue, ShapeMismatch
from .optim import AdamState, adam_step, sgd_step
from .seeding import component_rng
from .tensor import Tensor


@dataclass(frozen=True)
class ArchSpec:
    kind: str  # "mlp" or "smallcnn"
    input_shape: tuple  # (channels, height, width)
    num_classes: int
    hidden: tuple = ()  # mlp hidden layer widths
    channels: tuple = ()  # smallcnn conv channels, stride 2 each

    def __post_init__(self):
        if self.kind not in ("mlp", "smallcnn"):
            raise ConfigError(f"unknown architecture kind {self.kind!r}")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 output classes")
        if len(self.input_shape) != 3:
            raise ConfigError("input_shape must be (channels, height, width)")
        if self.kind == "smallcnn" and not self.channels:
            raise ConfigError("smallcnn needs a nonempty channel list")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(d) for d in self.hidden))
        object.__setattr__(self, "channels", tuple(int(d) for d in self.channels))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "hidden": list(self.hidden),
            "channels": list(self.channels),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(
            kind=d["kind"],
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            hidden=tuple(d.get("hidden", ())),
            channels=tuple(d.get("channels", ())),
        )


@dataclass
class ModelParams:
    arch: ArchSpec
    params: dict = field(default_factory=dict)  # name -> Tensor


@dataclass
class OptimConfig:
    optimizer: str = "sgd"
    lr: float = 0.01
    weight_decay: float = 1e-4
    batch_size: int = 256

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be sgd or adam, got {self.optimizer!r}")


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(
        rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True
    )


def init_model(arch: ArchSpec, seed) -> ModelParams:
    """Fan-in-scaled uniform init, deterministic under seed."""
    rng = component_rng(seed, "model-init")
    params = {}
    if arch.kind == "mlp":
        widths = [int(np.prod(arch.input_shape))] + list(arch.hidden) + [arch.num_classes]
        for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
            params[f"fc{i}.w"] = _uniform(rng, (fan_in, fan_out), fan_in)
            params[f"fc{i}.b"] = _uniform(rng, (fan_out,), fan_in)
    else:
        in_ch = arch.input_shape[0]
        for i, out_ch in enumerate(arch.channels):
            fan_in = in_ch * 9
            params[f"conv{i}.w"] = _uniform(rng, (out_ch, in_ch, 3, 3), fan_in)
            params[f"conv{i}.b"] = _uniform(rng, (out_ch,), fan_in)
            in_ch = out_ch
        params["head.w"] = _uniform(rng, (in_ch, arch.num_classes), in_ch)
        params["head.b"] = _uniform(rng, (arch.num_classes,), in_ch)
    return ModelParams(arch=arch, params=params)


def forward(model: ModelParams, images) -> Tensor:
    """Logits [batch, K]; images may be a Tensor (grads flow to them) or array."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    arch = model.arch
    if tuple(x.data.shape[1:]) != arch.input_shape:
        raise ShapeMismatch("forward", x.data.shape[1:], arch.input_shape)
    p = model.params
    if arch.kind == "mlp":
        h = x.reshape((x.data.shape[0], -1))
        n_layers = len(arch.hidden) + 1
        for i in range(n_layers):
            h = h @ p[f"fc{i}.w"] + p[f"fc{i}.b"]
            if i < n_layers - 1:
                h = T.relu(h)
        return h
    h = x
    for i in range(len(arch.channels)):
        b = p[f"conv{i}.b"]
        h = T.conv2d(h, p[f"conv{i}.w"], stride=2, padding=1)
        h = h + b.reshape((1, b.data.shape[0], 1, 1))
        h = T.relu(h)
    pooled = h.mean(axis=(2, 3))
    return pooled @ p["head.w"] + p["head.b"]


def num_params(model: ModelParams) -> int:
    return sum(int(t.data.size) for t in model.params.values())


def model_fingerprint(model: ModelParams) -> str:
    """sha256 over the architecture and raw little-endian parameter bytes."""
    digest = hashlib.sha256()
    digest.update(json.dumps(model.arch.to_dict(), sort_keys=True).encode())
    for name in sorted(model.params):
        digest.update(name.encode())
        digest.update(np.asarray(model.params[name].data, dtype="<f4").tobytes())
    return digest.hexdigest()


def train_epoch(model: ModelParams, ds: Dataset, cfg: OptimConfig, shuffle_seed,
                adam_state: AdamState = None):
    """One pass over seeded batches with cross-entropy; returns mean loss.

    Parameters are updated in place. For adam, pass the same AdamState
    across epochs to keep moment estimates; sgd is stateless.
    """
    if cfg.optimizer == "adam" and adam_state is None:
        raise ConfigError("adam needs an AdamState carried across calls")
    total, count = 0.0, 0
    for images, labels in batches(ds, cfg.batch_size, shuffle_seed):
        def loss_fn(images=images, labels=labels):
            logits = forward(model, images)
            return T.softmax_cross_entropy(logits, labels).mean()

        loss, grads = T.forward_backward(loss_fn, model.params)
        if not np.isfinite(loss):
            raise NonFiniteValue(
                f"training loss at sample {count} of split {ds.split!r}"
            )
        if cfg.optimizer == "sgd":
            sgd_step(model.params, grads, lr=cfg.lr, weight_decay=cfg.weight_decay)
        else:
            adam_step(model.params, grads, adam_state)
        total += loss * len(labels)
        count += len(labels)
    return model, total / count


@dataclass
class AccuracyBreakdown:
    per_class: np.ndarray  # [K], nan where the split has no samples
    acc_retain: float  # micro over labels outside the forget set
    acc_forget: float  # micro over the forget set; nan when it is empty
    macro_retain: float
    macro_forget: float
    n_retain: int
    n_forget: int


def predict(model: ModelParams, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        logits = forward(model, images[start : start + batch_size])
        out.append(np.argmax(logits.data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: ModelParams, ds: Dataset, forget_classes=frozenset()) -> AccuracyBreakdown:
    """Per-class and retained/forgotten accuracy on a split.

    Retained accuracy is micro-averaged (correct/total over samples whose
    label is outside the forget set); the macro variant is reported too.
    """
    if ds.n == 0:
        raise ConfigError("cannot evaluate on an empty split")
    forget = frozenset(forget_classes)
    k = ds.num_classes
    present = set(np.unique(ds.labels).tolist())
    if present and present <= forget:
        raise ConfigError("forget set covers every class present; retained accuracy undefined")
    pred = predict(model, ds.images)
    correct = pred == ds.labels
    per_class = np.full(k, np.nan)
    for c in range(k):
        mask = ds.labels == c
        if mask.any():
            per_class[c] = float(correct[mask].mean())
    retain_mask = ~np.isin(ds.labels, sorted(forget))
    forget_mask = ~retain_mask
    retain_classes = [c for c in range(k) if c not in forget and not np.isnan(per_class[c])]
    forget_present = [c for c in forget if c < k and not np.isnan(per_class[c])]
    return AccuracyBreakdown(
        per_class=per_class,
        acc_retain=float(correct[retain_mask].mean()),
        acc_forget=float(correct[forget_mask].mean()) if forget_mask.any() else float("nan"),
        macro_retain=float(np.mean([per_class[c] for c in retain_classes])),
        macro_forget=float(np.mean([per_class[c] for c in forget_present]))
        if forget_present
        else float("nan"),
        n_retain=int(retain_mask.sum()),
        n_forget=int(forget_mask.sum()),
    )
