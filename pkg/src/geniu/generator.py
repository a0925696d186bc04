"""Proxy generator: a small convolutional VAE mapping class noise prompts
to data-like proxy samples.

Encoder widens channels while halving spatial dims; two linear heads give
the posterior mean and log-variance; the decoder mirrors with nearest
upsampling plus conv. The objective is reconstruction minus a weighted
distribution term, L_gen = L_rec - lam * L_dis, where L_dis is
(1/2K) sum(1 + log s2 - s2 - mu^2), the negated KL to a standard normal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, NonFiniteValue, ShapeMismatch
from .noise import NoiseBank
from .optim import AdamState, adam_step
from .seeding import component_rng, component_seed
from .tensor import Tensor

GENERATOR_LR = 0.005  # reference recipe value for g
LAMBDA_DEFAULT = 2.5e-4  # reference trade-off between L_rec and L_dis


@dataclass(frozen=True)
class GeneratorSpec:
    input_shape: tuple  # (channels, height, width) of the data
    channels: tuple = (16, 32)  # encoder widths, one stride-2 block each
    latent: int = 32
    lam: float = LAMBDA_DEFAULT

    def __post_init__(self):
        if self.latent <= 0:
            raise ConfigError("latent dimension must be positive")
        if not self.channels:
            raise ConfigError("encoder needs a nonempty channel list")
        if self.lam < 0:
            raise ConfigError("lambda must be nonnegative")
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        _, h, w = self.input_shape
        factor = 2 ** len(self.channels)
        if h % factor or w % factor:
            raise ConfigError(
                f"spatial dims {h}x{w} must be divisible by 2^depth = {factor} "
                "so the mirrored decoder reproduces the input shape"
            )

    @property
    def bottleneck(self):
        _, h, w = self.input_shape
        factor = 2 ** len(self.channels)
        return self.channels[-1], h // factor, w // factor

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "channels": list(self.channels),
            "latent": self.latent,
            "lam": self.lam,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(
            input_shape=tuple(d["input_shape"]),
            channels=tuple(d["channels"]),
            latent=int(d["latent"]),
            lam=float(d["lam"]),
        )


@dataclass
class GeneratorParams:
    spec: GeneratorSpec
    params: dict = field(default_factory=dict)
    trained_steps: int = 0


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(
        rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True
    )


def init_generator(spec: GeneratorSpec, seed) -> GeneratorParams:
    rng = component_rng(seed, "generator-init")
    p = {}
    in_ch = spec.input_shape[0]
    for i, out_ch in enumerate(spec.channels):
        p[f"enc{i}.w"] = _uniform(rng, (out_ch, in_ch, 3, 3), in_ch * 9)
        p[f"enc{i}.b"] = _uniform(rng, (out_ch,), in_ch * 9)
        in_ch = out_ch
    c, bh, bw = spec.bottleneck
    flat = c * bh * bw
    for head in ("mu", "logvar"):
        p[f"{head}.w"] = _uniform(rng, (flat, spec.latent), flat)
        p[f"{head}.b"] = _uniform(rng, (spec.latent,), flat)
    p["dec_in.w"] = _uniform(rng, (spec.latent, flat), spec.latent)
    p["dec_in.b"] = _uniform(rng, (flat,), spec.latent)
    widths = list(reversed(spec.channels))  # e.g. [32, 16]
    for i, (cin, cout) in enumerate(zip(widths, widths[1:])):
        p[f"dec{i}.w"] = _uniform(rng, (cout, cin, 3, 3), cin * 9)
        p[f"dec{i}.b"] = _uniform(rng, (cout,), cin * 9)
    p["out.w"] = _uniform(rng, (spec.input_shape[0], widths[-1], 3, 3), widths[-1] * 9)
    p["out.b"] = _uniform(rng, (spec.input_shape[0],), widths[-1] * 9)
    return GeneratorParams(spec=spec, params=p)


def _conv_block(h, w, b, stride):
    h = T.conv2d(h, w, stride=stride, padding=1)
    return h + b.reshape((1, b.data.shape[0], 1, 1))


def encode(gen: GeneratorParams, x: Tensor):
    p = gen.params
    h = x
    for i in range(len(gen.spec.channels)):
        h = T.relu(_conv_block(h, p[f"enc{i}.w"], p[f"enc{i}.b"], stride=2))
    flat = h.reshape((h.data.shape[0], -1))
    mu = flat @ p["mu.w"] + p["mu.b"]
    logvar = flat @ p["logvar.w"] + p["logvar.b"]
    return mu, logvar


def decode(gen: GeneratorParams, code: Tensor) -> Tensor:
    p = gen.params
    c, bh, bw = gen.spec.bottleneck
    h = T.relu(code @ p["dec_in.w"] + p["dec_in.b"])
    h = h.reshape((code.data.shape[0], c, bh, bw))
    for i in range(len(gen.spec.channels) - 1):
        h = T.upsample2x(h)
        h = T.relu(_conv_block(h, p[f"dec{i}.w"], p[f"dec{i}.b"], stride=1))
    h = T.upsample2x(h)
    return T.sigmoid(_conv_block(h, p["out.w"], p["out.b"], stride=1))


def vae_forward(gen: GeneratorParams, z_batch, sample: bool, seed=0):
    """Run prompts through the VAE; returns (reconstruction, mu, logvar).

    sample=True draws the latent as mu + sigma * eps with seeded eps;
    sample=False propagates the mean, making the call deterministic.
    """
    z = z_batch if isinstance(z_batch, Tensor) else Tensor(z_batch)
    if tuple(z.data.shape[1:]) != gen.spec.input_shape:
        raise ShapeMismatch("vae_forward", z.data.shape[1:], gen.spec.input_shape)
    mu, logvar = encode(gen, z)
    if sample:
        rng = component_rng(seed, "vae-reparam")
        eps = rng.normal(size=mu.data.shape).astype(np.float32)
        code = mu + (logvar * 0.5).exp() * Tensor(eps)
    else:
        code = mu
    x_prime = decode(gen, code)
    for name, t in (("reconstruction", x_prime), ("mu", mu), ("logvar", logvar)):
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteValue(f"vae {name}")
    return x_prime, mu, logvar


def loss_gen(x_prime: Tensor, x_target, mu: Tensor, logvar: Tensor, lam: float):
    """(L_gen, L_rec, L_dis) per the combined objective L_rec - lam * L_dis."""
    if lam < 0:
        raise ConfigError("lambda must be nonnegative")
    rec = T.mse(x_prime, x_target)
    k = mu.data.shape[0]
    dis = (1.0 + logvar - logvar.exp() - mu.square()).sum() * (1.0 / (2 * k))
    gen_loss = rec - lam * dis
    return gen_loss, rec, dis


def train_generator(gen: GeneratorParams, bank: NoiseBank, sup_images, sup_labels,
                    steps: int, lr: float = GENERATOR_LR, seed=0,
                    loss_log: list = None) -> GeneratorParams:
    """Adam-tune the VAE to map prompt z_k onto class k's supervision samples.

    The supervision set holds B samples per class; step s pairs z_k with its
    class's (s mod B)-th sample, rotating through all targets. Optimizer
    moments are rebuilt per call; neither the bank nor any classifier is
    touched.
    """
    k = bank.num_classes
    sup_labels = np.asarray(sup_labels)
    by_class = [np.flatnonzero(sup_labels == c) for c in range(k)]
    counts = {len(idx) for idx in by_class}
    if 0 in counts:
        missing = [c for c in range(k) if len(by_class[c]) == 0]
        raise ConfigError(f"supervision set missing classes {missing}")
    if len(counts) != 1:
        raise ConfigError(f"supervision set is unbalanced: per-class counts {sorted(counts)}")
    b = counts.pop()

    z = Tensor(bank.noises)  # constant input; prompts are not tuned here
    state = AdamState.for_params(gen.params, lr=lr, weight_decay=0.0)
    step_seeds = component_seed(seed, "generator-train").generate_state(max(steps, 1))
    for step in range(steps):
        targets = sup_images[[by_class[c][step % b] for c in range(k)]]
        def loss_fn():
            x_prime, mu, logvar = vae_forward(gen, z, sample=True, seed=int(step_seeds[step]))
            total, rec, dis = loss_gen(x_prime, targets, mu, logvar, gen.spec.lam)
            if loss_log is not None:
                loss_log.append((float(total.data), float(rec.data), float(dis.data)))
            return total

        loss, grads = T.forward_backward(loss_fn, gen.params)
        if not np.isfinite(loss):
            raise NonFiniteValue(f"generator loss at step {step}")
        adam_step(gen.params, grads, state)
    gen.trained_steps += steps
    return gen


def generate_proxies(bank: NoiseBank, gen: GeneratorParams, sample: bool = False, seed=0):
    """One proxy per class: x'_k = g(z_k), labeled k. Mean latent by default."""
    x_prime, _, _ = vae_forward(gen, bank.noises, sample=sample, seed=seed)
    return x_prime.data.copy(), bank.labels
