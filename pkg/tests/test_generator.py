"""VAE proxy generator tests: forward paths, the combined loss, training."""

import numpy as np
import pytest

from geniu.classifier import ArchSpec, OptimConfig, init_model, predict, train_epoch
from geniu.data import synth_blobs
from geniu.errors import ConfigError, NonFiniteValue, ShapeMismatch
from geniu.generator import (
    GeneratorParams,
    GeneratorSpec,
    generate_proxies,
    init_generator,
    loss_gen,
    train_generator,
    vae_forward,
)
from geniu.noise import init_noise, train_noise_bank
from geniu.tensor import Tensor
from oracles import (
    central_difference_grad,
    loop_dis_loss,
    loop_gen_loss,
    loop_kl_gaussian_to_standard,
    loop_rec_loss,
    rel_error,
)

SPEC_8X8 = GeneratorSpec(input_shape=(1, 8, 8), channels=(16, 32), latent=32)


def param_bytes(gen):
    return b"".join(gen.params[k].data.tobytes() for k in sorted(gen.params))


class TestSpecValidation:
    def test_bad_latent(self):
        with pytest.raises(ConfigError):
            GeneratorSpec(input_shape=(1, 8, 8), channels=(16,), latent=0)

    def test_empty_channels(self):
        with pytest.raises(ConfigError):
            GeneratorSpec(input_shape=(1, 8, 8), channels=(), latent=8)

    def test_indivisible_spatial_dims(self):
        with pytest.raises(ConfigError):
            GeneratorSpec(input_shape=(1, 6, 6), channels=(8, 16), latent=8)

    def test_negative_lambda(self):
        with pytest.raises(ConfigError):
            GeneratorSpec(input_shape=(1, 8, 8), channels=(16,), latent=8, lam=-1e-4)

    def test_roundtrip_dict(self):
        spec = GeneratorSpec.from_dict(SPEC_8X8.to_dict())
        assert spec == SPEC_8X8


class TestVaeForward:
    def test_mean_path_deterministic(self):
        gen = init_generator(SPEC_8X8, seed=0)
        z = np.random.default_rng(0).normal(size=(4, 1, 8, 8)).astype(np.float32)
        a, _, _ = vae_forward(gen, z, sample=False)
        b, _, _ = vae_forward(gen, z, sample=False)
        assert a.data.tobytes() == b.data.tobytes()

    def test_output_shape_matches_input(self):
        gen = init_generator(SPEC_8X8, seed=0)
        z = np.zeros((3, 1, 8, 8), dtype=np.float32)
        x_prime, mu, logvar = vae_forward(gen, z, sample=False)
        assert x_prime.data.shape == (3, 1, 8, 8)
        assert mu.data.shape == (3, 32)
        assert logvar.data.shape == (3, 32)

    def test_sampled_path_seeded(self):
        gen = init_generator(SPEC_8X8, seed=0)
        z = np.random.default_rng(1).normal(size=(2, 1, 8, 8)).astype(np.float32)
        a, _, _ = vae_forward(gen, z, sample=True, seed=5)
        b, _, _ = vae_forward(gen, z, sample=True, seed=5)
        c, _, _ = vae_forward(gen, z, sample=True, seed=6)
        assert a.data.tobytes() == b.data.tobytes()
        assert a.data.tobytes() != c.data.tobytes()

    def test_vanishing_sigma_matches_mean_path(self):
        gen = init_generator(SPEC_8X8, seed=0)
        gen.params["logvar.w"].data[:] = 0.0
        gen.params["logvar.b"].data[:] = -200.0  # sigma ~ e^-100, numerically 0
        z = np.random.default_rng(2).normal(size=(2, 1, 8, 8)).astype(np.float32)
        sampled, _, _ = vae_forward(gen, z, sample=True, seed=9)
        mean, _, _ = vae_forward(gen, z, sample=False)
        np.testing.assert_allclose(sampled.data, mean.data, rtol=0, atol=1e-7)

    def test_output_in_unit_interval(self):
        gen = init_generator(SPEC_8X8, seed=3)
        z = np.random.default_rng(3).normal(size=(5, 1, 8, 8)).astype(np.float32)
        x_prime, _, _ = vae_forward(gen, z, sample=False)
        assert x_prime.data.min() >= 0.0 and x_prime.data.max() <= 1.0

    def test_shape_mismatch_rejected(self):
        gen = init_generator(SPEC_8X8, seed=0)
        with pytest.raises(ShapeMismatch):
            vae_forward(gen, np.zeros((2, 1, 4, 4), dtype=np.float32), sample=False)

    def test_nonfinite_rejected(self):
        gen = init_generator(SPEC_8X8, seed=0)
        gen.params["mu.w"].data[:] = np.nan
        with np.errstate(invalid="ignore"), pytest.raises(NonFiniteValue):
            vae_forward(gen, np.zeros((1, 1, 8, 8), dtype=np.float32), sample=False)


class TestLossGen:
    def test_perfect_reconstruction_prior_posterior(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 1, 4, 4)))
        mu = Tensor(np.zeros((2, 3)))
        logvar = Tensor(np.zeros((2, 3)))  # sigma^2 = 1
        total, rec, dis = loss_gen(x, x.data, mu, logvar, lam=2.5e-4)
        assert float(rec.data) == 0.0
        assert float(dis.data) == 0.0
        assert float(total.data) == 0.0

    def test_single_unit_case(self):
        # K=1, l=1, mu=1, sigma^2=1: dis = (1/2)(1+0-1-1) = -0.5
        x = Tensor(np.ones((1, 1, 1, 1)))
        lam = 2.5e-4
        total, rec, dis = loss_gen(x, x.data, Tensor(np.ones((1, 1))), Tensor(np.zeros((1, 1))), lam)
        assert abs(float(dis.data) - (-0.5)) < 1e-12
        assert abs(float(total.data) - lam * 0.5) < 1e-12

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scalar_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        recon = rng.uniform(0, 1, size=(4, 1, 3, 3))
        target = rng.uniform(0, 1, size=(4, 1, 3, 3))
        mu = rng.normal(size=(4, 6))
        logvar = rng.normal(scale=0.5, size=(4, 6))
        lam = 2.5e-4
        total, rec, dis = loss_gen(Tensor(recon), target, Tensor(mu), Tensor(logvar), lam)
        exp_total, exp_rec, exp_dis = loop_gen_loss(recon, target, mu, logvar, lam)
        assert abs(float(rec.data) - exp_rec) < 1e-10
        assert abs(float(dis.data) - exp_dis) < 1e-10
        assert abs(float(total.data) - exp_total) < 1e-10

    @pytest.mark.parametrize("seed", range(5))
    def test_dis_nonpositive_and_negated_kl(self, seed):
        rng = np.random.default_rng(100 + seed)
        mu = rng.normal(size=(3, 8))
        logvar = rng.normal(scale=0.7, size=(3, 8))
        _, _, dis = loss_gen(
            Tensor(np.zeros((3, 1, 2, 2))), np.zeros((3, 1, 2, 2)),
            Tensor(mu), Tensor(logvar), lam=1e-4,
        )
        assert float(dis.data) <= 0.0
        kl = loop_kl_gaussian_to_standard(mu, logvar)
        assert abs(-float(dis.data) - kl) < 1e-10

    def test_dis_zero_only_at_standard_posterior(self):
        mu = Tensor(np.zeros((2, 4)))
        logvar = Tensor(np.zeros((2, 4)))
        _, _, dis = loss_gen(
            Tensor(np.zeros((2, 1, 1, 1))), np.zeros((2, 1, 1, 1)), mu, logvar, 0.0
        )
        assert float(dis.data) == 0.0

    def test_negative_lambda_rejected(self):
        x = Tensor(np.zeros((1, 1, 1, 1)))
        with pytest.raises(ConfigError):
            loss_gen(x, x.data, Tensor(np.zeros((1, 1))), Tensor(np.zeros((1, 1))), -0.1)

    def test_lambda_zero_is_pure_reconstruction(self):
        rng = np.random.default_rng(4)
        recon = Tensor(rng.uniform(size=(2, 1, 2, 2)))
        target = rng.uniform(size=(2, 1, 2, 2))
        mu = Tensor(rng.normal(size=(2, 3)))
        logvar = Tensor(rng.normal(size=(2, 3)))
        total, rec, _ = loss_gen(recon, target, mu, logvar, lam=0.0)
        assert float(total.data) == float(rec.data)

    def test_rec_matches_loop(self):
        rng = np.random.default_rng(5)
        recon = rng.uniform(size=(3, 2, 2, 2))
        target = rng.uniform(size=(3, 2, 2, 2))
        _, rec, _ = loss_gen(Tensor(recon), target, Tensor(np.zeros((3, 1))),
                             Tensor(np.zeros((3, 1))), 0.0)
        assert abs(float(rec.data) - loop_rec_loss(recon, target)) < 1e-12

    def test_gradients_flow_through_both_terms(self):
        rng = np.random.default_rng(6)
        target = rng.uniform(size=(2, 1, 2, 2))
        mu0 = rng.normal(size=(2, 3))

        def loss_at(m):
            total, _, _ = loss_gen(
                Tensor(np.full((2, 1, 2, 2), 0.3)), target,
                Tensor(m, requires_grad=True), Tensor(np.zeros((2, 3))), 0.5,
            )
            return float(total.data)

        mu = Tensor(mu0.copy(), requires_grad=True)
        total, _, _ = loss_gen(
            Tensor(np.full((2, 1, 2, 2), 0.3)), target, mu, Tensor(np.zeros((2, 3))), 0.5
        )
        total.backward()
        numeric = central_difference_grad(loss_at, mu0.copy())
        assert rel_error(mu.grad, numeric) < 1e-4


def trained_setup(seed=0, gen_epochs=6, gen_steps=60):
    """Classifier + gated noise bank + generator trained on easy blobs."""
    train, test = synth_blobs(
        K=10, dim=64, n_per_class=60, separation=1.0, noise_std=0.1, seed=seed
    )
    arch = ArchSpec(kind="mlp", input_shape=(1, 8, 8), num_classes=10, hidden=(128,))
    model = init_model(arch, seed=seed)
    cfg = OptimConfig(lr=0.1, batch_size=16)
    for epoch in range(30):
        train_epoch(model, train, cfg, shuffle_seed=epoch)
    bank = init_noise((1, 8, 8), K=10, seed=seed)
    train_noise_bank(bank, model, steps=100)
    gen = init_generator(SPEC_8X8, seed=seed)
    sup_images = np.stack([train.images[train.labels == k][0] for k in range(10)])
    sup_labels = np.arange(10)
    history = []
    for _ in range(gen_epochs):
        train_generator(gen, bank, sup_images, sup_labels, steps=gen_steps,
                        seed=seed, loss_log=history)
    return model, bank, gen, history, train, test


class TestTrainGenerator:
    def test_zero_steps_leaves_params(self):
        gen = init_generator(SPEC_8X8, seed=0)
        bank = init_noise((1, 8, 8), K=10, seed=0)
        before = param_bytes(gen)
        sup = np.random.default_rng(0).uniform(size=(10, 1, 8, 8)).astype(np.float32)
        train_generator(gen, bank, sup, np.arange(10), steps=0)
        assert param_bytes(gen) == before
        assert gen.trained_steps == 0

    def test_missing_class_rejected(self):
        gen = init_generator(SPEC_8X8, seed=0)
        bank = init_noise((1, 8, 8), K=10, seed=0)
        sup = np.zeros((9, 1, 8, 8), dtype=np.float32)
        with pytest.raises(ConfigError):
            train_generator(gen, bank, sup, np.arange(9), steps=1)

    def test_unbalanced_supervision_rejected(self):
        gen = init_generator(SPEC_8X8, seed=0)
        bank = init_noise((1, 8, 8), K=3, seed=0)
        sup = np.zeros((4, 1, 8, 8), dtype=np.float32)
        with pytest.raises(ConfigError):
            train_generator(gen, bank, sup, np.array([0, 1, 2, 2]), steps=1)

    def test_reconstruction_loss_halves(self):
        _, _, _, history, _, _ = trained_setup()
        first_epoch = np.mean([rec for _, rec, _ in history[:60]])
        last_epoch = np.mean([rec for _, rec, _ in history[-60:]])
        assert last_epoch < 0.5 * first_epoch

    def test_bank_and_inputs_untouched(self):
        gen = init_generator(SPEC_8X8, seed=0)
        bank = init_noise((1, 8, 8), K=10, seed=0)
        noises_before = bank.noises.copy()
        sup = np.random.default_rng(0).uniform(size=(10, 1, 8, 8)).astype(np.float32)
        train_generator(gen, bank, sup, np.arange(10), steps=5)
        np.testing.assert_array_equal(bank.noises, noises_before)
        assert gen.trained_steps == 5

    def test_rotation_consumes_all_b_targets(self):
        # with B=2, steps alternate targets; 2 steps with swapped targets
        # land on different parameters than 2 steps on one fixed target
        bank = init_noise((1, 8, 8), K=2, seed=0)
        rng = np.random.default_rng(1)
        sup4 = rng.uniform(size=(4, 1, 8, 8)).astype(np.float32)
        labels4 = np.array([0, 0, 1, 1])
        gen_a = init_generator(GeneratorSpec(input_shape=(1, 8, 8), channels=(8,), latent=8), seed=0)
        train_generator(gen_a, bank, sup4, labels4, steps=2, seed=3)
        gen_b = init_generator(GeneratorSpec(input_shape=(1, 8, 8), channels=(8,), latent=8), seed=0)
        train_generator(gen_b, bank, sup4[[0, 2]], np.array([0, 1]), steps=2, seed=3)
        assert param_bytes(gen_a) != param_bytes(gen_b)


class TestGenerateProxies:
    def test_count_and_labels(self):
        gen = init_generator(SPEC_8X8, seed=0)
        bank = init_noise((1, 8, 8), K=10, seed=0)
        proxies, labels = generate_proxies(bank, gen)
        assert proxies.shape == (10, 1, 8, 8)
        assert list(labels) == list(range(10))

    def test_deterministic_mean_latent(self):
        gen = init_generator(SPEC_8X8, seed=0)
        bank = init_noise((1, 8, 8), K=10, seed=0)
        a, _ = generate_proxies(bank, gen)
        b, _ = generate_proxies(bank, gen)
        assert a.tobytes() == b.tobytes()

    def test_trained_proxies_classified_as_own_class(self):
        model, bank, gen, _, _, _ = trained_setup()
        proxies, labels = generate_proxies(bank, gen)
        pred = predict(model, proxies)
        assert int(np.sum(pred == labels)) >= 9
