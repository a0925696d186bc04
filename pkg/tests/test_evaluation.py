"""Measurement protocols: KL perception, timing, storage, sweep harness."""

import csv
import json
import math
import time

import numpy as np
import pytest

from geniu.artifacts import save_generator, save_noise_bank
from geniu.classifier import ArchSpec, init_model
from geniu.data import ImbalanceSpec, build_imbalanced, dataset_nbytes, synth_blobs
from geniu.errors import ArtifactError, ConfigError, SweepCellError
from geniu.evaluation import (
    VARY_RATES,
    EvalReport,
    aggregate_rows,
    draw_majority_samples,
    kl_divergence,
    kl_perception,
    resolve_rate,
    run_cell,
    storage_report,
    sweep,
    time_unlearning,
)
from geniu.generator import GeneratorSpec, init_generator
from geniu.noise import init_noise
from geniu.tensor import Tensor
from geniu.training import TrainPhaseConfig

K = 10
ARCH = ArchSpec(kind="mlp", input_shape=(1, 8, 8), num_classes=K, hidden=(128,))
GSPEC = GeneratorSpec(input_shape=(1, 8, 8), channels=(8, 16), latent=16)


def desk_config(seed=0, **kw):
    base = dict(arch=ARCH, gen=GSPEC, epochs=50, noise_steps=60, gen_steps=60,
                lr_classifier=0.1, batch_size=16, top_b=3, seed=seed)
    base.update(kw)
    return TrainPhaseConfig(**base)


def two_logit_model(scale):
    """Linear 2-feature 2-class model: input (1,0) -> softmax(scale, 0),
    input (0,0) -> uniform."""
    arch = ArchSpec(kind="mlp", input_shape=(1, 1, 2), num_classes=2)
    model = init_model(arch, seed=0)
    w = np.zeros((2, 2), dtype=np.float32)
    w[0, 0] = scale
    model.params["fc0.w"] = Tensor(w, requires_grad=True)
    model.params["fc0.b"] = Tensor(np.zeros(2, dtype=np.float32), requires_grad=True)
    return model


class TestKlDivergence:
    def test_identity_is_zero(self):
        assert kl_divergence([0.3, 0.7], [0.3, 0.7]) == pytest.approx(0.0, abs=1e-12)

    def test_hand_value(self):
        expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
        got = kl_divergence([0.5, 0.5], [0.9, 0.1])
        assert got == pytest.approx(expected, abs=1e-9)
        assert got == pytest.approx(0.5108, abs=5e-5)

    def test_zero_entry_is_finite(self):
        assert np.isfinite(kl_divergence([1.0, 0.0], [0.5, 0.5]))
        assert np.isfinite(kl_divergence([0.5, 0.5], [1.0, 0.0]))

    def test_nonnegative_random(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            p = rng.dirichlet(np.ones(6))
            q = rng.dirichlet(np.ones(6))
            assert kl_divergence(p, q) >= 0.0


class TestKlPerception:
    def test_matched_model_gives_zero(self):
        model = two_logit_model(0.0)  # uniform response to everything
        maj = np.zeros((4, 1, 1, 2), dtype=np.float32)
        noises = np.ones((3, 1, 1, 2), dtype=np.float32)
        assert kl_perception(model, maj, noises) == pytest.approx(0.0, abs=1e-9)

    def test_hand_case_through_model(self):
        model = two_logit_model(math.log(9.0))  # (1,0) -> (0.9, 0.1)
        maj = np.zeros((1, 1, 1, 2), dtype=np.float32)
        maj[0, 0, 0, 0] = 1.0
        noise = np.zeros((1, 1, 1, 2), dtype=np.float32)  # -> (0.5, 0.5)
        expected = 0.5 * math.log(0.5 / 0.9) + 0.5 * math.log(0.5 / 0.1)
        assert kl_perception(model, maj, noise) == pytest.approx(expected, abs=1e-6)

    def test_sums_over_noises(self):
        model = two_logit_model(1.7)
        rng = np.random.default_rng(3)
        maj = rng.normal(size=(5, 1, 1, 2)).astype(np.float32)
        noises = rng.normal(size=(4, 1, 1, 2)).astype(np.float32)
        total = kl_perception(model, maj, noises)
        parts = sum(kl_perception(model, maj, noises[i : i + 1]) for i in range(4))
        assert total == pytest.approx(parts, abs=1e-12)

    def test_empty_inputs_rejected(self):
        model = two_logit_model(1.0)
        empty = np.zeros((0, 1, 1, 2), dtype=np.float32)
        one = np.zeros((1, 1, 1, 2), dtype=np.float32)
        with pytest.raises(ConfigError):
            kl_perception(model, empty, one)
        with pytest.raises(ConfigError):
            kl_perception(model, one, empty)

    def test_does_not_mutate_inputs(self):
        model = two_logit_model(2.0)
        rng = np.random.default_rng(5)
        maj = rng.normal(size=(3, 1, 1, 2)).astype(np.float32)
        noises = rng.normal(size=(2, 1, 1, 2)).astype(np.float32)
        maj_copy, noise_copy = maj.copy(), noises.copy()
        kl_perception(model, maj, noises)
        assert np.array_equal(maj, maj_copy)
        assert np.array_equal(noises, noise_copy)


@pytest.fixture(scope="module")
def imb():
    train, _ = synth_blobs(K=K, dim=64, n_per_class=100, separation=1.0,
                           noise_std=0.10, seed=0)
    return build_imbalanced(
        train, ImbalanceSpec(majority=frozenset({2}), rate=0.1), seed=0)


class TestDrawMajoritySamples:
    def test_only_majority_labels(self, imb):
        images = draw_majority_samples(imb, {2}, count=50, seed=0)
        pool = imb.images[imb.labels == 2].reshape(-1, 64)
        flat = images.reshape(-1, 64)
        for row in flat:
            assert (pool == row).all(axis=1).any()

    def test_count_cap_and_take_all(self, imb):
        assert draw_majority_samples(imb, {2}, count=7, seed=0).shape[0] == 7
        # only 100 majority samples exist, a 256 request takes them all
        assert draw_majority_samples(imb, {2}, count=256, seed=0).shape[0] == 100

    def test_seeded_determinism(self, imb):
        a = draw_majority_samples(imb, {2}, count=9, seed=4)
        b = draw_majority_samples(imb, {2}, count=9, seed=4)
        c = draw_majority_samples(imb, {2}, count=9, seed=5)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_empty_majority_rejected(self, imb):
        with pytest.raises(ConfigError):
            draw_majority_samples(imb, set(), count=4, seed=0)


class TestTimeUnlearning:
    def test_noop_under_five_ms(self):
        assert time_unlearning(lambda: None) < 5.0

    def test_sleep_is_measured(self):
        assert time_unlearning(lambda: time.sleep(0.02)) >= 15.0


class TestStorageReport:
    @pytest.fixture()
    def bundles(self, tmp_path):
        bank = init_noise((1, 8, 8), K=K, seed=0)
        gen = init_generator(GSPEC, seed=0)
        save_noise_bank(tmp_path / "nb", bank)
        save_generator(tmp_path / "gen", gen)
        return tmp_path

    def test_ratio_formula(self, bundles):
        rep = storage_report(bundles / "nb", bundles / "gen", dataset_bytes=10_000_000)
        assert rep["artifact_bytes"] == rep["noise_bank_bytes"] + rep["generator_bytes"]
        assert rep["ratio"] == pytest.approx(rep["artifact_bytes"] / 10_000_000)

    def test_missing_bundle_rejected(self, bundles):
        with pytest.raises(ArtifactError):
            storage_report(bundles / "absent", bundles / "gen", 1000)

    def test_empty_bank_rejected(self, bundles):
        manifest = bundles / "nb" / "manifest.json"
        payload = json.loads(manifest.read_text())
        payload["num_classes"] = 0
        manifest.write_text(json.dumps(payload))
        with pytest.raises(ArtifactError):
            storage_report(bundles / "nb", bundles / "gen", 1000)

    def test_nonpositive_dataset_rejected(self, bundles):
        with pytest.raises(ConfigError):
            storage_report(bundles / "nb", bundles / "gen", 0)


class TestResolveRate:
    def test_float_passthrough(self):
        assert resolve_rate(0.25, K) == 0.25

    def test_vary_returns_vector(self):
        assert resolve_rate("vary", 10) == VARY_RATES

    def test_vary_needs_ten_classes(self):
        with pytest.raises(ConfigError):
            resolve_rate("vary", 7)

    def test_unknown_token_rejected(self):
        with pytest.raises(ConfigError):
            resolve_rate("half", 10)


@pytest.fixture(scope="module")
def cell_out(tmp_path_factory):
    """One real desk-scale cell, shared by the report-shape tests."""
    train, test = synth_blobs(K=K, dim=64, n_per_class=100, separation=1.0,
                              noise_std=0.10, seed=0)
    out = tmp_path_factory.mktemp("cell")
    report = run_cell(train, test, desk_config(seed=0), rate=0.1, forget_class=0,
                      cell_dir=out, rounds=200, unlearn_lr=1e-3)
    return report, out


class TestRunCell:
    def test_unlearning_worked(self, cell_out):
        report, _ = cell_out
        assert report.acc_forget <= 0.05
        assert report.acc_retain >= 0.8

    def test_imbalance_signature_recorded(self, cell_out):
        report, _ = cell_out
        assert report.orig_acc_majority > report.orig_acc_minority

    def test_artifacts_on_disk(self, cell_out):
        _, out = cell_out
        for name in ("model", "noise_bank", "generator", "model_unlearned"):
            assert (out / name / "manifest.json").is_file()
        for name in ("phase_log.csv", "trajectory.csv", "report.json"):
            assert (out / name).is_file()

    def test_report_json_echoes_config(self, cell_out):
        report, out = cell_out
        payload = json.loads((out / "report.json").read_text())
        assert payload["config_echo"]["rate"] == "0.1"
        assert payload["config_echo"]["forget_class"] == 0
        assert payload["acc_forget"] == report.acc_forget

    def test_storage_below_training_data(self, cell_out):
        report, _ = cell_out
        assert report.storage_ratio < 1.0

    def test_kl_positive(self, cell_out):
        report, _ = cell_out
        assert report.kl_perception > 0.0

    def test_timing_positive(self, cell_out):
        report, _ = cell_out
        assert report.unlearn_ms > 0.0


class TestEvalReportValidation:
    def _kwargs(self, **kw):
        base = dict(per_class=(1.0,) * K, acc_retain=0.9, acc_retain_macro=0.9,
                    acc_forget=0.0, orig_acc_majority=1.0, orig_acc_minority=0.9,
                    kl_perception=1.0, unlearn_ms=5.0, noise_bank_bytes=10,
                    generator_bytes=10, dataset_bytes=100, storage_ratio=0.2)
        base.update(kw)
        return base

    def test_valid_passes(self):
        EvalReport(**self._kwargs())

    def test_accuracy_range_enforced(self):
        with pytest.raises(ConfigError):
            EvalReport(**self._kwargs(acc_retain=1.2))

    def test_sizes_positive(self):
        with pytest.raises(ConfigError):
            EvalReport(**self._kwargs(generator_bytes=0))

    def test_negative_kl_rejected(self):
        with pytest.raises(ConfigError):
            EvalReport(**self._kwargs(kl_perception=-0.1))


def fake_cell(rate, forget_class, seed, cell_dir, acc=0.9):
    """Deterministic synthetic report for grid-mechanics tests."""
    base = 0.01 * forget_class + 0.001 * seed
    return EvalReport(
        per_class=(1.0,) * K, acc_retain=acc - base, acc_retain_macro=acc - base,
        acc_forget=base, orig_acc_majority=0.99, orig_acc_minority=0.9 - base,
        kl_perception=1.0 + base, unlearn_ms=1.0, noise_bank_bytes=10,
        generator_bytes=20, dataset_bytes=100, storage_ratio=0.3,
        config_echo={"rate": str(rate), "forget_class": forget_class, "seed": seed},
        seed=seed)


class TestSweepMechanics:
    def test_row_count_is_grid_size(self, tmp_path):
        sweep(fake_cell, rates=[0.1, 0.4, "vary"], forget_classes=[0, 1],
              seeds=[0, 1], out_dir=tmp_path)
        with open(tmp_path / "sweep.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3 * 2 * 2

    def test_json_aggregates_match_rows(self, tmp_path):
        sweep(fake_cell, rates=[0.1, 0.4], forget_classes=[0, 1, 2], seeds=[0],
              out_dir=tmp_path)
        payload = json.loads((tmp_path / "sweep.json").read_text())
        cells = payload["cells"]
        for agg in payload["aggregates"]:
            members = [c for c in cells
                       if c["rate"] == agg["rate"] and c["seed"] == agg["seed"]]
            assert agg["n_forget_choices"] == len(members)
            assert agg["mean_acc_retain"] == pytest.approx(
                np.mean([m["acc_retain"] for m in members]), abs=1e-12)
            assert agg["mean_acc_forget"] == pytest.approx(
                np.mean([m["acc_forget"] for m in members]), abs=1e-12)
            assert agg["mean_orig_gap"] == pytest.approx(
                np.mean([m["orig_acc_majority"] - m["orig_acc_minority"]
                         for m in members]), abs=1e-12)

    def test_cell_failure_names_the_cell(self, tmp_path):
        def exploding(rate, forget_class, seed, cell_dir):
            if forget_class == 1:
                raise ValueError("boom")
            return fake_cell(rate, forget_class, seed, cell_dir)

        with pytest.raises(SweepCellError, match="forget=1") as info:
            sweep(exploding, rates=[0.1], forget_classes=[0, 1], seeds=[7],
                  out_dir=tmp_path)
        assert "seed=7" in str(info.value)
        assert isinstance(info.value.__cause__, ValueError)

    def test_cell_dirs_unique_per_cell(self, tmp_path):
        seen = []

        def recording(rate, forget_class, seed, cell_dir):
            seen.append(str(cell_dir))
            return fake_cell(rate, forget_class, seed, cell_dir)

        sweep(recording, rates=[0.1, "vary"], forget_classes=[3], seeds=[0, 1],
              out_dir=tmp_path)
        assert len(seen) == len(set(seen)) == 4

    def test_aggregate_rows_empty(self):
        assert aggregate_rows([]) == []


class TestSweepSingleCellConsistency:
    def test_single_cell_sweep_equals_direct_run(self, tmp_path):
        train, test = synth_blobs(K=K, dim=64, n_per_class=100, separation=1.0,
                                  noise_std=0.10, seed=1)

        def cell(rate, forget_class, seed, cell_dir):
            return run_cell(train, test, desk_config(seed=seed), rate=rate,
                            forget_class=forget_class, cell_dir=cell_dir,
                            rounds=200, unlearn_lr=1e-3)

        reports = sweep(cell, rates=[0.1], forget_classes=[4], seeds=[1],
                        out_dir=tmp_path / "grid")
        direct = run_cell(train, test, desk_config(seed=1), rate=0.1,
                          forget_class=4, cell_dir=tmp_path / "direct",
                          rounds=200, unlearn_lr=1e-3)
        swept = reports[0]
        assert swept.acc_retain == direct.acc_retain
        assert swept.acc_forget == direct.acc_forget
        assert swept.per_class == direct.per_class
        assert swept.kl_perception == direct.kl_perception
        assert swept.storage_ratio == direct.storage_ratio
