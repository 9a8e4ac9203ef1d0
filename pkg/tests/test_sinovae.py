"""SinoVAE: latent contracts, closed-form losses, reparameterization, training."""

import numpy as np
import pytest

from sinostd.grid import GridError, Tensor, finite_diff_check
from sinostd.physics import sobel_t
from sinostd.projection import Geometry, forward_project, random_ellipse_phantom
from sinostd.sinovae import (LatentCode, SinoVae, VaeTrainConfig, VaeWeights,
                             kl_loss, load_vae, perceptual_edge_distance,
                             reparameterize, save_vae, train_vae, vae_loss)


@pytest.fixture(scope="module")
def small_dataset():
    geometry = Geometry(32, 32)
    sinos = [forward_project(random_ellipse_phantom(32, seed=i), geometry).values
             for i in range(12)]
    return np.stack(sinos)


@pytest.fixture
def model():
    return SinoVae(32, 32, seed=5)


class TestReparameterize:
    def test_zero_eps_returns_mu(self):
        mu = Tensor(np.array([1.0, -2.0, 3.0]))
        sigma = Tensor(np.array([0.5, 1.0, 2.0]))
        assert np.array_equal(reparameterize(mu, sigma, np.zeros(3)).data, mu.data)

    def test_zero_sigma_returns_mu(self):
        mu = Tensor(np.array([1.0, -2.0]))
        z = reparameterize(mu, Tensor(np.zeros(2)), np.ones(2))
        assert np.array_equal(z.data, mu.data)

    def test_monte_carlo_moments(self):
        rng = np.random.default_rng(0)
        mu_val, sigma_val = 0.7, 1.4
        draws = 100000
        eps = rng.standard_normal(draws).astype(np.float32)
        z = reparameterize(Tensor(np.full(draws, mu_val, dtype=np.float32)),
                           Tensor(np.full(draws, sigma_val, dtype=np.float32)), eps)
        assert abs(float(z.data.mean()) - mu_val) < 0.02 * max(1.0, abs(mu_val))
        assert abs(float(z.data.var()) - sigma_val ** 2) < 0.02 * sigma_val ** 2

    def test_shape_mismatch(self):
        with pytest.raises(GridError):
            reparameterize(Tensor(np.zeros(2)), Tensor(np.ones(3)), np.zeros(2))


class TestKlLoss:
    def test_standard_normal_is_zero(self):
        assert kl_loss(Tensor(np.zeros(16)), Tensor(np.ones(16))).item() == 0.0

    def test_unit_mean_is_half(self):
        assert np.isclose(kl_loss(Tensor(np.ones(16)), Tensor(np.ones(16))).item(), 0.5)

    def test_nonnegative_random(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            mu = Tensor(rng.normal(size=8).astype(np.float32))
            sigma = Tensor(np.abs(rng.normal(1.0, 0.5, size=8)).astype(np.float32) + 0.1)
            assert kl_loss(mu, sigma).item() >= 0.0

    def test_monte_carlo_agreement(self):
        """KL(q||N(0,1)) via log-density sampling matches the closed form."""
        rng = np.random.default_rng(2)
        mu, sigma = 0.6, 1.7
        z = mu + sigma * rng.standard_normal(600000)
        log_q = -0.5 * ((z - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * np.log(2 * np.pi)
        log_p = -0.5 * z ** 2 - 0.5 * np.log(2 * np.pi)
        mc = float(np.mean(log_q - log_p))
        closed = kl_loss(Tensor(np.array([mu])), Tensor(np.array([sigma]))).item()
        assert abs(mc - closed) < 0.01 * closed

    def test_gradient(self):
        rng = np.random.default_rng(3)
        rep = finite_diff_check(lambda m, s: kl_loss(m, s),
                                [rng.normal(size=6), np.abs(rng.normal(size=6)) + 0.5])
        assert rep.max_rel_error < 1e-4


class TestModelContracts:
    def test_latent_shape_is_input_over_8(self, model):
        x = np.random.default_rng(0).normal(size=(2, 32, 32)).astype(np.float32)
        code = model.encode(x, rng=np.random.default_rng(1))
        assert code.z.shape == (2, 4, 4, 4)
        assert code.partition == (3, 1)
        assert np.all(code.sigma.data > 0)

    def test_same_eps_same_z(self, model):
        x = np.random.default_rng(0).normal(size=(1, 32, 32)).astype(np.float32)
        eps = np.random.default_rng(2).standard_normal((1, 4, 4, 4)).astype(np.float32)
        a = model.encode(x, eps=eps)
        b = model.encode(x, eps=eps)
        assert np.array_equal(a.z.data, b.z.data)

    def test_decode_restores_input_shape(self, model):
        x = np.random.default_rng(0).normal(size=(3, 32, 32)).astype(np.float32)
        code = model.encode(x, rng=np.random.default_rng(1))
        recon = model.decode_global_t(code.z)
        assert recon.shape == (3, 1, 32, 32)
        assert np.all(np.isfinite(recon.data))
        hf = model.decode_high_freq_t(code)
        assert hf.shape == (3, 1, 32, 32)
        assert np.all(np.isfinite(hf.data))

    def test_untrained_decode_finite_on_random_latents(self, model):
        z = Tensor(np.random.default_rng(5).normal(size=(2, 4, 4, 4)).astype(np.float32))
        assert np.all(np.isfinite(model.decode_global_t(z).data))

    def test_discriminator_grid_smaller_than_input(self, model):
        score = model.discriminate(np.zeros((32, 32), dtype=np.float32))
        assert score.shape == (1, 1, 8, 8)

    def test_input_size_checked(self, model):
        with pytest.raises(GridError, match="expected input"):
            model.encode(np.zeros((16, 16), dtype=np.float32))

    def test_grid_must_divide_by_8(self):
        with pytest.raises(GridError, match="divisible"):
            SinoVae(30, 32)

    @pytest.mark.parametrize("size", [16, 32, 64])
    def test_round_trip_shapes_across_sizes(self, size):
        m = SinoVae(size, size, seed=1)
        x = np.random.default_rng(0).normal(size=(1, size, size)).astype(np.float32)
        code = m.encode(x, rng=np.random.default_rng(1))
        recon = m.decode_global_t(code.z)
        assert recon.shape == (1, 1, size, size)
        assert np.all(np.isfinite(recon.data))

    def test_latent_partition_views(self, model):
        x = np.random.default_rng(0).normal(size=(1, 32, 32)).astype(np.float32)
        code = model.encode(x, rng=np.random.default_rng(1))
        assert code.full().shape == (1, 3, 4, 4)
        assert code.high().shape == (1, 1, 4, 4)


class TestVaeLoss:
    def test_perfect_reconstruction_zero_total(self, model):
        """Constant sinogram, recon == clean, hf == its own sobel target,
        standard-normal posterior, adversarial off: every term vanishes."""
        clean = Tensor(np.full((1, 1, 32, 32), 2.0, dtype=np.float32))
        zeros = np.zeros((1, 4, 4, 4), dtype=np.float32)
        code = LatentCode(mu=Tensor(zeros), sigma=Tensor(np.ones_like(zeros)),
                          z=Tensor(zeros), partition=(3, 1))
        hf = sobel_t(clean).detach()
        weights = VaeWeights(adversarial=0.0, sino=1.0)
        grid = np.zeros((1, 32, 32), dtype=bool)  # nothing penalized
        total, report = vae_loss(model, clean, clean, hf, code, weights,
                                 penalty_grid=grid, n_nonknown=24)
        assert report.rec == 0.0
        assert report.per == 0.0
        assert report.kl == 0.0
        assert report.adv == 0.0
        assert report.edge == 0.0
        assert report.sino_physics == 0.0
        assert total.item() == 0.0

    def test_kl_weight_linearity(self, model):
        rng = np.random.default_rng(4)
        clean = Tensor(rng.normal(size=(1, 1, 32, 32)).astype(np.float32))
        eps = rng.standard_normal((1, 4, 4, 4)).astype(np.float32)
        code = model.encode_t(clean, eps)
        recon = model.decode_global_t(code.z)
        hf = model.decode_high_freq_t(code)
        w1 = VaeWeights(kl=1e-4, adversarial=0.0)
        w2 = VaeWeights(kl=2e-4, adversarial=0.0)
        _, r1 = vae_loss(model, clean, recon, hf, code, w1)
        _, r2 = vae_loss(model, clean, recon, hf, code, w2)
        assert np.isclose(r2.kl, r1.kl)
        assert np.isclose(r2.total - r1.total, 1e-4 * r1.kl, rtol=1e-4)

    def test_adv_zero_contributes_nothing(self, model):
        rng = np.random.default_rng(5)
        clean = Tensor(rng.normal(size=(1, 1, 32, 32)).astype(np.float32))
        code = model.encode_t(clean, rng.standard_normal((1, 4, 4, 4)).astype(np.float32))
        recon = model.decode_global_t(code.z)
        hf = model.decode_high_freq_t(code)
        _, report = vae_loss(model, clean, recon, hf, code, VaeWeights(adversarial=0.0))
        assert report.adv == 0.0
        assert np.isclose(report.total,
                          report.rec + 0.5 * report.per + 1e-4 * report.kl
                          + 1.0 * report.edge + 0.1 * report.sino_physics, rtol=1e-5)

    def test_gradients_on_sampled_parameters(self, model):
        """Finite-difference spot check of d(total)/d(param) on 5 parameters."""
        rng = np.random.default_rng(6)
        clean = rng.normal(size=(1, 1, 16, 16)).astype(np.float64) * 0.2 + 0.5
        small = SinoVae(16, 16, seed=3)
        eps = rng.standard_normal((1, 4, 2, 2))
        weights = VaeWeights(adversarial=0.05, sino=0.1)
        grid = rng.random((1, 16, 16)) > 0.6

        def total_of(name, value):
            old = small.params[name]
            small.params[name] = value
            try:
                code = small.encode_t(Tensor(clean), eps)
                recon = small.decode_global_t(code.z)
                hf = small.decode_high_freq_t(code)
                total, _ = vae_loss(small, Tensor(clean), recon, hf, code, weights,
                                    penalty_grid=grid, n_nonknown=12,
                                    mass_floor=0.05)
                return total
            finally:
                small.params[name] = old

        names = list(small.params)
        picks = [names[i] for i in np.random.default_rng(7).choice(len(names), 5,
                                                                   replace=False)]
        for name in picks:
            base = small.params[name].data.astype(np.float64)
            rep = finite_diff_check(lambda v: total_of(name, v), [base],
                                    max_probes_per_input=12, seed=1)
            assert rep.max_rel_error < 1e-4, (name, rep.max_rel_error)


class TestPerceptualDistance:
    def test_identical_inputs_zero(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 16, 16)).astype(np.float32))
        assert perceptual_edge_distance(x, x).item() == 0.0

    def test_positive_for_different_edges(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.normal(size=(1, 1, 16, 16)).astype(np.float32))
        b = Tensor(rng.normal(size=(1, 1, 16, 16)).astype(np.float32))
        assert perceptual_edge_distance(a, b).item() > 0.0


class TestTraining:
    def test_zero_epochs_leaves_model_unchanged(self, small_dataset):
        m = SinoVae(32, 32, seed=9)
        before = {k: v.data.copy() for k, v in m.params.items()}
        m, trace = train_vae(m, small_dataset, VaeTrainConfig(epochs=0, seed=1))
        assert trace == []
        for k, v in m.params.items():
            assert np.array_equal(before[k], v.data)

    def test_seed_determinism(self, small_dataset):
        cfg = VaeTrainConfig(learning_rate=1e-3, epochs=2, batch_size=4, seed=7)
        m1, t1 = train_vae(SinoVae(32, 32, seed=9), small_dataset, cfg)
        m2, t2 = train_vae(SinoVae(32, 32, seed=9), small_dataset, cfg)
        for k in m1.params:
            assert np.array_equal(m1.params[k].data, m2.params[k].data), k
        assert t1 == t2

    def test_trace_rows_match_epochs(self, small_dataset):
        cfg = VaeTrainConfig(learning_rate=1e-3, epochs=3, batch_size=4, seed=1,
                             weights=VaeWeights(adversarial=0.0, sino=0.0))
        _, trace = train_vae(SinoVae(32, 32, seed=2), small_dataset, cfg)
        assert len(trace) == 3
        assert set(trace[0]) == {"epoch", "rec", "per", "kl", "adv", "edge", "sino", "total"}

    def test_loss_decreases_on_short_run(self, small_dataset):
        cfg = VaeTrainConfig(learning_rate=2e-3, epochs=8, batch_size=4, seed=3,
                             weights=VaeWeights(adversarial=0.0))
        _, trace = train_vae(SinoVae(32, 32, seed=4), small_dataset, cfg)
        assert trace[-1]["rec"] < trace[0]["rec"]

    def test_empty_dataset_rejected(self):
        with pytest.raises(GridError, match="nonempty"):
            train_vae(SinoVae(32, 32), np.zeros((0, 32, 32), dtype=np.float32),
                      VaeTrainConfig())


class TestPersistence:
    def test_round_trip(self, tmp_path, small_dataset):
        cfg = VaeTrainConfig(learning_rate=1e-3, epochs=1, batch_size=4, seed=3)
        m, _ = train_vae(SinoVae(32, 32, seed=8), small_dataset, cfg)
        path = tmp_path / "vae.sfwt"
        save_vae(path, m)
        loaded = load_vae(path)
        assert loaded.data_scale == m.data_scale
        assert loaded.partition == m.partition
        for k in m.params:
            assert np.array_equal(loaded.params[k].data, m.params[k].data)
        x = small_dataset[:1]
        a = m.encode(x, eps=np.zeros((1, 4, 4, 4), dtype=np.float32))
        b = loaded.encode(x, eps=np.zeros((1, 4, 4, 4), dtype=np.float32))
        assert np.array_equal(a.mu.data, b.mu.data)

    def test_missing_sidecar_rejected(self, tmp_path):
        m = SinoVae(32, 32)
        path = tmp_path / "v.sfwt"
        save_vae(path, m)
        (tmp_path / "v.sfwt.json").unlink()
        from sinostd.grid import CheckpointError
        with pytest.raises(CheckpointError, match="sidecar"):
            load_vae(path)
