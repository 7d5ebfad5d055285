import math

import numpy as np
import pytest
import scipy.stats

from vfpg import autodiff as ad
from vfpg.lattice import LatticeSpec
from vfpg.model import (GmmSequence, SIGMA_FLOOR, encode_latent,
                        gmm_sequence_log_prob, init_model, load_checkpoint,
                        path_log_prob, sample_mixture_stamp, sample_paths,
                        save_checkpoint, unroll)


def make_lat(n_tau=32, **kwargs):
    base = dict(n_tau=n_tau, total_time=0.5, x_start=0.0, x_end=1.0)
    base.update(kwargs)
    return LatticeSpec(**base)


def zeroed_model(n_tau=8, hidden_size=6, n_components=3):
    model = init_model(np.random.default_rng(0), n_tau=n_tau,
                       hidden_size=hidden_size, n_components=n_components)
    for _, t in model.parameters():
        t.value[...] = 0.0
    return model


class TestEncodeLatent:
    def test_zero_parameters(self):
        model = zeroed_model()
        gmm = encode_latent(model, np.zeros((2, 2)))
        assert np.allclose(gmm.weights, 1.0 / 3.0, atol=1e-15)
        assert np.allclose(gmm.means, 0.0, atol=1e-15)
        assert np.allclose(gmm.stds, math.log(2.0) + SIGMA_FLOOR, atol=1e-15)

    def test_identical_rows_identical_outputs(self):
        model = init_model(np.random.default_rng(1), n_tau=8, hidden_size=8,
                           n_components=2)
        z = np.array([[0.4, -1.2], [0.4, -1.2], [0.9, 0.1]])
        gmm = encode_latent(model, z)
        assert np.array_equal(gmm.means[0], gmm.means[1])
        assert not np.array_equal(gmm.means[0], gmm.means[2])

    def test_continuity_in_latent(self):
        model = init_model(np.random.default_rng(2), n_tau=8, hidden_size=8,
                           n_components=2)
        z0 = np.array([[0.3, -0.7]])
        base = encode_latent(model, z0)
        norms = []
        for delta in (1e-2, 1e-4, 1e-6):
            pert = encode_latent(model, z0 + delta)
            norms.append(max(
                np.max(np.abs(pert.weights - base.weights)),
                np.max(np.abs(pert.means - base.means)),
                np.max(np.abs(pert.stds - base.stds)),
            ))
        assert norms[0] > norms[1] > norms[2]
        assert norms[2] < 1e-5

    def test_simplex_and_floor_invariants(self):
        model = init_model(np.random.default_rng(3), n_tau=16, hidden_size=16,
                           n_components=5)
        gmm = encode_latent(model, np.random.default_rng(4).standard_normal((10, 2)))
        assert np.max(np.abs(gmm.weights.sum(axis=-1) - 1.0)) < 1e-12
        assert np.all(gmm.stds >= SIGMA_FLOOR * (1 - 1e-12))


class TestSamplePaths:
    def test_near_deterministic_at_sigma_floor(self):
        # force std preactivation very negative: sigma -> floor
        model = zeroed_model(n_tau=8, n_components=1)
        model.head.bias.value[2] = -40.0
        lat = make_lat(n_tau=8)
        z = np.zeros((64, 2))
        batch = sample_paths(model, z, lat, np.random.default_rng(5))
        assert np.max(np.abs(batch.positions)) < 1e-3  # mu = 0 everywhere

    def test_log_q_recompute_matches(self):
        model = init_model(np.random.default_rng(6), n_tau=16, hidden_size=12,
                           n_components=4)
        lat = make_lat(n_tau=16)
        z = np.random.default_rng(7).standard_normal((32, 2))
        batch = sample_paths(model, z, lat, np.random.default_rng(8))
        gmm = encode_latent(model, z)
        again = gmm_sequence_log_prob(gmm, batch.positions)
        assert np.max(np.abs(again - batch.log_q)) < 1e-12

    def test_bit_identical_given_seed(self):
        model = init_model(np.random.default_rng(9), n_tau=8, hidden_size=8,
                           n_components=3)
        lat = make_lat(n_tau=8)
        z = np.random.default_rng(10).standard_normal((16, 2))
        b1 = sample_paths(model, z, lat, np.random.default_rng(11))
        b2 = sample_paths(model, z, lat, np.random.default_rng(11))
        assert np.array_equal(b1.positions, b2.positions)
        assert np.array_equal(b1.log_q, b2.log_q)

    def test_stamp_marginal_against_mixture_cdf(self):
        # 1e5 draws from a fixed two-component mixture vs the closed-form CDF
        w = np.array([0.3, 0.7])
        mu = np.array([-1.0, 0.8])
        sig = np.array([0.4, 1.1])
        rng = np.random.default_rng(12)
        n = 100_000
        samples = sample_mixture_stamp(np.tile(w, (n, 1)), np.tile(mu, (n, 1)),
                                       np.tile(sig, (n, 1)), rng)

        def cdf(x):
            return (w[0] * scipy.stats.norm.cdf(x, mu[0], sig[0])
                    + w[1] * scipy.stats.norm.cdf(x, mu[1], sig[1]))

        stat = scipy.stats.kstest(samples, cdf).statistic
        critical_1pct = 1.6276 / math.sqrt(n)
        assert stat < critical_1pct

    def test_lattice_mismatch_rejected(self):
        model = init_model(np.random.default_rng(13), n_tau=8, hidden_size=8,
                           n_components=2)
        with pytest.raises(ValueError):
            sample_paths(model, np.zeros((4, 2)), make_lat(n_tau=16),
                         np.random.default_rng(0))


class TestPathLogProb:
    def test_matches_stampwise_sum(self):
        model = init_model(np.random.default_rng(14), n_tau=8, hidden_size=8,
                           n_components=3)
        z = np.random.default_rng(15).standard_normal((6, 2))
        lat = make_lat(n_tau=8)
        batch = sample_paths(model, z, lat, np.random.default_rng(16))
        out = path_log_prob(model, z, batch.positions)
        gmm = encode_latent(model, z)
        zsc = (batch.positions[..., None] - gmm.means) / gmm.stds
        comp = (np.log(gmm.weights) - np.log(gmm.stds)
                - 0.5 * np.log(2 * np.pi) - 0.5 * zsc**2)
        per_stamp = scipy.special.logsumexp(comp, axis=-1)
        assert np.max(np.abs(per_stamp.sum(axis=1) - out.value)) < 1e-12

    def test_normalized_over_path_space(self):
        # 3-stamp toy model: tensor-product Gauss-Hermite quadrature of
        # exp(log q) over path space must give 1
        model = init_model(np.random.default_rng(17), n_tau=3, hidden_size=6,
                           n_components=2)
        z = np.array([[0.5, -0.3]])
        gmm = encode_latent(model, z)
        nodes, weights = np.polynomial.hermite.hermgauss(64)
        # full tensor product over the three stamps; per-stamp proposals are
        # scaled to the mixture spread so the rule resolves every component
        grids = []
        logws = []
        for k in range(3):
            w, mu, sig = gmm.weights[0, k], gmm.means[0, k], gmm.stds[0, k]
            c = float((w * mu).sum())
            var = float((w * (sig**2 + mu**2)).sum() - c**2)
            s = 1.2 * math.sqrt(var)
            grids.append(c + math.sqrt(2.0) * s * nodes)
            logws.append(np.log(weights) + nodes**2 + 0.5 * math.log(2.0)
                         + math.log(s))
        xx, yy, zz = np.meshgrid(grids[0], grids[1], grids[2], indexing="ij")
        paths = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
        lq = gmm_sequence_log_prob(
            GmmSequence(weights=np.repeat(gmm.weights, paths.shape[0], axis=0),
                        means=np.repeat(gmm.means, paths.shape[0], axis=0),
                        stds=np.repeat(gmm.stds, paths.shape[0], axis=0)),
            paths)
        lw = (logws[0][:, None, None] + logws[1][None, :, None]
              + logws[2][None, None, :]).ravel()
        total = np.exp(lq + lw).sum()
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_length_mismatch_rejected(self):
        model = init_model(np.random.default_rng(18), n_tau=8, hidden_size=6,
                           n_components=2)
        with pytest.raises(ValueError):
            path_log_prob(model, np.zeros(2), np.zeros(7))

    def test_sampled_entropy_matches_quadrature(self):
        # mean of -log q over samples vs per-stamp differential entropy by
        # quadrature (conditionally independent stamps add up)
        model = init_model(np.random.default_rng(19), n_tau=4, hidden_size=6,
                           n_components=2)
        lat = make_lat(n_tau=4)
        z = np.tile(np.array([[0.2, -0.4]]), (40_000, 1))
        batch = sample_paths(model, z, lat, np.random.default_rng(20))
        sampled = -batch.log_q
        gmm = encode_latent(model, z[:1])
        total_h = 0.0
        xs = np.linspace(-12, 12, 4001)
        for k in range(4):
            w, mu, sig = gmm.weights[0, k], gmm.means[0, k], gmm.stds[0, k]
            dens = np.sum(w * np.exp(-0.5 * ((xs[:, None] - mu) / sig) ** 2)
                          / (sig * np.sqrt(2 * np.pi)), axis=1)
            integrand = np.where(dens > 0, -dens * np.log(np.maximum(dens, 1e-300)),
                                 0.0)
            total_h += np.trapezoid(integrand, xs)
        sem = sampled.std(ddof=1) / math.sqrt(sampled.size)
        assert abs(sampled.mean() - total_h) <= 3.0 * sem


class TestModelParams:
    def test_latent_dim_fixed(self):
        model = init_model(np.random.default_rng(21), n_tau=8, hidden_size=6,
                           n_components=2)
        with pytest.raises(ValueError):
            type(model)(lstm=model.lstm, head=model.head, hidden_size=6,
                        n_components=2, n_tau=8, latent_dim=3)

    def test_feedback_variant_reserved(self):
        with pytest.raises(NotImplementedError):
            init_model(np.random.default_rng(0), n_tau=8, feedback_input=True)

    def test_component_count_positive(self):
        model = init_model(np.random.default_rng(22), n_tau=8, hidden_size=6,
                           n_components=2)
        with pytest.raises(ValueError):
            type(model)(lstm=model.lstm, head=model.head, hidden_size=6,
                        n_components=0, n_tau=8)


class TestCheckpoint:
    def test_roundtrip_bit_identical_forward(self, tmp_path):
        model = init_model(np.random.default_rng(23), n_tau=12, hidden_size=10,
                           n_components=3)
        path = tmp_path / "model.bin"
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        z = np.random.default_rng(24).standard_normal((5, 2))
        a = encode_latent(model, z)
        b = encode_latent(loaded, z)
        assert np.array_equal(a.weights, b.weights)
        assert np.array_equal(a.means, b.means)
        assert np.array_equal(a.stds, b.stds)
        assert loaded.hidden_size == 10 and loaded.n_components == 3
        assert loaded.n_tau == 12 and loaded.latent_dim == 2

    def test_header_is_text(self, tmp_path):
        model = init_model(np.random.default_rng(25), n_tau=4, hidden_size=4,
                           n_components=2)
        path = tmp_path / "model.bin"
        save_checkpoint(model, path)
        head = open(path, "rb").read(200).split(b"\n")
        assert head[0] == b"vfpg-checkpoint 1"
        assert any(line.startswith(b"tensor lstm.input_weights") for line in head)

    def test_rejects_foreign_file(self, tmp_path):
        path = tmp_path / "bogus.bin"
        path.write_bytes(b"something else\nend\n")
        with pytest.raises(ValueError):
            load_checkpoint(path)
