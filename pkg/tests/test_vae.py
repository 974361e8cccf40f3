"""Variational autoencoder tests.

Oracles: a straight-line scalar recomputation of the teacher-forced
decoder (softmax chain by hand), pure-numpy density formulas, the
closed-form KL against Monte Carlo sampling, and finite differences for
the full loss gradient with frozen noise.
"""

import math

import numpy as np
import pytest

from test_lstm import scalar_lstm_step

from vroc import autodiff as ad
from vroc import vae as V
from vroc.autodiff import Tensor, grad_check
from vroc.text import BOS_ID, EOS_ID, PAD_ID, pad_batch


def small_vae(seed=0, vocab_size=9, embed_dim=3, hidden=3, latent=3):
    rng = np.random.default_rng(seed)
    return V.init_vae(rng, vocab_size, embed_dim, hidden, latent)


def zero_tensors(tensors):
    for t in tensors:
        t.data = np.zeros_like(t.data)


class TestEncode:
    def test_zeroed_network_gives_standard_normal_params(self):
        params = small_vae(seed=1)
        zero_tensors(params.encoder.tensors())
        mu, sigma = V.encode(params.encoder, [BOS_ID, 4, 5, EOS_ID])
        np.testing.assert_array_equal(mu.data, np.zeros((1, 3)))
        np.testing.assert_array_equal(sigma.data, np.ones((1, 3)))

    def test_deterministic(self):
        params = small_vae(seed=2)
        ids = [BOS_ID, 4, 5, 6, EOS_ID]
        a = V.encode(params.encoder, ids)
        b = V.encode(params.encoder, ids)
        np.testing.assert_array_equal(a[0].data, b[0].data)
        np.testing.assert_array_equal(a[1].data, b[1].data)

    def test_different_inputs_give_different_mu(self):
        params = small_vae(seed=3)
        rng = np.random.default_rng(33)
        for _ in range(20):
            a = [BOS_ID] + list(rng.integers(4, 9, size=4)) + [EOS_ID]
            b = [BOS_ID] + list(rng.integers(4, 9, size=4)) + [EOS_ID]
            if a == b:
                continue
            mu_a, _ = V.encode(params.encoder, a)
            mu_b, _ = V.encode(params.encoder, b)
            assert not np.allclose(mu_a.data, mu_b.data)

    def test_empty_sequence_rejected(self):
        params = small_vae()
        with pytest.raises(ValueError, match="empty"):
            V.encode(params.encoder, np.zeros((1, 0), dtype=np.intp))

    def test_padded_batch_matches_single_runs(self):
        params = small_vae(seed=4)
        seqs = [[BOS_ID, 4, 5, 6, EOS_ID], [BOS_ID, 7, EOS_ID]]
        ids, mask = pad_batch(seqs)
        mu_batch, sigma_batch = V.encode(params.encoder, ids, mask=mask)
        for r, seq in enumerate(seqs):
            mu_one, sigma_one = V.encode(params.encoder, seq)
            np.testing.assert_allclose(mu_batch.data[r], mu_one.data[0], atol=1e-12)
            np.testing.assert_allclose(sigma_batch.data[r], sigma_one.data[0], atol=1e-12)

    def test_training_dropout_needs_rng(self):
        params = small_vae()
        with pytest.raises(ValueError, match="rng"):
            V.encode(params.encoder, [BOS_ID, 4, EOS_ID], training=True)


class TestReparameterize:
    def test_zero_eps_returns_mu(self):
        mu = Tensor(np.array([[0.3, -1.2]]))
        sigma = Tensor(np.array([[0.5, 2.0]]))
        latent = V.reparameterize(mu, sigma, eps=np.zeros((1, 2)))
        np.testing.assert_array_equal(latent.z.data, mu.data)

    def test_standard_params_return_eps(self):
        eps = np.array([[1.5, -0.7]])
        latent = V.reparameterize(Tensor(np.zeros((1, 2))), Tensor(np.ones((1, 2))),
                                  eps=eps)
        np.testing.assert_array_equal(latent.z.data, eps)

    def test_z_is_exactly_mu_plus_sigma_eps(self):
        rng = np.random.default_rng(40)
        for _ in range(25):
            mu = rng.normal(size=(2, 3))
            sigma = np.exp(rng.normal(size=(2, 3)))
            latent = V.reparameterize(Tensor(mu), Tensor(sigma), rng=rng)
            assert np.array_equal(latent.z.data, mu + sigma * latent.eps)

    def test_sample_statistics(self):
        # 10,000 draws at mu=1, sigma=2: mean in 1 +/- 0.06, std in 2 +/- 0.05
        rng = np.random.default_rng(41)
        mu = Tensor(np.full((10_000, 1), 1.0))
        sigma = Tensor(np.full((10_000, 1), 2.0))
        latent = V.reparameterize(mu, sigma, rng=rng)
        draws = latent.z.data.ravel()
        assert abs(draws.mean() - 1.0) < 0.06
        assert abs(draws.std() - 2.0) < 0.05

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            V.reparameterize(Tensor(np.zeros((1, 2))),
                             Tensor(np.array([[1.0, 0.0]])), eps=np.zeros((1, 2)))

    def test_needs_rng_or_eps(self):
        with pytest.raises(ValueError, match="rng"):
            V.reparameterize(Tensor(np.zeros((1, 2))), Tensor(np.ones((1, 2))))

    def test_eps_shape_checked(self):
        with pytest.raises(ValueError, match="shape"):
            V.reparameterize(Tensor(np.zeros((1, 2))), Tensor(np.ones((1, 2))),
                             eps=np.zeros((2, 2)))


def scalar_decode(dec, embedding, z_row, ids_row):
    """Straight-line teacher-forced log-likelihood for one sequence."""
    hidden = dec.lstm1.hidden_size

    def dense_row(vec, layer):
        return [sum(layer.w.data[j][k] * vec[k] for k in range(len(vec)))
                + layer.b.data[j] for j in range(layer.w.data.shape[0])]

    h1 = [math.tanh(v) for v in dense_row(z_row, dec.init_h1)]
    c1 = [0.0] * hidden
    h2 = [math.tanh(v) for v in dense_row(z_row, dec.init_h2)]
    c2 = [0.0] * hidden
    total = 0.0
    for t in range(1, len(ids_row)):
        x = list(embedding.data[ids_row[t - 1]]) + list(z_row)
        h1, c1 = scalar_lstm_step(dec.lstm1, x, h1, c1)
        h2, c2 = scalar_lstm_step(dec.lstm2, h1, h2, c2)
        logits = dense_row(h2, dec.out)
        exps = [math.exp(v) for v in logits]
        norm = sum(exps)
        probs = [e / norm for e in exps]
        assert abs(sum(probs) - 1.0) < 1e-9
        total += math.log(probs[ids_row[t]])
    return total


class TestDecode:
    def test_uniform_output_layer(self):
        # zeroed output weights: every step is a uniform softmax over vs
        params = small_vae(seed=5, vocab_size=9)
        zero_tensors([params.decoder.out.w, params.decoder.out.b])
        ids = [BOS_ID, 4, 5, 6, EOS_ID]
        z = Tensor(np.zeros((1, 3)))
        logp = V.decode(params.decoder, params.encoder.embedding, z, ids)
        expected = -4 * math.log(9)  # 4 scored steps
        assert logp.data[0] == pytest.approx(expected, abs=1e-12)

    def test_single_target_is_single_term(self):
        params = small_vae(seed=6, vocab_size=9)
        zero_tensors([params.decoder.out.w, params.decoder.out.b])
        z = Tensor(np.zeros((1, 3)))
        logp = V.decode(params.decoder, params.encoder.embedding, z, [BOS_ID, EOS_ID])
        assert logp.data[0] == pytest.approx(-math.log(9), abs=1e-12)

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(50)
        for trial in range(5):
            params = small_vae(seed=100 + trial, vocab_size=7, embed_dim=2,
                               hidden=2, latent=2)
            ids = [BOS_ID] + [int(v) for v in rng.integers(4, 7, size=3)] + [EOS_ID]
            z_row = rng.normal(size=2)
            z = Tensor(z_row.reshape(1, 2))
            got = V.decode(params.decoder, params.encoder.embedding, z, ids)
            want = scalar_decode(params.decoder, params.encoder.embedding, z_row, ids)
            assert got.data[0] == pytest.approx(want, abs=1e-12)

    def test_pad_positions_excluded(self):
        params = small_vae(seed=7)
        seqs = [[BOS_ID, 4, 5, EOS_ID], [BOS_ID, 6, EOS_ID]]
        ids, mask = pad_batch(seqs)
        z = Tensor(np.random.default_rng(1).normal(size=(2, 3)))
        batched = V.decode(params.decoder, params.encoder.embedding, z, ids, mask=mask)
        for r, seq in enumerate(seqs):
            single = V.decode(params.decoder, params.encoder.embedding,
                              Tensor(z.data[r : r + 1]), seq)
            assert batched.data[r] == pytest.approx(single.data[0], abs=1e-12)

    def test_requires_bos(self):
        params = small_vae()
        with pytest.raises(ValueError, match="BOS"):
            V.decode(params.decoder, params.encoder.embedding,
                     Tensor(np.zeros((1, 3))), [4, 5, EOS_ID])

    def test_out_of_range_id_rejected(self):
        params = small_vae(vocab_size=9)
        with pytest.raises(ValueError, match="out of range"):
            V.decode(params.decoder, params.encoder.embedding,
                     Tensor(np.zeros((1, 3))), [BOS_ID, 40, EOS_ID])

    def test_needs_two_positions(self):
        params = small_vae()
        with pytest.raises(ValueError, match="BOS plus"):
            V.decode(params.decoder, params.encoder.embedding,
                     Tensor(np.zeros((1, 3))), [BOS_ID])

    def test_step_distributions_sum_to_one(self):
        """The per-step output softmax is a distribution over the whole
        vocabulary: rerun the decoder stack by hand and check each step."""
        params = small_vae(seed=8, vocab_size=11)
        dec = params.decoder
        rng = np.random.default_rng(2)
        z = Tensor(rng.normal(size=(2, 3)))
        ids = np.array([[BOS_ID, 4, 5, 6, EOS_ID], [BOS_ID, 7, 8, 9, EOS_ID]])
        from vroc.autodiff import dense
        from vroc.lstm import LSTMState, lstm_step
        state1 = LSTMState(h=ad.tanh(dense(z, dec.init_h1)), c=Tensor(np.zeros((2, 3))))
        state2 = LSTMState(h=ad.tanh(dense(z, dec.init_h2)), c=Tensor(np.zeros((2, 3))))
        for t in range(1, ids.shape[1]):
            x = ad.concat([ad.embedding_lookup(params.encoder.embedding, ids[:, t - 1]), z],
                          axis=1)
            state1 = lstm_step(dec.lstm1, x, state1)
            state2 = lstm_step(dec.lstm2, state1.h, state2)
            dist = ad.softmax(dense(state2.h, dec.out), axis=1)
            np.testing.assert_allclose(dist.data.sum(axis=1), 1.0, atol=1e-9)


class TestGenerate:
    def test_eos_peaked_decoder_generates_nothing(self):
        params = small_vae(seed=9)
        zero_tensors(params.decoder.tensors())
        params.decoder.out.b.data[EOS_ID] = 5.0
        out = V.generate(params.decoder, params.encoder.embedding,
                         np.zeros(3), max_len=10)
        assert out == []

    def test_tie_breaks_to_lowest_id(self):
        # all-zero output layer: every token ties, argmax must pick id 0
        params = small_vae(seed=10)
        zero_tensors(params.decoder.tensors())
        out = V.generate(params.decoder, params.encoder.embedding,
                         np.zeros(3), max_len=4)
        assert out == [PAD_ID] * 4

    def test_deterministic_in_z(self):
        params = small_vae(seed=11)
        z = np.random.default_rng(3).normal(size=3)
        a = V.generate(params.decoder, params.encoder.embedding, z, max_len=8)
        b = V.generate(params.decoder, params.encoder.embedding, z, max_len=8)
        assert a == b

    def test_max_len_caps_output(self):
        params = small_vae(seed=12)
        zero_tensors(params.decoder.tensors())
        out = V.generate(params.decoder, params.encoder.embedding,
                         np.zeros(3), max_len=2)
        assert len(out) == 2

    def test_bad_max_len_rejected(self):
        params = small_vae()
        with pytest.raises(ValueError, match="max_len"):
            V.generate(params.decoder, params.encoder.embedding, np.zeros(3), 0)


class TestDensities:
    def test_gaussian_logpdf_matches_formula(self):
        rng = np.random.default_rng(60)
        z = rng.normal(size=(3, 4))
        mu = rng.normal(size=(3, 4))
        sigma = np.exp(rng.normal(size=(3, 4)))
        got = V.gaussian_logpdf(Tensor(z), Tensor(mu), Tensor(sigma))
        want = -0.5 * np.sum(
            np.log(2 * np.pi) + 2 * np.log(sigma) + ((z - mu) / sigma) ** 2, axis=1)
        np.testing.assert_allclose(got.data, want, atol=1e-12)

    def test_std_normal_logpdf_matches_formula(self):
        rng = np.random.default_rng(61)
        z = rng.normal(size=(3, 4))
        got = V.std_normal_logpdf(Tensor(z))
        want = -0.5 * np.sum(np.log(2 * np.pi) + z * z, axis=1)
        np.testing.assert_allclose(got.data, want, atol=1e-12)

    def test_densities_agree_at_standard_normal(self):
        rng = np.random.default_rng(62)
        z = rng.normal(size=(2, 3))
        a = V.gaussian_logpdf(Tensor(z), Tensor(np.zeros((2, 3))),
                              Tensor(np.ones((2, 3))))
        b = V.std_normal_logpdf(Tensor(z))
        np.testing.assert_allclose(a.data, b.data, atol=1e-12)


class TestKLClosedForm:
    def test_standard_normal_is_zero(self):
        assert V.kl_closed_form(np.zeros(4), np.ones(4)) == 0.0

    def test_unit_mean_shift(self):
        assert V.kl_closed_form(np.array([1.0]), np.array([1.0])) == pytest.approx(
            0.5, abs=1e-12)

    def test_nonnegative_and_zero_only_at_identity(self):
        rng = np.random.default_rng(70)
        for _ in range(50):
            mu = rng.normal(size=4)
            sigma = np.exp(rng.normal(scale=0.5, size=4))
            assert V.kl_closed_form(mu, sigma) >= 0.0
        assert V.kl_closed_form(np.full(4, 1e-8), np.ones(4)) < 1e-12
        assert V.kl_closed_form(np.full(4, 0.1), np.ones(4)) > 1e-12

    def test_nonpositive_sigma_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            V.kl_closed_form(np.zeros(2), np.array([1.0, -1.0]))

    def test_monte_carlo_agrees_within_three_stderr(self):
        rng = np.random.default_rng(71)
        for _ in range(5):
            mu = rng.normal(size=4)
            sigma = np.exp(rng.normal(scale=0.5, size=4))
            est, se = V.gaussian_kl_mc(mu, sigma, 10_000, rng)
            want = -V.kl_closed_form(mu, sigma)
            assert abs(est - want) <= 3.0 * se

    def test_mc_needs_two_samples(self):
        with pytest.raises(ValueError, match="2 samples"):
            V.gaussian_kl_mc(np.zeros(2), np.ones(2), 1, np.random.default_rng(0))


class TestElboMC:
    def test_densities_cancel_at_standard_normal(self):
        # zeroed encoder forces mu=0 sigma=1; eps=0 puts z at the mode,
        # where log q and log p(z) coincide and the loss is pure -log p(x|z)
        params = small_vae(seed=13)
        zero_tensors(params.encoder.tensors())
        ids = np.array([[BOS_ID, 4, 5, EOS_ID]])
        loss, parts = V.elbo_mc(params, ids, eps=np.zeros((1, 1, 3)))
        assert parts["log_qz"].item() == parts["log_pz"].item()
        assert loss.item() == -parts["log_px"].item()

    def test_single_sample_matches_manual_composition(self):
        params = small_vae(seed=14)
        ids = np.array([[BOS_ID, 4, 5, 6, EOS_ID]])
        eps = np.random.default_rng(4).normal(size=(1, 3))
        loss, parts = V.elbo_mc(params, ids, eps=eps)

        mu, sigma = V.encode(params.encoder, ids)
        latent = V.reparameterize(mu, sigma, eps=eps)
        log_px = V.decode(params.decoder, params.encoder.embedding, latent.z, ids)
        log_qz = V.gaussian_logpdf(latent.z, mu, sigma)
        log_pz = V.std_normal_logpdf(latent.z)
        want = -(log_px.data.mean() + log_pz.data.mean() - log_qz.data.mean())
        assert loss.item() == pytest.approx(want, abs=1e-12)
        assert parts["elbo"].item() == pytest.approx(-want, abs=1e-12)

    def test_multi_sample_is_mean_of_single_samples(self):
        params = small_vae(seed=15)
        ids = np.array([[BOS_ID, 4, 5, EOS_ID], [BOS_ID, 6, 7, EOS_ID]])
        eps = np.random.default_rng(5).normal(size=(3, 2, 3))
        loss_multi, _ = V.elbo_mc(params, ids, n_samples=3, eps=eps)
        singles = [V.elbo_mc(params, ids, eps=eps[i])[0].item() for i in range(3)]
        assert loss_multi.item() == pytest.approx(np.mean(singles), abs=1e-12)

    def test_kl_weight_scales_density_terms(self):
        params = small_vae(seed=16)
        ids = np.array([[BOS_ID, 4, 5, EOS_ID]])
        eps = np.random.default_rng(6).normal(size=(1, 3))
        loss_full, parts = V.elbo_mc(params, ids, eps=eps, kl_weight=1.0)
        loss_none, _ = V.elbo_mc(params, ids, eps=eps, kl_weight=0.0)
        assert loss_none.item() == pytest.approx(-parts["log_px"].item(), abs=1e-12)
        gap = parts["log_pz"].item() - parts["log_qz"].item()
        assert loss_full.item() == pytest.approx(loss_none.item() - gap, abs=1e-12)

    def test_bad_n_samples_rejected(self):
        params = small_vae()
        with pytest.raises(ValueError, match="n_samples"):
            V.elbo_mc(params, [BOS_ID, 4, EOS_ID], n_samples=0)

    def test_eps_shape_validated(self):
        params = small_vae()
        with pytest.raises(ValueError, match="eps shape"):
            V.elbo_mc(params, [BOS_ID, 4, EOS_ID], eps=np.zeros((2, 5)))

    def test_gradient_finite_differences_frozen_eps(self):
        """Full loss gradient over every encoder and decoder parameter."""
        params = small_vae(seed=17, vocab_size=8)
        ids = np.array([[BOS_ID, 4, 5, EOS_ID]])
        eps = np.random.default_rng(7).normal(size=(1, 3))

        def f(*_):
            loss, _ = V.elbo_mc(params, ids, eps=eps, kl_weight=0.7)
            return loss

        leaves = params.encoder.tensors() + params.decoder.tensors()
        err = grad_check(f, leaves, step=1e-5)
        assert err < 1e-4


class TestReconstructAndExport:
    def test_reconstruct_deterministic(self):
        params = small_vae(seed=18)
        ids = [BOS_ID, 4, 5, EOS_ID]
        a = V.reconstruct(params, ids, max_len=6)
        b = V.reconstruct(params, ids, max_len=6)
        assert a == b
        assert all(0 <= t < 9 for t in a)

    def test_export_latents_roundtrip(self, tmp_path):
        params = small_vae(seed=19)
        items = [("tw1", [BOS_ID, 4, 5, EOS_ID]), ("tw2", [BOS_ID, 6, EOS_ID])]
        path = tmp_path / "latents.tsv"
        V.export_latents(path, params.encoder, items)
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "id\tmu\tsigma"
        assert len(lines) == 3
        for line, (ex_id, ids) in zip(lines[1:], items):
            name, mu_s, sigma_s = line.split("\t")
            assert name == ex_id
            mu, sigma = V.encode(params.encoder, ids)
            got_mu = np.array([float(v) for v in mu_s.split(",")])
            got_sigma = np.array([float(v) for v in sigma_s.split(",")])
            np.testing.assert_array_equal(got_mu, mu.data[0])
            np.testing.assert_array_equal(got_sigma, sigma.data[0])
