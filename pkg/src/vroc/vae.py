"""LSTM text variational autoencoder.

Encoder: embedding, two stacked LSTM layers (H=32), and a dense head
whose output splits into a mean projection and a log-variance
projection, each hidden -> d_z.  The log-variance is exponentiated to
sigma = exp(logvar / 2), which keeps sigma positive by construction.

Decoder: z is projected (through tanh) into the initial hidden state of
each LSTM layer, and also concatenated onto every step's input next to
the embedded previous token (teacher forcing).  A final dense layer of
vocabulary size gives per-step next-token distributions.

The training objective is the Monte Carlo estimate

    L = (1/n) sum_n [ -log q(z_n | x) + log p(x | z_n) + log p(z_n) ]

maximized by minimizing its negation; an optional annealing weight
scales the (log p(z) - log q(z|x)) part during early epochs.  All three
density terms are computed through the tape, so gradients include the
pathwise dependence of z on mu and sigma.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from vroc import autodiff as ad
from vroc import lstm as lstm_mod
from vroc.autodiff import Dense, Tensor, dense, init_dense
from vroc.lstm import LSTMCellParams, LSTMState, init_lstm, lstm_forward, zero_state
from vroc.text import BOS_ID, EOS_ID, PAD_ID

LN_2PI = math.log(2.0 * math.pi)


@dataclass
class EncoderParams:
    """Embedding, two stacked LSTM layers, and the mu/logvar projections."""

    embedding: Tensor
    lstm1: LSTMCellParams
    lstm2: LSTMCellParams
    mu_proj: Dense
    logvar_proj: Dense

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.mu_proj.w.shape[0]

    def tensors(self) -> list[Tensor]:
        return ([self.embedding] + self.lstm1.tensors() + self.lstm2.tensors()
                + [self.mu_proj.w, self.mu_proj.b,
                   self.logvar_proj.w, self.logvar_proj.b])


@dataclass
class DecoderParams:
    """Initial-state projections from z, two stacked LSTM layers, and the
    vocabulary-sized output layer."""

    init_h1: Dense
    init_h2: Dense
    lstm1: LSTMCellParams
    lstm2: LSTMCellParams
    out: Dense

    @property
    def vocab_size(self) -> int:
        return self.out.w.shape[0]

    def tensors(self) -> list[Tensor]:
        return ([self.init_h1.w, self.init_h1.b, self.init_h2.w, self.init_h2.b]
                + self.lstm1.tensors() + self.lstm2.tensors()
                + [self.out.w, self.out.b])


@dataclass
class VAEParams:
    encoder: EncoderParams
    decoder: DecoderParams

    def tensors(self) -> list[Tensor]:
        return self.encoder.tensors() + self.decoder.tensors()


@dataclass
class LatentCode:
    """One reparameterized draw: z = mu + sigma * eps, all (batch, d_z)."""

    mu: Tensor
    sigma: Tensor
    eps: np.ndarray
    z: Tensor


# A freshly initialized encoder is tuned so the latent pathway survives
# early training.  With sigma = 1 and near-identical posterior means,
# z is indistinguishable from noise, the decoder learns to ignore it,
# and the means then flatten completely (the classic collapsed latent).
# Starting with a quiet sigma (exp(LOGVAR_BIAS_INIT / 2) ~= 0.14) and a
# wider mu projection keeps distinct inputs mapped to visibly distinct
# codes from the first step, so reconstruction gradients keep flowing
# through z.  Both tensors are trainable; KL annealing later pulls the
# posterior toward the prior as usual.
LOGVAR_BIAS_INIT = -4.0
MU_W_INIT_GAIN = 4.0


def init_encoder(rng: np.random.Generator, vocab_size: int, embed_dim: int = 32,
                 hidden: int = 32, latent: int = 32) -> EncoderParams:
    if vocab_size < 4:
        raise ValueError(f"init_encoder: vocab_size must be >= 4, got {vocab_size}")
    params = EncoderParams(
        embedding=ad.uniform_init(rng, (vocab_size, embed_dim),
                                  1.0 / math.sqrt(embed_dim), name="enc.embedding"),
        lstm1=init_lstm(rng, hidden, embed_dim, name="enc.lstm1"),
        lstm2=init_lstm(rng, hidden, hidden, name="enc.lstm2"),
        mu_proj=init_dense(rng, latent, hidden, name="enc.mu"),
        logvar_proj=init_dense(rng, latent, hidden, name="enc.logvar"),
    )
    params.mu_proj.w.data *= MU_W_INIT_GAIN
    params.logvar_proj.b.data[:] = LOGVAR_BIAS_INIT
    return params


def init_decoder(rng: np.random.Generator, vocab_size: int, embed_dim: int = 32,
                 hidden: int = 32, latent: int = 32) -> DecoderParams:
    return DecoderParams(
        init_h1=init_dense(rng, hidden, latent, name="dec.init_h1"),
        init_h2=init_dense(rng, hidden, latent, name="dec.init_h2"),
        lstm1=init_lstm(rng, hidden, embed_dim + latent, name="dec.lstm1"),
        lstm2=init_lstm(rng, hidden, hidden, name="dec.lstm2"),
        out=init_dense(rng, vocab_size, hidden, name="dec.out"),
    )


def init_vae(rng: np.random.Generator, vocab_size: int, embed_dim: int = 32,
             hidden: int = 32, latent: int = 32) -> VAEParams:
    return VAEParams(
        encoder=init_encoder(rng, vocab_size, embed_dim, hidden, latent),
        decoder=init_decoder(rng, vocab_size, embed_dim, hidden, latent),
    )


def _as_batch(ids) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.intp)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError(f"token ids must be 1-D or 2-D, got shape {arr.shape}")
    return arr


def encode(enc: EncoderParams, ids, mask: np.ndarray | None = None,
           rng: np.random.Generator | None = None, training: bool = False,
           dropout_rate: float = 0.2):
    """Run the encoder over a batch of id sequences.

    ``ids`` is (batch, T) or a single 1-D sequence; ``mask`` (same shape,
    1.0 for real positions) freezes finished rows so padded batches give
    the same final state as per-example runs.  Returns (mu, sigma), each
    (batch, d_z).
    """
    ids = _as_batch(ids)
    if ids.shape[1] == 0:
        raise ValueError("encode: empty token sequence")
    if training and dropout_rate > 0.0 and rng is None:
        raise ValueError("encode: training with dropout requires an rng")

    steps1 = [ad.embedding_lookup(enc.embedding, ids[:, t]) for t in range(ids.shape[1])]
    masks = [mask[:, t] for t in range(ids.shape[1])] if mask is not None else None
    out1, _ = lstm_forward(enc.lstm1, steps1, masks=masks)
    if training and dropout_rate > 0.0:
        out1 = [ad.dropout(h, dropout_rate, rng, training=True) for h in out1]
    _, state2 = lstm_forward(enc.lstm2, out1, masks=masks, return_all=False)
    top = state2.h
    if training and dropout_rate > 0.0:
        top = ad.dropout(top, dropout_rate, rng, training=True)
    mu = dense(top, enc.mu_proj)
    logvar = dense(top, enc.logvar_proj)
    sigma = ad.exp(ad.mul(logvar, 0.5))
    return mu, sigma


def reparameterize(mu: Tensor, sigma: Tensor, rng: np.random.Generator | None = None,
                   eps: np.ndarray | None = None) -> LatentCode:
    """Draw z = mu + sigma * eps with eps ~ N(0, I) from ``rng``; a fixed
    ``eps`` may be supplied instead (deterministic tests, frozen noise)."""
    if np.any(sigma.data <= 0.0):
        raise ValueError(f"reparameterize: sigma must be positive, min {float(sigma.data.min())}")
    if eps is None:
        if rng is None:
            raise ValueError("reparameterize: need an rng or an explicit eps")
        eps = rng.standard_normal(mu.shape)
    else:
        eps = np.asarray(eps, dtype=np.float64)
        if eps.shape != tuple(mu.shape):
            raise ValueError(f"reparameterize: eps shape {eps.shape} does not match mu {tuple(mu.shape)}")
    z = ad.add(mu, ad.mul(sigma, Tensor(eps)))
    return LatentCode(mu=mu, sigma=sigma, eps=eps, z=z)


def decode(dec: DecoderParams, embedding: Tensor, z: Tensor, ids,
           mask: np.ndarray | None = None, rng: np.random.Generator | None = None,
           training: bool = False, dropout_rate: float = 0.2,
           return_steps: bool = False):
    """Teacher-forced log-likelihood of target sequences under z.

    ``ids`` (batch, T) must start with BOS; step t consumes the embedded
    token at t-1 concatenated with z and is scored against the token at
    t.  PAD positions contribute nothing (controlled by ``mask``).
    Returns a (batch,) tensor of summed log-probabilities, plus the list
    of per-step (batch,) log-probability tensors when ``return_steps``.
    """
    ids = _as_batch(ids)
    batch, width = ids.shape
    if width < 2:
        raise ValueError("decode: need BOS plus at least one target token")
    if np.any(ids[:, 0] != BOS_ID):
        raise ValueError("decode: every target sequence must start with BOS")
    if ids.min() < 0 or ids.max() >= dec.vocab_size:
        bad = int(ids[(ids < 0) | (ids >= dec.vocab_size)][0])
        raise ValueError(f"decode: token id {bad} out of range [0, {dec.vocab_size})")
    if training and dropout_rate > 0.0 and rng is None:
        raise ValueError("decode: training with dropout requires an rng")

    state1 = LSTMState(h=ad.tanh(dense(z, dec.init_h1)),
                       c=Tensor(np.zeros((batch, dec.lstm1.hidden_size))))
    state2 = LSTMState(h=ad.tanh(dense(z, dec.init_h2)),
                       c=Tensor(np.zeros((batch, dec.lstm2.hidden_size))))

    fused1 = lstm_mod._fuse(dec.lstm1)
    fused2 = lstm_mod._fuse(dec.lstm2)
    total = None
    steps = []
    for t in range(1, width):
        prev = ad.embedding_lookup(embedding, ids[:, t - 1])
        x = ad.concat([prev, z], axis=1)
        step_mask = mask[:, t] if mask is not None else None
        state1 = lstm_mod._fused_step(fused1, x, state1, step_mask)
        h1 = state1.h
        if training and dropout_rate > 0.0:
            h1 = ad.dropout(h1, dropout_rate, rng, training=True)
        state2 = lstm_mod._fused_step(fused2, h1, state2, step_mask)
        h2 = state2.h
        if training and dropout_rate > 0.0:
            h2 = ad.dropout(h2, dropout_rate, rng, training=True)
        logits = dense(h2, dec.out)
        logp = ad.gather_cols(ad.log_softmax(logits, axis=1), ids[:, t])
        if step_mask is not None:
            logp = ad.mul(logp, Tensor(step_mask))
        steps.append(logp)
        total = logp if total is None else ad.add(total, logp)
    if return_steps:
        return total, steps
    return total


def generate(dec: DecoderParams, embedding: Tensor, z, max_len: int) -> list[int]:
    """Greedy decode from BOS: at each step take the argmax token (ties
    go to the lowest id) until EOS or ``max_len`` tokens.  Returns the
    generated ids without BOS/EOS.  Deterministic in z."""
    if max_len < 1:
        raise ValueError(f"generate: max_len must be >= 1, got {max_len}")
    if not isinstance(z, Tensor):
        z = Tensor(z)
    if z.ndim == 1:
        z = ad.reshape(z, (1, -1))
    state1 = LSTMState(h=ad.tanh(dense(z, dec.init_h1)),
                       c=Tensor(np.zeros((1, dec.lstm1.hidden_size))))
    state2 = LSTMState(h=ad.tanh(dense(z, dec.init_h2)),
                       c=Tensor(np.zeros((1, dec.lstm2.hidden_size))))
    prev = BOS_ID
    out: list[int] = []
    for _ in range(max_len):
        x = ad.concat([ad.embedding_lookup(embedding, np.array([prev])), z], axis=1)
        state1 = lstm_mod.lstm_step(dec.lstm1, x, state1)
        state2 = lstm_mod.lstm_step(dec.lstm2, state1.h, state2)
        logits = dense(state2.h, dec.out).data[0]
        nxt = int(np.argmax(logits))
        if nxt == EOS_ID:
            break
        out.append(nxt)
        prev = nxt
    return out


def gaussian_logpdf(z: Tensor, mu: Tensor, sigma: Tensor) -> Tensor:
    """Per-example diagonal-Gaussian log density, summed over dimensions."""
    diff = ad.div(ad.sub(z, mu), sigma)
    per = ad.add(ad.add(ad.mul(ad.log(sigma), 2.0), ad.mul(diff, diff)), LN_2PI)
    return ad.mul(ad.tsum(per, axis=1), -0.5)


def std_normal_logpdf(z: Tensor) -> Tensor:
    """Per-example standard-normal log density, summed over dimensions."""
    per = ad.add(ad.mul(z, z), LN_2PI)
    return ad.mul(ad.tsum(per, axis=1), -0.5)


def elbo_mc(params: VAEParams, ids, mask: np.ndarray | None = None,
            n_samples: int = 1, rng: np.random.Generator | None = None,
            kl_weight: float = 1.0, training: bool = False,
            dropout_rate: float = 0.2, eps: np.ndarray | None = None):
    """Monte Carlo training loss for a batch.

    Returns (loss, parts): ``loss`` is the scalar to minimize, the batch
    mean of -[log p(x|z) + kl_weight * (log p(z) - log q(z|x))] averaged
    over ``n_samples`` draws.  ``parts`` holds scalar tensors log_px,
    log_qz, log_pz, the unweighted objective ``elbo``, and the last
    draw's LatentCode.  ``eps`` (shape (n_samples, batch, d_z) or
    (batch, d_z) when n_samples is 1) freezes the noise.
    """
    if n_samples < 1:
        raise ValueError(f"elbo_mc: n_samples must be >= 1, got {n_samples}")
    ids = _as_batch(ids)
    mu, sigma = encode(params.encoder, ids, mask, rng, training, dropout_rate)
    batch = ids.shape[0]

    if eps is not None:
        eps = np.asarray(eps, dtype=np.float64)
        if n_samples == 1 and eps.ndim == 2:
            eps = eps[None]
        if eps.shape != (n_samples, batch, params.encoder.latent_dim):
            raise ValueError(
                f"elbo_mc: eps shape {eps.shape} does not match "
                f"({n_samples}, {batch}, {params.encoder.latent_dim})"
            )

    log_px_terms, log_qz_terms, log_pz_terms = [], [], []
    latent = None
    for s in range(n_samples):
        draw = eps[s] if eps is not None else None
        latent = reparameterize(mu, sigma, rng, eps=draw)
        log_px_terms.append(decode(params.decoder, params.encoder.embedding,
                                   latent.z, ids, mask, rng, training, dropout_rate))
        log_qz_terms.append(gaussian_logpdf(latent.z, mu, sigma))
        log_pz_terms.append(std_normal_logpdf(latent.z))

    def sample_mean(terms):
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return ad.mul(total, 1.0 / len(terms))

    log_px = ad.tmean(sample_mean(log_px_terms))
    log_qz = ad.tmean(sample_mean(log_qz_terms))
    log_pz = ad.tmean(sample_mean(log_pz_terms))
    elbo = ad.add(log_px, ad.sub(log_pz, log_qz))
    loss = ad.mul(ad.add(log_px, ad.mul(ad.sub(log_pz, log_qz), kl_weight)), -1.0)
    parts = {"log_px": log_px, "log_qz": log_qz, "log_pz": log_pz,
             "elbo": elbo, "latent": latent}
    return loss, parts


def kl_closed_form(mu, sigma) -> float:
    """KL(N(mu, diag sigma^2) || N(0, I)) = 0.5 * sum(mu^2 + sigma^2 - 1
    - ln sigma^2); non-negative, zero only at mu=0, sigma=1."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise ValueError(f"kl_closed_form: sigma must be positive, min {float(sigma.min())}")
    return float(np.sum(0.5 * (mu * mu + sigma * sigma - 1.0 - 2.0 * np.log(sigma))))


def gaussian_kl_mc(mu, sigma, n_samples: int, rng: np.random.Generator):
    """Monte Carlo estimate of E_q[log p(z) - log q(z)] = -KL, with its
    standard error.  Pure sampling, independent of the tape machinery."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0.0):
        raise ValueError("gaussian_kl_mc: sigma must be positive")
    if n_samples < 2:
        raise ValueError("gaussian_kl_mc: need at least 2 samples for a standard error")
    eps = rng.standard_normal((n_samples,) + mu.shape)
    z = mu + sigma * eps
    log_q = -0.5 * np.sum(LN_2PI + 2.0 * np.log(sigma) + eps * eps,
                          axis=tuple(range(1, z.ndim)))
    log_p = -0.5 * np.sum(LN_2PI + z * z, axis=tuple(range(1, z.ndim)))
    vals = log_p - log_q
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_samples))


def reconstruct(params: VAEParams, ids, max_len: int) -> list[int]:
    """Deterministic round trip: encode one sequence, decode greedily
    from z = mu."""
    mu, _ = encode(params.encoder, ids)
    return generate(params.decoder, params.encoder.embedding, mu, max_len)


def export_latents(path, enc: EncoderParams, items) -> None:
    """Write one TSV row (id, mu, sigma) per (example id, token ids)
    pair; mu and sigma are comma-joined floats."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("id\tmu\tsigma\n")
        for ex_id, ids in items:
            mu, sigma = encode(enc, ids)
            mu_s = ",".join(repr(float(v)) for v in mu.data[0])
            sg_s = ",".join(repr(float(v)) for v in sigma.data[0])
            fh.write(f"{ex_id}\t{mu_s}\t{sg_s}\n")
