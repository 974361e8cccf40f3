"""scikit-learn style front end.

``RumorClassifier`` wraps the whole pipeline (tokenizer, vocabulary,
VAE pretraining, co-training of one task head) behind fit/predict.
X is a 1-D sequence of raw text strings; y holds arbitrary hashable
labels (two labels give a sigmoid head, more give a softmax head).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from vroc import heads as heads_mod
from vroc import training as training_mod
from vroc import vae as vae_mod
from vroc.text import build_vocab, encode_tokens, pad_batch, tokenize
from vroc.training import CoTrainConfig


def _validate_texts(X) -> list:
    if hasattr(X, "ndim") and getattr(X, "ndim", 1) > 1:
        raise ValueError(f"X must be 1-D text, got shape {X.shape}")
    texts = list(X)
    if not texts:
        raise ValueError("X is empty")
    for i, t in enumerate(texts):
        if not isinstance(t, str):
            raise ValueError(f"X[{i}] is {type(t).__name__}, expected str")
    return texts


class RumorClassifier(ClassifierMixin, BaseEstimator):
    """Text classifier over a co-trained VAE latent space.

    Parameters mirror the training configuration: ``mode`` picks
    co-training ("cotrain") or the frozen two-stage baseline
    ("frozen-baseline"); ``lambda_weight`` balances the task loss
    against the reconstruction objective; ``task`` names which head
    architecture convention to use and only matters for multi-task
    setups (the classes always come from ``y``).

    >>> clf = RumorClassifier(epochs=5, pretrain_epochs=2)
    >>> clf.fit(["free offer now", "meeting at noon"], ["spam", "ham"])
    ... # doctest: +SKIP
    """

    def __init__(self, task="detection", mode="cotrain", lambda_weight=1.0,
                 pretrain_epochs=10, epochs=100, batch_size=32,
                 learning_rate=1e-3, patience=5, kl_anneal_epochs=10,
                 kl_scale=1.0, n_samples=1, max_len=36, min_freq=2,
                 embed_dim=32, hidden_size=32, latent_dim=32, head_steps=8,
                 dropout=0.2, clip_norm=5.0, val_fraction=0.1, seed=0):
        self.task = task
        self.mode = mode
        self.lambda_weight = lambda_weight
        self.pretrain_epochs = pretrain_epochs
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.patience = patience
        self.kl_anneal_epochs = kl_anneal_epochs
        self.kl_scale = kl_scale
        self.n_samples = n_samples
        self.max_len = max_len
        self.min_freq = min_freq
        self.embed_dim = embed_dim
        self.hidden_size = hidden_size
        self.latent_dim = latent_dim
        self.head_steps = head_steps
        self.dropout = dropout
        self.clip_norm = clip_norm
        self.val_fraction = val_fraction
        self.seed = seed

    def _config(self) -> CoTrainConfig:
        cfg = CoTrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            patience=self.patience,
            seed=self.seed,
            kl_anneal_epochs=self.kl_anneal_epochs,
            kl_scale=self.kl_scale,
            mode=self.mode,
            pretrain_epochs=self.pretrain_epochs,
            n_samples=self.n_samples,
            embed_dim=self.embed_dim,
            hidden_size=self.hidden_size,
            latent_dim=self.latent_dim,
            head_steps=self.head_steps,
            dropout=self.dropout,
            clip_norm=self.clip_norm,
            max_len=self.max_len,
            min_freq=self.min_freq,
            val_fraction=self.val_fraction,
        )
        if self.task not in heads_mod.TASKS:
            raise ValueError(
                f"task must be one of {list(heads_mod.TASKS)}, got {self.task!r}"
            )
        setattr(cfg, f"lambda_{self.task}", self.lambda_weight)
        return cfg.validate()

    def fit(self, X, y):
        """Tokenize X, pretrain the VAE, then co-train a head on y."""
        texts = _validate_texts(X)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(texts):
            raise ValueError(
                f"y must be 1-D with one label per text; got {y.shape} for {len(texts)} texts"
            )
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValueError(f"need at least 2 classes, got {list(self.classes_)}")
        config = self._config()

        class_of = {c: i for i, c in enumerate(self.classes_)}
        labels = np.array([class_of[v] for v in y], dtype=np.intp)
        token_lists = [tokenize(t) for t in texts]

        # stratified validation slice for early stopping
        rng = np.random.default_rng(self.seed)
        val_idx: list[int] = []
        for c in range(len(self.classes_)):
            members = np.flatnonzero(labels == c)
            if len(members) < 2:
                continue
            n_val = min(max(int(round(len(members) * self.val_fraction)), 1),
                        len(members) - 1)
            val_idx.extend(members[rng.permutation(len(members))[:n_val]])
        val_mask = np.zeros(len(texts), dtype=bool)
        val_mask[val_idx] = True
        train_tokens = [t for t, v in zip(token_lists, val_mask) if not v]

        self.vocab_ = build_vocab(train_tokens, self.min_freq)
        encoded = [encode_tokens(toks, self.vocab_, self.max_len) for toks in token_lists]
        train_encoded = [e for e, v in zip(encoded, val_mask) if not v]
        val_encoded = [e for e, v in zip(encoded, val_mask) if v]
        train_y = labels[~val_mask]
        val_y = labels[val_mask]
        if not val_encoded:
            val_encoded, val_y = train_encoded, train_y

        pretrained = training_mod.pretrain_vae(train_tokens, config, self.vocab_)
        vae_params, head, history, best_epoch = training_mod._train_core(
            train_encoded, train_y, val_encoded, val_y,
            tuple(self.classes_.tolist()), self.task, config,
            pretrained.params, frozen=(self.mode == "frozen-baseline"))

        self.vae_ = vae_params
        self.head_ = head
        self.history_ = history
        self.best_epoch_ = best_epoch
        self.n_features_in_ = 1
        return self

    def _encode(self, X) -> list:
        texts = _validate_texts(X)
        return [encode_tokens(tokenize(t), self.vocab_, self.max_len) for t in texts]

    def predict(self, X):
        """Most probable class per text (deterministic, z = mu)."""
        check_is_fitted(self, "head_")
        encoded = self._encode(X)
        idx = training_mod.predict_indices(self.vae_, self.head_, encoded)
        return self.classes_[idx]

    def predict_proba(self, X):
        """Class probabilities per text, columns aligned with classes_."""
        check_is_fitted(self, "head_")
        encoded = self._encode(X)
        out = np.empty((len(encoded), len(self.classes_)))
        for start in range(0, len(encoded), 64):
            chunk = encoded[start : start + 64]
            ids, mask = pad_batch(chunk)
            mu, _ = vae_mod.encode(self.vae_.encoder, ids, mask)
            probs = heads_mod.head_forward(self.head_, mu)
            out[start : start + len(chunk)] = probs.data
        return out

    def transform(self, X):
        """Latent means (n_texts, latent_dim): the learned representation."""
        check_is_fitted(self, "head_")
        encoded = self._encode(X)
        out = np.empty((len(encoded), self.latent_dim))
        for start in range(0, len(encoded), 64):
            chunk = encoded[start : start + 64]
            ids, mask = pad_batch(chunk)
            mu, _ = vae_mod.encode(self.vae_.encoder, ids, mask)
            out[start : start + len(chunk)] = mu.data
        return out
