"""Training orchestration: VAE pretraining, co-training of (VAE, head)
sets, the frozen two-stage baseline, early stopping and the evaluation
protocols.

Each task trains its own VAE copy starting from shared pretrained
weights.  Co-training minimizes

    loss = -L_mc + lambda_task * L_task

with gradients flowing into both the head and the VAE; the frozen
baseline runs the identical loop but only head parameters are trainable.
The per-epoch history records L_mc and the task loss recomputed at the
end of the epoch over the training batches in fixed order with frozen
noise (dropout off, the same eps stream every epoch), so a recorded
value can be reproduced exactly from that epoch's checkpoint.  Early
stopping watches validation macro-F1.

All randomness derives from ``config.seed`` through salted generators:
salt 0 pretraining, salt 1 set training, salt 2 the frozen evaluation
noise, salt 3 the joint mode.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from vroc import autodiff as ad
from vroc import heads as heads_mod
from vroc import metrics as metrics_mod
from vroc import vae as vae_mod
from vroc.autodiff import Adam, Dense, Tape, Tensor, backward, clip_global_norm
from vroc.lstm import LSTMCellParams
from vroc.text import (Dataset, Example, Vocabulary, build_vocab, encode_tokens,
                       pad_batch, split_holdout, split_leave_one_out, tokenize)

log = logging.getLogger(__name__)

MODES = ("cotrain", "frozen-baseline")
TRACKING_MODES = ("binary", "five-way")

# recognizable PHEME event names, in the order reports list them
_EVENT_ORDER_HINTS = ("sydney", "germanwings", "ferguson", "charlie", "ottawa")


@dataclass
class CoTrainConfig:
    """Every knob of a training run; JSON round-trippable.

    ``max_len`` caps the encoded sequence length including BOS and EOS
    (default 36 = 34 tokens plus the two markers).  ``query_event``
    names the story that binary tracking labels are derived against.
    ``joint`` switches on the single-VAE four-term objective instead of
    per-set training.  ``kl_scale`` multiplies the annealed KL weight;
    0 trains a plain autoencoder (useful for overfitting checks).
    """

    lambda_detection: float = 1.0
    lambda_tracking: float = 1.0
    lambda_stance: float = 1.0
    lambda_veracity: float = 1.0
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    patience: int = 5
    seed: int = 0
    kl_anneal_epochs: int = 10
    kl_scale: float = 1.0
    mode: str = "cotrain"
    pretrain_epochs: int = 10
    n_samples: int = 1
    embed_dim: int = 32
    hidden_size: int = 32
    latent_dim: int = 32
    head_steps: int = 8
    dropout: float = 0.2
    clip_norm: float = 5.0
    max_len: int = 36
    min_freq: int = 2
    val_fraction: float = 0.1
    tracking_mode: str = "binary"
    query_event: str | None = None
    class_weighting: bool = False
    joint: bool = False

    def lambda_for(self, task: str) -> float:
        try:
            return getattr(self, f"lambda_{task}")
        except AttributeError:
            raise ValueError(f"CoTrainConfig: unknown task {task!r}") from None

    def validate(self) -> "CoTrainConfig":
        for task in heads_mod.TASKS:
            lam = self.lambda_for(task)
            if lam < 0:
                raise ValueError(f"CoTrainConfig: lambda_{task} must be >= 0, got {lam}")
        if self.patience < 1:
            raise ValueError(f"CoTrainConfig: patience must be >= 1, got {self.patience}")
        if self.epochs < 0 or self.pretrain_epochs < 0:
            raise ValueError("CoTrainConfig: epoch counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError(f"CoTrainConfig: batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"CoTrainConfig: learning_rate must be > 0, got {self.learning_rate}")
        if self.kl_anneal_epochs < 0:
            raise ValueError("CoTrainConfig: kl_anneal_epochs must be >= 0")
        if self.kl_scale < 0:
            raise ValueError(f"CoTrainConfig: kl_scale must be >= 0, got {self.kl_scale}")
        if self.mode not in MODES:
            raise ValueError(f"CoTrainConfig: mode must be one of {list(MODES)}, got {self.mode!r}")
        if self.tracking_mode not in TRACKING_MODES:
            raise ValueError(
                f"CoTrainConfig: tracking_mode must be one of {list(TRACKING_MODES)}, "
                f"got {self.tracking_mode!r}"
            )
        if self.n_samples < 1:
            raise ValueError("CoTrainConfig: n_samples must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"CoTrainConfig: dropout must be in [0, 1), got {self.dropout}")
        if self.max_len < 3:
            raise ValueError(f"CoTrainConfig: max_len must be >= 3, got {self.max_len}")
        if self.min_freq < 1:
            raise ValueError(f"CoTrainConfig: min_freq must be >= 1, got {self.min_freq}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("CoTrainConfig: val_fraction must be in (0, 1)")
        if self.latent_dim % self.head_steps != 0:
            raise ValueError(
                f"CoTrainConfig: head_steps={self.head_steps} must divide "
                f"latent_dim={self.latent_dim}"
            )
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CoTrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(
                f"CoTrainConfig: unknown config key(s) {sorted(unknown)}; "
                f"known keys: {sorted(known)}"
            )
        return cls(**data).validate()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "CoTrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class EpochRecord:
    epoch: int
    elbo: float
    task_loss: float
    val_macro_f1: float


@dataclass
class PretrainRecord:
    epoch: int
    loss: float
    val_elbo: float


@dataclass
class PretrainResult:
    params: vae_mod.VAEParams
    vocab: Vocabulary
    history: list
    best_epoch: int


@dataclass
class TrainedSet:
    """One trained (VAE, head) pair with its training record."""

    task: str
    config: CoTrainConfig
    vocab: Vocabulary
    vae: vae_mod.VAEParams
    head: heads_mod.TaskHead
    history: list = field(default_factory=list)
    best_epoch: int = -1

    @property
    def classes(self) -> tuple:
        return self.head.classes

    def tensors(self) -> list[Tensor]:
        return self.vae.tensors() + self.head.tensors()


def history_tsv(history) -> str:
    """Per-epoch history as TSV: epoch, the recorded L_mc (elbo), the
    task loss, and validation macro-F1; floats use repr so identical
    runs produce identical bytes."""
    lines = ["epoch\telbo\ttask_loss\tval_macro_f1"]
    for rec in history:
        lines.append(f"{rec.epoch}\t{rec.elbo!r}\t{rec.task_loss!r}\t{rec.val_macro_f1!r}")
    return "\n".join(lines) + "\n"


def pretrain_history_tsv(history) -> str:
    lines = ["epoch\tloss\tval_elbo"]
    for rec in history:
        lines.append(f"{rec.epoch}\t{rec.loss!r}\t{rec.val_elbo!r}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# parameter plumbing
# ---------------------------------------------------------------------------

def _clone_tensor(t: Tensor) -> Tensor:
    return Tensor(t.data.copy(), requires_grad=t.requires_grad, name=t.name)


def _clone_dense(d: Dense) -> Dense:
    return Dense(w=_clone_tensor(d.w), b=_clone_tensor(d.b))


def _clone_cell(c: LSTMCellParams) -> LSTMCellParams:
    return LSTMCellParams(*[_clone_tensor(t) for t in c.tensors()])


def clone_vae(params: vae_mod.VAEParams) -> vae_mod.VAEParams:
    enc, dec = params.encoder, params.decoder
    return vae_mod.VAEParams(
        encoder=vae_mod.EncoderParams(
            embedding=_clone_tensor(enc.embedding),
            lstm1=_clone_cell(enc.lstm1),
            lstm2=_clone_cell(enc.lstm2),
            mu_proj=_clone_dense(enc.mu_proj),
            logvar_proj=_clone_dense(enc.logvar_proj),
        ),
        decoder=vae_mod.DecoderParams(
            init_h1=_clone_dense(dec.init_h1),
            init_h2=_clone_dense(dec.init_h2),
            lstm1=_clone_cell(dec.lstm1),
            lstm2=_clone_cell(dec.lstm2),
            out=_clone_dense(dec.out),
        ),
    )


def _snapshot(tensors) -> list[np.ndarray]:
    return [t.data.copy() for t in tensors]


def _restore(tensors, snapshot) -> None:
    for t, arr in zip(tensors, snapshot):
        t.data = arr.copy()


def _set_requires_grad(tensors, flag: bool) -> None:
    for t in tensors:
        t.requires_grad = flag


# ---------------------------------------------------------------------------
# labels and encoding
# ---------------------------------------------------------------------------

def event_class_order(events) -> tuple:
    """Deterministic class order for five-way tracking: the five known
    story names in their customary order when all events match one,
    otherwise sorted."""
    events = list(dict.fromkeys(events))

    def hint(ev: str):
        low = ev.lower()
        for i, h in enumerate(_EVENT_ORDER_HINTS):
            if h in low:
                return i
        return None

    hints = [hint(ev) for ev in events]
    if all(h is not None for h in hints) and len(set(hints)) == len(hints):
        return tuple(ev for _, ev in sorted(zip(hints, events)))
    return tuple(sorted(events))


def tracking_label(example: Example, config: CoTrainConfig) -> str:
    """Derive the tracking label from the example's event."""
    if config.tracking_mode == "five-way":
        return example.event
    if config.query_event is None:
        raise ValueError(
            "binary tracking needs config.query_event: the story that "
            "Related/Unrelated is judged against"
        )
    return "Related" if example.event == config.query_event else "Unrelated"


def task_label(example: Example, task: str, config: CoTrainConfig) -> str | None:
    if task == "tracking":
        return tracking_label(example, config)
    return example.label(task)


def task_classes(task: str, config: CoTrainConfig, examples=None) -> tuple:
    if task == "tracking" and config.tracking_mode == "five-way":
        if not examples:
            raise ValueError("five-way tracking needs examples to enumerate events")
        return event_class_order(ex.event for ex in examples)
    return heads_mod.LABEL_SETS[task]


def encode_examples(examples, vocab: Vocabulary, max_len: int) -> list:
    return [encode_tokens(ex.tokens, vocab, max_len) for ex in examples]


def _labeled_subset(examples, task: str, config: CoTrainConfig):
    """(examples, labels) restricted to rows carrying the task's label."""
    kept, labels = [], []
    for ex in examples:
        lab = task_label(ex, task, config)
        if lab is not None:
            kept.append(ex)
            labels.append(lab)
    if not kept:
        raise ValueError(f"no examples carry a {task} label")
    return kept, labels


# ---------------------------------------------------------------------------
# loss snapshots (the recorded history values)
# ---------------------------------------------------------------------------

def _fixed_batches(n: int, batch_size: int) -> list[np.ndarray]:
    return [np.arange(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]


def _eval_rng(config: CoTrainConfig) -> np.random.Generator:
    return np.random.default_rng([config.seed, 2])


def training_loss_snapshot(vae_params, head, encoded, y, config: CoTrainConfig):
    """(mean generative objective, mean task loss) over the data in fixed
    batch order with dropout off and a frozen eps stream: identical
    inputs and parameters always reproduce identical values.

    The generative value is log p(x|z) + kl_scale * (log p(z) - log q(z|x)),
    the quantity training maximizes; with the default kl_scale of 1 this
    is exactly the Monte Carlo ELBO."""
    rng = _eval_rng(config)
    total_elbo = 0.0
    total_task = 0.0
    n = len(encoded)
    for idx in _fixed_batches(n, config.batch_size):
        ids, mask = pad_batch([encoded[i] for i in idx])
        eps = rng.standard_normal((config.n_samples, len(idx), config.latent_dim))
        _, parts = vae_mod.elbo_mc(vae_params, ids, mask, config.n_samples,
                                   training=False, eps=eps)
        value = (parts["log_px"].item()
                 + config.kl_scale * (parts["log_pz"].item() - parts["log_qz"].item()))
        total_elbo += value * len(idx)
        if head is not None:
            probs = heads_mod.head_forward(head, parts["latent"].z)
            task_loss = heads_mod.head_loss(head, probs, y[idx])
            total_task += task_loss.item() * len(idx)
    return total_elbo / n, (total_task / n if head is not None else 0.0)


def predict_indices(vae_params, head, encoded, batch_size: int = 64) -> np.ndarray:
    """Deterministic class predictions (z = mu, no dropout)."""
    out = np.empty(len(encoded), dtype=np.intp)
    for idx in _fixed_batches(len(encoded), batch_size):
        ids, mask = pad_batch([encoded[i] for i in idx])
        mu, _ = vae_mod.encode(vae_params.encoder, ids, mask)
        probs = heads_mod.head_forward(head, mu)
        out[idx] = np.argmax(probs.data, axis=1)
    return out


def _val_macro_f1(vae_params, head, encoded, y) -> float:
    preds = predict_indices(vae_params, head, encoded)
    cm = metrics_mod.confusion_matrix(y, preds, head.n_classes, head.classes)
    return metrics_mod.compute_metrics(cm).macro_f1


def kl_weight_for_epoch(epoch: int, kl_anneal_epochs: int) -> float:
    """Linear 0 -> 1 over the first ``kl_anneal_epochs`` epochs; a zero
    annealing span means the full weight from the start."""
    if kl_anneal_epochs <= 0:
        return 1.0
    return min(1.0, epoch / kl_anneal_epochs)


def early_stop_check(values, patience: int):
    """(stop, best_index) for a history of validation scores: best is the
    argmax (earliest on ties, improvement must be strict), and training
    stops once ``patience`` consecutive epochs failed to improve."""
    if patience < 1:
        raise ValueError(f"early_stop_check: patience must be >= 1, got {patience}")
    values = list(values)
    if not values:
        return False, -1
    best = 0
    for i, v in enumerate(values):
        if v > values[best]:
            best = i
    return (len(values) - 1 - best) >= patience, best


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

def _as_examples(data):
    if isinstance(data, Dataset):
        return list(data.examples)
    return list(data)


def _token_lists(data) -> list:
    out = []
    for item in _as_examples(data):
        if isinstance(item, Example):
            out.append(list(item.tokens))
        elif isinstance(item, str):
            out.append(tokenize(item))
        else:
            out.append(list(item))
    return out


def pretrain_vae(data, config: CoTrainConfig, vocab: Vocabulary | None = None,
                 val_data=None) -> PretrainResult:
    """Train the VAE alone on -L_mc with KL annealing.

    ``data`` is a Dataset, a list of Examples, or raw strings.  A
    validation slice (config.val_fraction) is held out, or ``val_data``
    is used verbatim when given (pass the training data itself to select
    by training ELBO, e.g. for overfitting runs); the returned
    parameters are those of the epoch with the best validation ELBO.
    Zero epochs returns the initialization unchanged.
    """
    config.validate()
    token_lists = _token_lists(data)
    if not token_lists:
        raise ValueError("pretrain_vae: empty dataset")
    if vocab is None:
        vocab = build_vocab(token_lists, config.min_freq)
    encoded = [encode_tokens(toks, vocab, config.max_len) for toks in token_lists]

    rng = np.random.default_rng([config.seed, 0])
    params = vae_mod.init_vae(rng, len(vocab), config.embed_dim,
                              config.hidden_size, config.latent_dim)

    if val_data is not None:
        train_set = encoded
        val_set = [encode_tokens(toks, vocab, config.max_len)
                   for toks in _token_lists(val_data)]
        if not val_set:
            raise ValueError("pretrain_vae: empty validation data")
    else:
        n = len(encoded)
        n_val = int(round(n * config.val_fraction))
        n_val = min(max(n_val, 1 if n > 1 else 0), n - 1)
        order = rng.permutation(n)
        val_set = [encoded[i] for i in order[:n_val]]
        train_set = [encoded[i] for i in order[n_val:]]
        if not val_set:
            log.warning("pretrain_vae: dataset too small for a validation slice; "
                        "using the training data for model selection")
            val_set = train_set

    tensors = params.tensors()
    opt = Adam(tensors, lr=config.learning_rate)
    history: list[PretrainRecord] = []
    best_epoch = -1
    best_val = -math.inf
    best_params = None

    for epoch in range(config.pretrain_epochs):
        kl_w = config.kl_scale * kl_weight_for_epoch(epoch, config.kl_anneal_epochs)
        for b, idx in enumerate(_shuffled_batches(len(train_set), config.batch_size, rng)):
            ids, mask = pad_batch([train_set[i] for i in idx])
            with Tape() as tape:
                loss, _ = vae_mod.elbo_mc(params, ids, mask, config.n_samples, rng,
                                          kl_weight=kl_w, training=True,
                                          dropout_rate=config.dropout)
            if not math.isfinite(loss.item()):
                raise RuntimeError(
                    f"pretrain_vae: non-finite loss at epoch {epoch}, batch {b}"
                )
            backward(tape, loss)
            clip_global_norm(tensors, config.clip_norm)
            opt.step()
            opt.zero_grad()
        train_loss, _ = training_loss_snapshot(params, None, train_set, None, config)
        val_elbo, _ = training_loss_snapshot(params, None, val_set, None, config)
        history.append(PretrainRecord(epoch=epoch, loss=-train_loss, val_elbo=val_elbo))
        if val_elbo > best_val:
            best_val = val_elbo
            best_epoch = epoch
            best_params = _snapshot(tensors)

    if best_params is not None:
        _restore(tensors, best_params)
    return PretrainResult(params=params, vocab=vocab, history=history,
                          best_epoch=best_epoch)


def _shuffled_batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# co-training core
# ---------------------------------------------------------------------------

def _train_core(train_encoded, train_y, val_encoded, val_y, classes, task: str,
                config: CoTrainConfig, vae_init: vae_mod.VAEParams,
                frozen: bool) -> tuple:
    """Shared loop behind cotrain_set / train_frozen_baseline / the
    estimator: integer labels in, (vae, head, history, best_epoch) out."""
    rng = np.random.default_rng([config.seed, 1])
    vae_params = clone_vae(vae_init)
    class_weights = None
    if config.class_weighting and len(classes) > 2:
        class_weights = heads_mod.inverse_frequency_weights(train_y, len(classes))
    head = heads_mod.init_head(rng, task, classes, config.latent_dim,
                               config.hidden_size, config.head_steps,
                               class_weights=class_weights)
    vae_tensors = vae_params.tensors()
    if frozen:
        _set_requires_grad(vae_tensors, False)
    trainable = head.tensors() if frozen else vae_tensors + head.tensors()
    opt = Adam(trainable, lr=config.learning_rate)
    lam = config.lambda_for(task)

    train_y = np.asarray(train_y, dtype=np.intp)
    val_y = np.asarray(val_y, dtype=np.intp)
    history: list[EpochRecord] = []
    val_scores: list[float] = []
    best_params = _snapshot(vae_tensors + head.tensors())
    best_epoch = -1

    for epoch in range(config.epochs):
        kl_w = config.kl_scale * kl_weight_for_epoch(epoch, config.kl_anneal_epochs)
        for b, idx in enumerate(_shuffled_batches(len(train_encoded), config.batch_size, rng)):
            ids, mask = pad_batch([train_encoded[i] for i in idx])
            with Tape() as tape:
                vae_loss, parts = vae_mod.elbo_mc(
                    vae_params, ids, mask, config.n_samples, rng,
                    kl_weight=kl_w, training=True, dropout_rate=config.dropout)
                probs = heads_mod.head_forward(head, parts["latent"].z)
                task_loss = heads_mod.head_loss(head, probs, train_y[idx])
                combined = ad.add(vae_loss, ad.mul(task_loss, lam))
            if not math.isfinite(combined.item()):
                raise RuntimeError(
                    f"{task} training: non-finite loss at epoch {epoch}, batch {b}"
                )
            backward(tape, combined)
            clip_global_norm(trainable, config.clip_norm)
            opt.step()
            opt.zero_grad()

        elbo, task_mean = training_loss_snapshot(vae_params, head, train_encoded,
                                                 train_y, config)
        val_f1 = _val_macro_f1(vae_params, head, val_encoded, val_y)
        history.append(EpochRecord(epoch=epoch, elbo=elbo, task_loss=task_mean,
                                   val_macro_f1=val_f1))
        val_scores.append(val_f1)
        stop, best = early_stop_check(val_scores, config.patience)
        if best_epoch != best:
            best_epoch = best
            best_params = _snapshot(vae_tensors + head.tensors())
        if stop:
            break

    _restore(vae_tensors + head.tensors(), best_params)
    if frozen:
        _set_requires_grad(vae_tensors, True)
    return vae_params, head, history, best_epoch


def _prepare_set(dataset, task: str, config: CoTrainConfig,
                 pretrained: PretrainResult | None, vocab: Vocabulary | None,
                 val_dataset):
    """Labels, vocabulary, encodings and the pretrained VAE for one set."""
    examples, labels = _labeled_subset(_as_examples(dataset), task, config)
    classes = task_classes(task, config, examples)

    if val_dataset is not None:
        val_examples, val_labels = _labeled_subset(_as_examples(val_dataset), task, config)
    else:
        ds = Dataset(tuple(examples))
        lab_fn = lambda ex: task_label(ex, task, config)
        train_ds, val_ds = split_holdout(ds, config.val_fraction, config.seed, lab_fn)
        if len(val_ds) == 0:
            log.warning("%s training: no validation slice possible; early stopping "
                        "will watch the training data", task)
            train_ds, val_ds = ds, ds
        examples = list(train_ds.examples)
        labels = [task_label(ex, task, config) for ex in examples]
        val_examples = list(val_ds.examples)
        val_labels = [task_label(ex, task, config) for ex in val_examples]

    unknown = sorted({lab for lab in labels + val_labels if lab not in classes})
    if unknown:
        raise ValueError(f"{task}: label(s) {unknown} missing from class set {list(classes)}")

    if pretrained is None:
        pretrained = pretrain_vae(examples, config, vocab)
    vocab = vocab if vocab is not None else pretrained.vocab

    class_of = {c: i for i, c in enumerate(classes)}
    train_encoded = encode_examples(examples, vocab, config.max_len)
    train_y = np.array([class_of[lab] for lab in labels], dtype=np.intp)
    val_encoded = encode_examples(val_examples, vocab, config.max_len)
    val_y = np.array([class_of[lab] for lab in val_labels], dtype=np.intp)
    return (classes, vocab, pretrained, train_encoded, train_y, val_encoded, val_y)


def cotrain_set(dataset, task: str, config: CoTrainConfig,
                pretrained: PretrainResult | None = None,
                vocab: Vocabulary | None = None,
                val_dataset=None) -> TrainedSet:
    """Co-train one (VAE, head) set on ``task``.

    The VAE starts from ``pretrained`` (run here when omitted) and both
    the head and the VAE receive gradients.  ``val_dataset`` supplies
    the early-stopping data; without it a stratified slice of
    ``dataset`` is held out.  Returns best-epoch parameters.
    """
    if task not in heads_mod.TASKS:
        raise ValueError(f"cotrain_set: unknown task {task!r}; expected one of {list(heads_mod.TASKS)}")
    config.validate()
    (classes, vocab, pretrained, train_encoded, train_y,
     val_encoded, val_y) = _prepare_set(dataset, task, config, pretrained, vocab, val_dataset)
    frozen = config.mode == "frozen-baseline"
    vae_params, head, history, best_epoch = _train_core(
        train_encoded, train_y, val_encoded, val_y, classes, task, config,
        pretrained.params, frozen)
    return TrainedSet(task=task, config=config, vocab=vocab, vae=vae_params,
                      head=head, history=history, best_epoch=best_epoch)


def train_frozen_baseline(dataset, task: str, config: CoTrainConfig,
                          pretrained: PretrainResult | None = None,
                          vocab: Vocabulary | None = None,
                          val_dataset=None) -> TrainedSet:
    """Two-stage baseline: pretrain the VAE, freeze it, and train only
    the head on its latent codes.  Everything else (batching, noise,
    dropout, early stopping) matches cotrain_set."""
    config = dataclasses.replace(config, mode="frozen-baseline")
    return cotrain_set(dataset, task, config, pretrained, vocab, val_dataset)


def cotrain_joint(dataset, config: CoTrainConfig,
                  pretrained: PretrainResult | None = None,
                  vocab: Vocabulary | None = None,
                  val_dataset=None) -> dict:
    """Single-VAE study mode: one VAE co-trained against all four task
    losses at once, each weighted by its lambda and computed over the
    examples that carry that task's label.  Early stopping watches the
    mean validation macro-F1 across tasks.  Returns task -> TrainedSet
    views sharing the one VAE."""
    config.validate()
    examples = _as_examples(dataset)
    if not examples:
        raise ValueError("cotrain_joint: empty dataset")
    if val_dataset is not None:
        val_examples = _as_examples(val_dataset)
    else:
        ds = Dataset(tuple(examples))
        train_ds, val_ds = split_holdout(ds, config.val_fraction, config.seed)
        examples, val_examples = list(train_ds.examples), list(val_ds.examples)
        if not val_examples:
            val_examples = examples

    if pretrained is None:
        pretrained = pretrain_vae(examples, config, vocab)
    vocab = vocab if vocab is not None else pretrained.vocab

    rng = np.random.default_rng([config.seed, 3])
    vae_params = clone_vae(pretrained.params)

    tasks = []
    for task in heads_mod.TASKS:
        try:
            _labeled_subset(examples, task, config)
        except ValueError:
            continue
        tasks.append(task)
    if not tasks:
        raise ValueError("cotrain_joint: no task has labels in this dataset")

    heads = {}
    train_rows, train_y, val_rows, val_y = {}, {}, {}, {}
    for task in tasks:
        classes = task_classes(task, config, examples)
        heads[task] = heads_mod.init_head(rng, task, classes, config.latent_dim,
                                          config.hidden_size, config.head_steps)
        class_of = {c: i for i, c in enumerate(classes)}
        rows, ys = [], []
        for i, ex in enumerate(examples):
            lab = task_label(ex, task, config)
            if lab is not None:
                rows.append(i)
                ys.append(class_of[lab])
        train_rows[task] = np.array(rows, dtype=np.intp)
        train_y[task] = np.array(ys, dtype=np.intp)
        v_rows, v_ys = [], []
        for i, ex in enumerate(val_examples):
            lab = task_label(ex, task, config)
            if lab is not None and lab in class_of:
                v_rows.append(i)
                v_ys.append(class_of[lab])
        val_rows[task] = np.array(v_rows, dtype=np.intp)
        val_y[task] = np.array(v_ys, dtype=np.intp)

    encoded = encode_examples(examples, vocab, config.max_len)
    val_encoded = encode_examples(val_examples, vocab, config.max_len)

    all_tensors = vae_params.tensors() + [t for task in tasks for t in heads[task].tensors()]
    opt = Adam(all_tensors, lr=config.learning_rate)
    histories: dict[str, list] = {task: [] for task in tasks}
    val_scores: list[float] = []
    best_params = _snapshot(all_tensors)
    best_epoch = -1

    for epoch in range(config.epochs):
        kl_w = config.kl_scale * kl_weight_for_epoch(epoch, config.kl_anneal_epochs)
        for b, idx in enumerate(_shuffled_batches(len(encoded), config.batch_size, rng)):
            ids, mask = pad_batch([encoded[i] for i in idx])
            with Tape() as tape:
                loss, parts = vae_mod.elbo_mc(vae_params, ids, mask, config.n_samples,
                                              rng, kl_weight=kl_w, training=True,
                                              dropout_rate=config.dropout)
                z = parts["latent"].z
                pos_of = {int(g): j for j, g in enumerate(idx)}
                for task in tasks:
                    local = [(pos_of[int(g)], y) for g, y in zip(train_rows[task], train_y[task])
                             if int(g) in pos_of]
                    if not local:
                        continue
                    rows = np.array([r for r, _ in local], dtype=np.intp)
                    ys = np.array([y for _, y in local], dtype=np.intp)
                    z_rows = ad.embedding_lookup(z, rows)
                    probs = heads_mod.head_forward(heads[task], z_rows)
                    task_loss = heads_mod.head_loss(heads[task], probs, ys)
                    loss = ad.add(loss, ad.mul(task_loss, config.lambda_for(task)))
            if not math.isfinite(loss.item()):
                raise RuntimeError(f"joint training: non-finite loss at epoch {epoch}, batch {b}")
            backward(tape, loss)
            clip_global_norm(all_tensors, config.clip_norm)
            opt.step()
            opt.zero_grad()

        f1s = []
        for task in tasks:
            elbo, task_mean = training_loss_snapshot(
                vae_params, heads[task],
                [encoded[i] for i in train_rows[task]], train_y[task], config)
            if len(val_rows[task]):
                preds = predict_indices(vae_params, heads[task],
                                        [val_encoded[i] for i in val_rows[task]])
                cm = metrics_mod.confusion_matrix(val_y[task], preds,
                                                  heads[task].n_classes,
                                                  heads[task].classes)
                f1 = metrics_mod.compute_metrics(cm).macro_f1
            else:
                f1 = 0.0
            f1s.append(f1)
            histories[task].append(EpochRecord(epoch=epoch, elbo=elbo,
                                               task_loss=task_mean, val_macro_f1=f1))
        val_scores.append(float(np.mean(f1s)))
        stop, best = early_stop_check(val_scores, config.patience)
        if best_epoch != best:
            best_epoch = best
            best_params = _snapshot(all_tensors)
        if stop:
            break

    _restore(all_tensors, best_params)
    return {task: TrainedSet(task=task, config=config, vocab=vocab, vae=vae_params,
                             head=heads[task], history=histories[task],
                             best_epoch=best_epoch)
            for task in tasks}


# ---------------------------------------------------------------------------
# evaluation plumbing
# ---------------------------------------------------------------------------

def evaluate_set(tset: TrainedSet, data) -> metrics_mod.MetricsReport:
    """Metrics for a trained set over labeled examples (z = mu)."""
    examples, labels = _labeled_subset(_as_examples(data), tset.task, tset.config)
    class_of = {c: i for i, c in enumerate(tset.classes)}
    unknown = sorted({lab for lab in labels if lab not in class_of})
    if unknown:
        raise ValueError(
            f"evaluate_set: label(s) {unknown} missing from class set {list(tset.classes)}"
        )
    encoded = encode_examples(examples, tset.vocab, tset.config.max_len)
    golds = np.array([class_of[lab] for lab in labels], dtype=np.intp)
    preds = predict_indices(tset.vae, tset.head, encoded)
    cm = metrics_mod.confusion_matrix(golds, preds, len(tset.classes), tset.classes)
    return metrics_mod.compute_metrics(cm)


def train_for_mode(dataset, task: str, config: CoTrainConfig,
                   pretrained=None, vocab=None, val_dataset=None) -> TrainedSet:
    if config.mode == "frozen-baseline":
        return train_frozen_baseline(dataset, task, config, pretrained, vocab, val_dataset)
    return cotrain_set(dataset, task, config, pretrained, vocab, val_dataset)


def run_protocol_impl(dataset, task: str, protocol: str, config: CoTrainConfig,
                      held_out_event: str | None = None):
    """(reports, trained sets) for one protocol; see metrics.run_protocol
    for the public contract."""
    config.validate()

    def label_fn(ex):
        return task_label(ex, task, config)

    if protocol == "holdout":
        train_ds, test_ds = split_holdout(dataset, config.val_fraction,
                                          config.seed, label_fn)
        tset = train_for_mode(train_ds, task, config, val_dataset=test_ds)
        report = evaluate_set(tset, test_ds)
        return {"holdout": report}, {"holdout": tset}

    if protocol == "leave-one-out":
        if held_out_event is None:
            raise ValueError("run_protocol: leave-one-out needs a held-out event")
        if task == "tracking" and config.query_event == held_out_event:
            raise ValueError(
                "run_protocol: the binary-tracking query event cannot also be "
                "held out; training would contain a single class"
            )
        train_ds, test_ds = split_leave_one_out(dataset, held_out_event)
        tset = train_for_mode(train_ds, task, config)
        report = evaluate_set(tset, test_ds)
        return {held_out_event: report}, {held_out_event: tset}

    if protocol == "leave-one-out-all-events":
        events = dataset.events
        if len(events) < 2:
            raise ValueError("run_protocol: leave-one-out-all-events needs at least 2 events")
        reports: dict = {}
        tsets: dict = {}
        for event in events:
            rep, ts = run_protocol_impl(dataset, task, "leave-one-out", config, event)
            reports[event] = rep[event]
            tsets[event] = ts[event]
        reports["aggregate"] = metrics_mod.aggregate_reports(reports[e] for e in events)
        return reports, tsets

    raise ValueError(f"run_protocol: unknown protocol {protocol!r}")


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_set(tset: TrainedSet, out_dir) -> dict:
    """Write checkpoint.bin, vocab.txt, config.json, set.json and
    history.tsv into ``out_dir``; returns the path map."""
    import os

    from vroc import checkpoint as ckpt

    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "checkpoint": os.path.join(out_dir, "checkpoint.bin"),
        "vocab": os.path.join(out_dir, "vocab.txt"),
        "config": os.path.join(out_dir, "config.json"),
        "set": os.path.join(out_dir, "set.json"),
        "history": os.path.join(out_dir, "history.tsv"),
    }
    ckpt.save_tensors(paths["checkpoint"], tset.tensors())
    tset.vocab.save(paths["vocab"])
    tset.config.save(paths["config"])
    with open(paths["set"], "w", encoding="utf-8") as fh:
        json.dump({"task": tset.task, "classes": list(tset.classes),
                   "best_epoch": tset.best_epoch, "vocab_size": len(tset.vocab)},
                  fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(paths["history"], "w", encoding="utf-8") as fh:
        fh.write(history_tsv(tset.history))
    return paths


def load_set(out_dir) -> TrainedSet:
    """Rebuild a TrainedSet from a save_set directory."""
    import os

    from vroc import checkpoint as ckpt

    config = CoTrainConfig.load(os.path.join(out_dir, "config.json"))
    with open(os.path.join(out_dir, "set.json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    vocab = Vocabulary.load(os.path.join(out_dir, "vocab.txt"))
    if len(vocab) != meta["vocab_size"]:
        raise ValueError(
            f"load_set: vocab.txt has {len(vocab)} entries, set.json says {meta['vocab_size']}"
        )
    rng = np.random.default_rng(0)
    vae_params = vae_mod.init_vae(rng, len(vocab), config.embed_dim,
                                  config.hidden_size, config.latent_dim)
    head = heads_mod.init_head(rng, meta["task"], tuple(meta["classes"]),
                               config.latent_dim, config.hidden_size,
                               config.head_steps)
    tensors = vae_params.tensors() + head.tensors()
    ckpt.load_into_tensors(os.path.join(out_dir, "checkpoint.bin"), tensors)
    return TrainedSet(task=meta["task"], config=config, vocab=vocab,
                      vae=vae_params, head=head, history=[],
                      best_epoch=meta["best_epoch"])
