"""Task classification heads.

Each of the four tasks (detection, tracking, stance, veracity) gets its
own head: the latent vector is reshaped into a short sequence (k steps
of d_z/k dims each), run through a BiLSTM (H=32 per direction), and the
two final states feed a dense output layer.  Binary tasks use a single
sigmoid output; multiclass tasks use a softmax.

Integer encodings are fixed: detection {Nonrumor: 0, Rumor: 1}, binary
tracking {Unrelated: 0, Related: 1} (five-way tracking uses event ids in
listed order), stance {Support: 0, Deny: 1, Comment: 2, Query: 3},
veracity {True: 0, False: 1, Unverified: 2}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vroc import autodiff as ad
from vroc.autodiff import Dense, Tensor, dense, init_dense
from vroc.lstm import LSTMCellParams, bilstm_forward, init_lstm

PROB_FLOOR = 1e-7

TASKS = ("detection", "tracking", "stance", "veracity")

DETECTION_CLASSES = ("Nonrumor", "Rumor")
TRACKING_CLASSES = ("Unrelated", "Related")
STANCE_CLASSES = ("Support", "Deny", "Comment", "Query")
VERACITY_CLASSES = ("True", "False", "Unverified")

LABEL_SETS = {
    "detection": DETECTION_CLASSES,
    "tracking": TRACKING_CLASSES,
    "stance": STANCE_CLASSES,
    "veracity": VERACITY_CLASSES,
}


@dataclass
class TaskHead:
    """BiLSTM-over-latent classifier for one task.

    ``steps`` (k) splits the latent vector into k chunks of d_z/k dims;
    binary heads have a single sigmoid output unit, multiclass heads one
    softmax unit per class.  ``class_weights``, when set, rescales the
    per-class loss (inverse-frequency weighting).
    """

    task: str
    classes: tuple
    steps: int
    fwd: LSTMCellParams
    bwd: LSTMCellParams
    out: Dense
    class_weights: np.ndarray | None = None

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def binary(self) -> bool:
        return self.out.w.shape[0] == 1

    @property
    def latent_dim(self) -> int:
        return self.steps * self.fwd.input_dim

    def class_index(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise ValueError(
                f"{self.task} head: unknown label {label!r}; classes are {list(self.classes)}"
            ) from None

    def tensors(self) -> list[Tensor]:
        return self.fwd.tensors() + self.bwd.tensors() + [self.out.w, self.out.b]


def init_head(rng: np.random.Generator, task: str, classes=None,
              latent_dim: int = 32, hidden: int = 32, steps: int = 8,
              class_weights: np.ndarray | None = None,
              name: str | None = None) -> TaskHead:
    """Build a head for ``task``; ``classes`` defaults to the task's
    standard label set.  ``steps`` must divide the latent dimension."""
    if task not in TASKS:
        raise ValueError(f"init_head: unknown task {task!r}; expected one of {list(TASKS)}")
    classes = tuple(classes) if classes is not None else LABEL_SETS[task]
    if len(classes) < 2:
        raise ValueError(f"init_head: need at least 2 classes, got {classes}")
    if latent_dim % steps != 0:
        raise ValueError(
            f"init_head: steps={steps} does not divide latent_dim={latent_dim}"
        )
    n_out = 1 if len(classes) == 2 else len(classes)
    prefix = name or f"head.{task}"
    return TaskHead(
        task=task,
        classes=classes,
        steps=steps,
        fwd=init_lstm(rng, hidden, latent_dim // steps, name=f"{prefix}.fwd"),
        bwd=init_lstm(rng, hidden, latent_dim // steps, name=f"{prefix}.bwd"),
        out=init_dense(rng, n_out, 2 * hidden, name=f"{prefix}.out"),
        class_weights=class_weights,
    )


def head_forward(head: TaskHead, z: Tensor) -> Tensor:
    """Class probabilities for latent codes ``z`` (batch, d_z).

    The latent is cut into ``head.steps`` consecutive chunks forming a
    sequence, the BiLSTM runs over it, and the concatenated final states
    of the two directions feed the output layer.  Rows sum to 1.
    """
    if not isinstance(z, Tensor):
        z = Tensor(z)
    if z.ndim == 1:
        z = ad.reshape(z, (1, -1))
    if z.shape[1] != head.latent_dim:
        raise ValueError(
            f"head_forward: latent width {z.shape[1]} does not match "
            f"{head.steps} steps x {head.fwd.input_dim} dims"
        )
    width = head.fwd.input_dim
    xs = [ad.slice_axis(z, 1, k * width, (k + 1) * width) for k in range(head.steps)]
    _, f_state, b_state = bilstm_forward(head.fwd, head.bwd, xs)
    joint = ad.concat([f_state.h, b_state.h], axis=1)
    logits = dense(joint, head.out)
    if head.binary:
        p = ad.sigmoid(logits)
        return ad.concat([ad.sub(1.0, p), p], axis=1)
    return ad.softmax(logits, axis=1)


def binary_ce(p: Tensor, y) -> Tensor:
    """Mean Bernoulli cross-entropy -[y log p + (1-y) log(1-p)] over the
    batch; ``p`` is the positive-class probability (batch,) and ``y``
    holds 0/1 labels.  Probabilities are clamped to [1e-7, 1-1e-7]."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != tuple(p.shape):
        raise ValueError(f"binary_ce: label shape {y.shape} does not match {tuple(p.shape)}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("binary_ce: labels must be 0 or 1")
    p = ad.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    pos = ad.mul(ad.log(p), Tensor(y))
    neg = ad.mul(ad.log(ad.sub(1.0, p)), Tensor(1.0 - y))
    return ad.mul(ad.tmean(ad.add(pos, neg)), -1.0)


def categorical_ce(dist: Tensor, y, class_weights: np.ndarray | None = None) -> Tensor:
    """Mean categorical cross-entropy -log dist[y] over the batch;
    ``dist`` is (batch, classes) and ``y`` integer class indices.
    ``class_weights`` rescales each example's loss by its class."""
    y = np.asarray(y, dtype=np.intp)
    if dist.ndim != 2:
        raise ValueError(f"categorical_ce: dist must be 2-D, got shape {tuple(dist.shape)}")
    if y.shape != (dist.shape[0],):
        raise ValueError(f"categorical_ce: label shape {y.shape} does not match {dist.shape[0]} rows")
    if y.size and (y.min() < 0 or y.max() >= dist.shape[1]):
        bad = int(y[(y < 0) | (y >= dist.shape[1])][0])
        raise ValueError(f"categorical_ce: class index {bad} out of range [0, {dist.shape[1]})")
    picked = ad.gather_cols(ad.clamp(dist, PROB_FLOOR, 1.0 - PROB_FLOOR), y)
    logp = ad.log(picked)
    if class_weights is not None:
        w = np.asarray(class_weights, dtype=np.float64)[y]
        logp = ad.mul(logp, Tensor(w))
    return ad.mul(ad.tmean(logp), -1.0)


def head_loss(head: TaskHead, probs: Tensor, y) -> Tensor:
    """Task loss for ``probs`` from head_forward against integer labels:
    Bernoulli form for binary heads, categorical otherwise."""
    if head.binary:
        return binary_ce(ad.reshape(ad.slice_axis(probs, 1, 1, 2), (-1,)), y)
    return categorical_ce(probs, y, head.class_weights)


def predict_label(head: TaskHead, z) -> str:
    """Most probable class for a single latent vector; exact ties go to
    the lowest class index."""
    probs = head_forward(head, z)
    return head.classes[int(np.argmax(probs.data[0]))]


def predict_batch(head: TaskHead, z) -> list[str]:
    """predict_label over a batch of latent codes."""
    probs = head_forward(head, z)
    return [head.classes[int(i)] for i in np.argmax(probs.data, axis=1)]


def inverse_frequency_weights(labels, n_classes: int) -> np.ndarray:
    """Per-class weights proportional to 1/count, normalized to mean 1;
    classes absent from ``labels`` get weight 0."""
    counts = np.bincount(np.asarray(labels, dtype=np.intp), minlength=n_classes)
    weights = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
    present = weights > 0
    if present.any():
        weights = weights / weights[present].mean()
    return weights
