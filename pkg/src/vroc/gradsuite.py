"""Finite-difference verification suite.

Runs grad_check over every tensor primitive, the LSTM step, the full
ELBO with frozen noise, and each head loss, on freshly randomized
instances.  Shared by the `gradcheck` CLI subcommand and the acceptance
tests.  Every check must come in under 1e-4 relative error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vroc import autodiff as ad
from vroc import heads as heads_mod
from vroc import vae as vae_mod
from vroc.autodiff import Tensor, grad_check, param
from vroc.lstm import LSTMCellParams, LSTMState, lstm_step
from vroc.text import BOS_ID, EOS_ID

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    instances: int
    max_error: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _rand_cell(rng, hidden, input_dim, scale=0.4) -> LSTMCellParams:
    def w():
        return param(rng.uniform(-scale, scale, size=(hidden, hidden + input_dim)))

    def b():
        return param(rng.uniform(-scale, scale, size=hidden))

    return LSTMCellParams(w_f=w(), w_i=w(), w_c=w(), w_o=w(),
                          b_f=b(), b_i=b(), b_c=b(), b_o=b())


def _primitive_checks(rng, instances) -> list:
    """One (name, factory) per primitive; each factory returns (f, params)."""

    def shapes():
        m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
        return m, k, n

    def two(same_shape=True, offset=0.0):
        m, k, _ = shapes()
        a = param(rng.normal(size=(m, k)))
        b = param(rng.normal(size=(m, k) if same_shape else (1, k)) + offset)
        return a, b

    def check_binary(op, offset=0.0):
        a, b = two(offset=offset)
        return (lambda a, b: ad.tmean(op(a, b))), [a, b]

    def check_unary(op, positive=False):
        m, k, _ = shapes()
        data = rng.normal(size=(m, k))
        x = param(np.abs(data) + 0.5 if positive else data)
        return (lambda x: ad.tmean(op(x))), [x]

    def check_matmul():
        m, k, n = shapes()
        a = param(rng.normal(size=(m, k)))
        b = param(rng.normal(size=(k, n)))
        return (lambda a, b: ad.tmean(ad.tanh(ad.matmul(a, b)))), [a, b]

    def check_softmax(fn):
        m, k, _ = shapes()
        x = param(rng.normal(size=(m, k)))
        w = rng.normal(size=(m, k))
        return (lambda x: ad.tsum(ad.mul(fn(x), w))), [x]

    def check_concat():
        m, k, n = shapes()
        a = param(rng.normal(size=(m, k)))
        b = param(rng.normal(size=(m, n)))
        return (lambda a, b: ad.tmean(ad.tanh(ad.concat([a, b], axis=1)))), [a, b]

    def check_slice():
        m, k, _ = shapes()
        x = param(rng.normal(size=(m, k + 2)))
        lo = int(rng.integers(0, 2))
        return (lambda x: ad.tmean(ad.slice_axis(x, 1, lo, lo + k))), [x]

    def check_embedding():
        rows, dim, n = shapes()
        table = param(rng.normal(size=(rows + 2, dim)))
        ids = rng.integers(0, rows + 2, size=n + 1)
        return (lambda t: ad.tmean(ad.tanh(ad.embedding_lookup(t, ids)))), [table]

    def check_gather():
        m, k, _ = shapes()
        x = param(rng.normal(size=(m, k)))
        idx = rng.integers(0, k, size=m)
        return (lambda x: ad.tmean(ad.gather_cols(x, idx))), [x]

    def check_dropout():
        m, k, _ = shapes()
        x = param(rng.normal(size=(m, k)))
        mask_seed = int(rng.integers(0, 2**31))

        def f(x):
            frozen = np.random.default_rng(mask_seed)
            return ad.tmean(ad.dropout(x, 0.4, frozen, training=True))

        return f, [x]

    def check_sum_mean():
        m, k, _ = shapes()
        x = param(rng.normal(size=(m, k)))
        axis = int(rng.integers(0, 2))
        return (lambda x: ad.tmean(ad.tanh(ad.tsum(x, axis=axis)))), [x]

    def check_reshape():
        m, k, _ = shapes()
        x = param(rng.normal(size=(m, k)))
        return (lambda x: ad.tmean(ad.tanh(ad.reshape(x, (k, m))))), [x]

    def check_transpose():
        m, k, _ = shapes()
        x = param(rng.normal(size=(m, k)))
        return (lambda x: ad.tmean(ad.tanh(ad.transpose(x)))), [x]

    def check_clamp():
        m, k, _ = shapes()
        x = param(rng.normal(scale=2.0, size=(m, k)))
        # keep sample points away from the clamp edges where the
        # derivative jumps and finite differences are meaningless
        x.data[np.abs(np.abs(x.data) - 1.5) < 0.01] = 0.0
        return (lambda x: ad.tmean(ad.clamp(x, -1.5, 1.5))), [x]

    table = [
        ("add", lambda: check_binary(ad.add)),
        ("sub", lambda: check_binary(ad.sub)),
        ("mul", lambda: check_binary(ad.mul)),
        ("div", lambda: check_binary(ad.div, offset=3.0)),
        ("matmul", check_matmul),
        ("sigmoid", lambda: check_unary(ad.sigmoid)),
        ("tanh", lambda: check_unary(ad.tanh)),
        ("exp", lambda: check_unary(ad.exp)),
        ("log", lambda: check_unary(ad.log, positive=True)),
        ("softmax", lambda: check_softmax(ad.softmax)),
        ("log_softmax", lambda: check_softmax(ad.log_softmax)),
        ("concat", check_concat),
        ("slice", check_slice),
        ("embedding_lookup", check_embedding),
        ("gather_cols", check_gather),
        ("dropout", check_dropout),
        ("sum", check_sum_mean),
        ("mean", lambda: ((lambda x: ad.tanh(ad.tmean(x))), [param(rng.normal(size=(3, 2)))])),
        ("reshape", check_reshape),
        ("transpose", check_transpose),
        ("clamp", check_clamp),
    ]
    return [(name, factory, instances) for name, factory in table]


def _lstm_step_check(rng):
    hidden = int(rng.integers(2, 5))
    input_dim = int(rng.integers(1, 5))
    batch = int(rng.integers(1, 4))
    cell = _rand_cell(rng, hidden, input_dim)
    x = param(rng.normal(size=(batch, input_dim)))
    h0 = param(rng.normal(size=(batch, hidden)))
    c0 = param(rng.normal(size=(batch, hidden)))

    def f(*_):
        state = lstm_step(cell, x, LSTMState(h=h0, c=c0))
        return ad.add(ad.tmean(ad.tanh(state.h)), ad.tmean(ad.mul(state.c, state.c)))

    return f, cell.tensors() + [x, h0, c0]


def _elbo_check(rng):
    vs, embed, hidden, latent = 9, 3, 3, 3
    params = vae_mod.init_vae(rng, vs, embed, hidden, latent)
    length = int(rng.integers(1, 4))
    interior = rng.integers(4, vs, size=length)
    ids = np.array([[BOS_ID, *interior, EOS_ID]])
    eps = rng.standard_normal((1, 1, latent))

    def f(*_):
        loss, _ = vae_mod.elbo_mc(params, ids, n_samples=1, training=False, eps=eps)
        return loss

    return f, params.tensors()


def _binary_ce_check(rng):
    batch = int(rng.integers(1, 5))
    logits = param(rng.normal(size=(batch, 1)))
    y = rng.integers(0, 2, size=batch)

    def f(x):
        p = ad.reshape(ad.sigmoid(x), (-1,))
        return heads_mod.binary_ce(p, y)

    return f, [logits]


def _categorical_ce_check(rng):
    batch = int(rng.integers(1, 5))
    n_classes = int(rng.integers(3, 6))
    logits = param(rng.normal(size=(batch, n_classes)))
    y = rng.integers(0, n_classes, size=batch)

    def f(x):
        return heads_mod.categorical_ce(ad.softmax(x, axis=1), y)

    return f, [logits]


def _head_loss_check(rng, task, n_classes):
    latent = 4
    steps = 2
    head = heads_mod.init_head(rng, task,
                               tuple(str(i) for i in range(n_classes)),
                               latent_dim=latent, hidden=3, steps=steps)
    batch = int(rng.integers(1, 4))
    z = param(rng.normal(size=(batch, latent)))
    y = rng.integers(0, n_classes, size=batch)

    def f(*_):
        probs = heads_mod.head_forward(head, z)
        return heads_mod.head_loss(head, probs, y)

    return f, head.tensors() + [z]


def run_suite(seed: int = 0, instances_per_primitive: int = 4,
              step: float = 1e-5) -> list:
    """Run every check; returns CheckResult rows (>= 100 instances in
    total across the suite)."""
    rng = np.random.default_rng(seed)
    results = []

    for name, factory, instances in _primitive_checks(rng, instances_per_primitive):
        worst = 0.0
        for _ in range(instances):
            f, params = factory()
            worst = max(worst, grad_check(f, params, step=step))
        results.append(CheckResult(name=f"primitive:{name}", instances=instances,
                                   max_error=worst))

    worst = 0.0
    n_lstm = 6
    for _ in range(n_lstm):
        f, params = _lstm_step_check(rng)
        worst = max(worst, grad_check(f, params, step=step))
    results.append(CheckResult(name="lstm_step", instances=n_lstm, max_error=worst))

    worst = 0.0
    n_elbo = 4
    for _ in range(n_elbo):
        f, params = _elbo_check(rng)
        worst = max(worst, grad_check(f, params, step=step))
    results.append(CheckResult(name="elbo", instances=n_elbo, max_error=worst))

    for name, maker in (("loss:binary_ce", _binary_ce_check),
                        ("loss:categorical_ce", _categorical_ce_check)):
        worst = 0.0
        for _ in range(3):
            f, params = maker(rng)
            worst = max(worst, grad_check(f, params, step=step))
        results.append(CheckResult(name=name, instances=3, max_error=worst))

    for task, n_classes in (("detection", 2), ("tracking", 2),
                            ("stance", 4), ("veracity", 3)):
        f, params = _head_loss_check(rng, task, n_classes)
        err = grad_check(f, params, step=step)
        results.append(CheckResult(name=f"head:{task}", instances=1, max_error=err))

    return results


def format_results(results) -> str:
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name.ljust(width)}  x{r.instances:<3d}  "
                     f"max rel err {r.max_error:.3e}  {status}")
    total = sum(r.instances for r in results)
    worst = max(r.max_error for r in results)
    lines.append(f"{len(results)} checks, {total} instances, worst {worst:.3e}")
    return "\n".join(lines)
