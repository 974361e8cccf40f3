"""LSTM sequence models on top of the tensor engine.

The cell follows the standard formulation with a single concatenated
input: each gate reads [h_prev, x_t] through its own weight matrix of
shape (H, H + D).

    f_t = sigmoid(W_f [h_prev, x_t] + b_f)
    i_t = sigmoid(W_i [h_prev, x_t] + b_i)
    cbar_t = tanh(W_C [h_prev, x_t] + b_C)
    C_t = f_t * C_prev + i_t * cbar_t
    o_t = sigmoid(W_o [h_prev, x_t] + b_o)
    h_t = o_t * tanh(C_t)

All step functions are batched: states and inputs carry a leading batch
dimension.  For padded batches, ``lstm_step`` takes an optional per-row
mask that freezes the state of finished sequences, so the final state of
a padded run matches a run at the true length.

For speed the four gate products are fused: the weight matrices are
stacked into one (4H, H+D) block so a step costs one matmul.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from vroc import autodiff as ad
from vroc.autodiff import Tensor, param


@dataclass
class LSTMCellParams:
    """Weights of one LSTM layer.

    Each matrix has shape (hidden, hidden + input_dim) and acts on the
    concatenation [h_prev, x_t]; each bias has length hidden.
    """

    w_f: Tensor
    w_i: Tensor
    w_c: Tensor
    w_o: Tensor
    b_f: Tensor
    b_i: Tensor
    b_c: Tensor
    b_o: Tensor

    @property
    def hidden_size(self) -> int:
        return self.w_f.shape[0]

    @property
    def input_dim(self) -> int:
        return self.w_f.shape[1] - self.w_f.shape[0]

    def tensors(self) -> list[Tensor]:
        return [self.w_f, self.w_i, self.w_c, self.w_o,
                self.b_f, self.b_i, self.b_c, self.b_o]


@dataclass
class LSTMState:
    """Hidden and cell activations, each of shape (batch, hidden)."""

    h: Tensor
    c: Tensor


def init_lstm(rng: np.random.Generator, hidden: int, input_dim: int,
              name: str = "lstm") -> LSTMCellParams:
    """Uniform(-k, k) weights with k = 1/sqrt(hidden); the forget-gate
    bias starts at 1 so early training does not erase the cell state."""
    if hidden < 1 or input_dim < 1:
        raise ValueError(f"init_lstm: sizes must be positive, got hidden={hidden}, input_dim={input_dim}")
    k = 1.0 / math.sqrt(hidden)

    def w(tag):
        return ad.uniform_init(rng, (hidden, hidden + input_dim), k, name=f"{name}.w_{tag}")

    return LSTMCellParams(
        w_f=w("f"), w_i=w("i"), w_c=w("c"), w_o=w("o"),
        b_f=param(np.ones(hidden), name=f"{name}.b_f"),
        b_i=param(np.zeros(hidden), name=f"{name}.b_i"),
        b_c=param(np.zeros(hidden), name=f"{name}.b_c"),
        b_o=param(np.zeros(hidden), name=f"{name}.b_o"),
    )


def zero_state(batch: int, hidden: int) -> LSTMState:
    return LSTMState(h=Tensor(np.zeros((batch, hidden))),
                     c=Tensor(np.zeros((batch, hidden))))


@dataclass
class _FusedCell:
    """Per-sequence cache: gate weights stacked and pre-transposed."""

    wt: Tensor      # (H + D, 4H), column blocks ordered f, i, c, o
    bias: Tensor    # (4H,)
    hidden: int


def _fuse(cell: LSTMCellParams) -> _FusedCell:
    stacked = ad.concat([cell.w_f, cell.w_i, cell.w_c, cell.w_o], axis=0)
    bias = ad.concat([cell.b_f, cell.b_i, cell.b_c, cell.b_o], axis=0)
    return _FusedCell(wt=ad.transpose(stacked), bias=bias, hidden=cell.hidden_size)


def _fused_step(fused: _FusedCell, x: Tensor, state: LSTMState,
                mask: np.ndarray | None = None) -> LSTMState:
    h_prev, c_prev = state.h, state.c
    joint = ad.concat([h_prev, x], axis=1)
    gates = ad.add(ad.matmul(joint, fused.wt), fused.bias)
    hs = fused.hidden
    f = ad.sigmoid(ad.slice_axis(gates, 1, 0, hs))
    i = ad.sigmoid(ad.slice_axis(gates, 1, hs, 2 * hs))
    cbar = ad.tanh(ad.slice_axis(gates, 1, 2 * hs, 3 * hs))
    o = ad.sigmoid(ad.slice_axis(gates, 1, 3 * hs, 4 * hs))
    c = ad.add(ad.mul(f, c_prev), ad.mul(i, cbar))
    h = ad.mul(o, ad.tanh(c))
    if mask is not None:
        m = Tensor(mask.reshape(-1, 1).astype(np.float64))
        keep = Tensor(1.0 - m.data)
        h = ad.add(ad.mul(m, h), ad.mul(keep, h_prev))
        c = ad.add(ad.mul(m, c), ad.mul(keep, c_prev))
    return LSTMState(h=h, c=c)


def lstm_step(cell: LSTMCellParams, x: Tensor, state: LSTMState,
              mask: np.ndarray | None = None) -> LSTMState:
    """Advance one timestep.

    ``x`` has shape (batch, input_dim) and ``state`` fields (batch,
    hidden).  ``mask`` (optional, shape (batch,)) holds 1.0 for rows
    whose sequence is still running and 0.0 for rows that should keep
    their previous state unchanged.
    """
    if x.ndim != 2 or x.shape[1] != cell.input_dim:
        raise ValueError(
            f"lstm_step: input shape {tuple(x.shape)} does not match input_dim {cell.input_dim}"
        )
    if state.h.shape != (x.shape[0], cell.hidden_size):
        raise ValueError(
            f"lstm_step: state shape {tuple(state.h.shape)} does not match "
            f"(batch={x.shape[0]}, hidden={cell.hidden_size})"
        )
    return _fused_step(_fuse(cell), x, state, mask)


def lstm_forward(cell: LSTMCellParams, xs: list[Tensor],
                 state: LSTMState | None = None,
                 masks: list[np.ndarray] | None = None,
                 return_all: bool = True):
    """Run a whole sequence left to right.

    ``xs`` is a list of (batch, input_dim) tensors, one per timestep;
    empty sequences are rejected.  Returns (outputs, final_state) where
    outputs is the list of per-step hidden states (or None when
    ``return_all`` is off).
    """
    if not xs:
        raise ValueError("lstm_forward: empty sequence")
    batch = xs[0].shape[0]
    if state is None:
        state = zero_state(batch, cell.hidden_size)
    fused = _fuse(cell)
    outputs = [] if return_all else None
    for t, x in enumerate(xs):
        mask = masks[t] if masks is not None else None
        state = _fused_step(fused, x, state, mask)
        if return_all:
            outputs.append(state.h)
    return outputs, state


def bilstm_forward(fwd_cell: LSTMCellParams, bwd_cell: LSTMCellParams,
                   xs: list[Tensor]):
    """Bidirectional pass: the forward cell reads xs left to right, the
    backward cell reads the reversed sequence, and per-step outputs are
    the two directions concatenated (width 2H, backward half re-reversed
    into input order).  Returns (outputs, final_fwd_state,
    final_bwd_state)."""
    if fwd_cell.hidden_size != bwd_cell.hidden_size:
        raise ValueError(
            f"bilstm_forward: direction sizes differ "
            f"({fwd_cell.hidden_size} vs {bwd_cell.hidden_size})"
        )
    f_out, f_state = lstm_forward(fwd_cell, xs)
    b_out_rev, b_state = lstm_forward(bwd_cell, list(reversed(xs)))
    b_out = list(reversed(b_out_rev))
    outputs = [ad.concat([f, b], axis=1) for f, b in zip(f_out, b_out)]
    return outputs, f_state, b_state
