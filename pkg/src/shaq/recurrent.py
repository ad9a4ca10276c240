"""Recurrent cells over ``[T, B, d]`` sequences: the LSTM baseline and the QRNN.

Both cells are pure functions of (input, state, parameters) and return the
state needed to continue the sequence in a later call, so a long stream can
be processed window by window with identical results.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Module, uniform
from .tensor import Parameter, Tensor, ShapeError

_sigmoid = T._sigmoid


# ---------------------------------------------------------------------------
# Fused scans (sequential in time, hand-written backward)
# ---------------------------------------------------------------------------


def lstm_scan(x_proj: Tensor, w_hh: Tensor, h0: Tensor, c0: Tensor) -> Tensor:
    """Run the LSTM recurrence given precomputed input projections.

    ``x_proj`` is ``[T, B, 4H]`` (input, forget, cell, output gate order, bias
    included).  Returns ``[T, B, 2, H]`` with hidden states in slot 0 and cell
    states in slot 1.
    """
    steps, batch, four_h = x_proj.shape
    hidden = four_h // 4
    if w_hh.shape != (hidden, four_h):
        raise ShapeError(f"recurrent weight {w_hh.shape} does not match gate width {four_h}")
    if h0.shape != (batch, hidden) or c0.shape != (batch, hidden):
        raise ShapeError(f"state shapes {h0.shape}/{c0.shape} do not match (batch={batch}, hidden={hidden})")

    xp, whh = x_proj.data, w_hh.data
    dtype = xp.dtype
    out = np.empty((steps, batch, 2, hidden), dtype=dtype)
    gates = np.empty((steps, batch, four_h), dtype=dtype)  # post-activation
    tanh_c = np.empty((steps, batch, hidden), dtype=dtype)
    h, c = h0.data, c0.data
    for t in range(steps):
        a = xp[t] + h @ whh
        g = gates[t]
        g[:, : 2 * hidden] = _sigmoid(a[:, : 2 * hidden])
        g[:, 2 * hidden : 3 * hidden] = np.tanh(a[:, 2 * hidden : 3 * hidden])
        g[:, 3 * hidden :] = _sigmoid(a[:, 3 * hidden :])
        i, f, gg, o = g[:, :hidden], g[:, hidden : 2 * hidden], g[:, 2 * hidden : 3 * hidden], g[:, 3 * hidden :]
        c = f * c + i * gg
        tanh_c[t] = np.tanh(c)
        h = o * tanh_c[t]
        out[t, :, 0] = h
        out[t, :, 1] = c

    def backward(grad):
        h_prev = np.concatenate([h0.data[None], out[:-1, :, 0]], axis=0)
        c_prev = np.concatenate([c0.data[None], out[:-1, :, 1]], axis=0)
        d_act = np.empty_like(gates)
        dh_next = np.zeros((batch, hidden), dtype=dtype)
        dc_next = np.zeros((batch, hidden), dtype=dtype)
        whh_t = whh.T
        for t in range(steps - 1, -1, -1):
            g = gates[t]
            i, f, gg, o = g[:, :hidden], g[:, hidden : 2 * hidden], g[:, 2 * hidden : 3 * hidden], g[:, 3 * hidden :]
            tc = tanh_c[t]
            dh = grad[t, :, 0] + dh_next
            dc = grad[t, :, 1] + dc_next + dh * o * (1.0 - tc * tc)
            da = d_act[t]
            da[:, :hidden] = dc * gg * i * (1.0 - i)
            da[:, hidden : 2 * hidden] = dc * c_prev[t] * f * (1.0 - f)
            da[:, 2 * hidden : 3 * hidden] = dc * i * (1.0 - gg * gg)
            da[:, 3 * hidden :] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = da @ whh_t
        d_whh = h_prev.reshape(-1, hidden).T @ d_act.reshape(-1, four_h)
        return d_act, d_whh, dh_next, dc_next

    return T._make(out, (x_proj, w_hh, h0, c0), backward)


def fo_pool_scan(forget: Tensor, z: Tensor, c0: Tensor) -> Tensor:
    """Cell states of ``c_t = f_t * c_{t-1} + (1 - f_t) * z_t``, shape ``[T, B, H]``.

    The pool has no parameters of its own; it is a per-feature linear scan.
    """
    if forget.shape != z.shape or forget.shape[1:] != c0.shape:
        raise ShapeError(f"fo-pool shapes disagree: F {forget.shape}, Z {z.shape}, c0 {c0.shape}")
    fd, zd = forget.data, z.data
    steps = fd.shape[0]
    cells = np.empty_like(zd)
    c = c0.data
    for t in range(steps):
        c = fd[t] * c + (1.0 - fd[t]) * zd[t]
        cells[t] = c

    def backward(grad):
        c_prev = np.concatenate([c0.data[None], cells[:-1]], axis=0)
        d_f = np.empty_like(fd)
        d_z = np.empty_like(zd)
        dc_next = np.zeros_like(c0.data)
        for t in range(steps - 1, -1, -1):
            dc = grad[t] + dc_next
            d_f[t] = dc * (c_prev[t] - zd[t])
            d_z[t] = dc * (1.0 - fd[t])
            dc_next = dc * fd[t]
        return d_f, d_z, dc_next

    return T._make(cells, (forget, z, c0), backward)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


@dataclass
class LstmState:
    h: Tensor
    c: Tensor

    def detach(self) -> LstmState:
        return LstmState(self.h.detach(), self.c.detach())


class LSTM(Module):
    """Single-layer LSTM with one bias vector per gate block.

    Weights are uniform in ``±1/sqrt(hidden)``; the forget-gate bias starts at
    1.0 and every other bias at 0.
    """

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, forget_bias: float = 1.0):
        bound = 1.0 / math.sqrt(hidden)
        self.d_in, self.hidden = d_in, hidden
        self.w_ih = uniform(rng, (d_in, 4 * hidden), bound)
        self.w_hh = uniform(rng, (hidden, 4 * hidden), bound)
        bias = np.zeros(4 * hidden, dtype=T.get_default_dtype())
        bias[hidden : 2 * hidden] = forget_bias
        self.bias = Parameter(bias)

    @staticmethod
    def param_count(d_in: int, hidden: int) -> int:
        return 4 * (d_in * hidden + hidden * hidden + hidden)

    def initial_state(self, batch: int) -> LstmState:
        dtype = self.w_ih.dtype
        return LstmState(Tensor(np.zeros((batch, self.hidden), dtype)), Tensor(np.zeros((batch, self.hidden), dtype)))

    def forward(self, x: Tensor, state: LstmState | None = None) -> tuple[Tensor, LstmState]:
        if x.ndim != 3 or x.shape[-1] != self.d_in:
            raise ShapeError(f"LSTM expects [T, B, {self.d_in}] input, got {x.shape}")
        if state is None:
            state = self.initial_state(x.shape[1])
        seq = lstm_scan(x @ self.w_ih + self.bias, self.w_hh, state.h, state.c)
        return seq[:, :, 0], LstmState(seq[-1, :, 0], seq[-1, :, 1])


def lstm_forward(x: Tensor, state: LstmState | None, cell: LSTM) -> tuple[Tensor, LstmState]:
    return cell(x, state)


# ---------------------------------------------------------------------------
# QRNN
# ---------------------------------------------------------------------------


@dataclass
class QrnnState:
    """Final pooled cell state plus the last ``window - 1`` raw inputs."""

    c: Tensor
    tail: np.ndarray  # [window - 1, B, d_in], never part of a graph

    def detach(self) -> QrnnState:
        return QrnnState(self.c.detach(), self.tail)


class QRNN(Module):
    """Causal width-``window`` convolution producing Z, F, O gates, then fo-pooling.

    ``weight[k]`` multiplies the input ``window - 1 - k`` steps in the past;
    gate columns are laid out as ``[z | f | o]``.
    """

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator, window: int = 2):
        if window < 1:
            raise ValueError(f"QRNN window must be >= 1, got {window}")
        self.d_in, self.hidden, self.window = d_in, hidden, window
        bound = 1.0 / math.sqrt(hidden)
        self.weight = uniform(rng, (window, d_in, 3 * hidden), bound)
        self.bias = Parameter(np.zeros(3 * hidden, dtype=T.get_default_dtype()))

    @staticmethod
    def param_count(d_in: int, hidden: int, window: int = 2) -> int:
        return 3 * (window * d_in * hidden + hidden)

    def initial_state(self, batch: int) -> QrnnState:
        dtype = self.weight.dtype
        return QrnnState(
            Tensor(np.zeros((batch, self.hidden), dtype)),
            np.zeros((self.window - 1, batch, self.d_in), dtype),
        )

    def conv(self, x: Tensor, tail: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        if x.ndim != 3 or x.shape[-1] != self.d_in:
            raise ShapeError(f"QRNN expects [T, B, {self.d_in}] input, got {x.shape}")
        expected_tail = (self.window - 1, x.shape[1], self.d_in)
        if tail.shape != expected_tail:
            raise ShapeError(f"QRNN tail must be {expected_tail}, got {tail.shape}")
        steps, hid = x.shape[0], self.hidden
        padded = T.concat([Tensor(tail), x], axis=0) if self.window > 1 else x
        gates = None
        for k in range(self.window):
            term = padded[k : k + steps] @ self.weight[k]
            gates = term if gates is None else gates + term
        gates = gates + self.bias
        z = T.tanh(gates[..., :hid])
        f = T.sigmoid(gates[..., hid : 2 * hid])
        o = T.sigmoid(gates[..., 2 * hid :])
        return z, f, o

    def forward(self, x: Tensor, state: QrnnState | None = None) -> tuple[Tensor, QrnnState]:
        if state is None:
            state = self.initial_state(x.shape[1])
        z, f, o = self.conv(x, state.tail)
        h, c_last = qrnn_fo_pool(z, f, o, state.c)
        history = np.concatenate([state.tail, x.data], axis=0)
        tail = history[history.shape[0] - (self.window - 1) :].copy()
        return h, QrnnState(c_last, tail)


def qrnn_conv(x: Tensor, tail: np.ndarray, cell: QRNN) -> tuple[Tensor, Tensor, Tensor]:
    return cell.conv(x, tail)


def qrnn_fo_pool(z: Tensor, f: Tensor, o: Tensor, c0: Tensor) -> tuple[Tensor, Tensor]:
    """``h_t = o_t * c_t`` over the pooled cell states; returns ``(h, c_T)``."""
    cells = fo_pool_scan(f, z, c0)
    return o * cells, cells[-1]


def qrnn_forward(x: Tensor, state: QrnnState | None, cell: QRNN) -> tuple[Tensor, QrnnState]:
    return cell(x, state)
