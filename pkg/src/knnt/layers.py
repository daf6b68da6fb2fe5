"""Multi-layer LSTM stacks shared by the language model and transducer nets.

Two execution paths cover the two usage patterns:

* ``run_lstm_stack`` consumes a whole (T, B, I) batch on the tape for
  training, one fused ``lstm_sequence`` node per layer;
* ``step_lstm_stack`` advances one frame of raw float64 state for
  incremental decoding, no tape involved.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .autodiff import Tensor, lstm_sequence
from .params import ParameterStore, add_lstm


def add_lstm_stack(store: ParameterStore, prefix: str, input_dim: int,
                   hidden_dim: int, layers: int, rng: np.random.Generator):
    for i in range(layers):
        add_lstm(store, f"{prefix}.l{i}", input_dim if i == 0 else hidden_dim,
                 hidden_dim, rng)


def run_lstm_stack(store: ParameterStore, prefix: str, x: Tensor,
                   layers: int) -> Tensor:
    """Run the stack over a (T, B, I) tensor; returns top-layer (T, B, H)."""
    batch = x.shape[1]
    out = x
    for i in range(layers):
        wx = store[f"{prefix}.l{i}.wx"]
        wh = store[f"{prefix}.l{i}.wh"]
        b = store[f"{prefix}.l{i}.b"]
        hidden = wh.shape[0]
        h0 = Tensor(np.zeros((batch, hidden)))
        c0 = Tensor(np.zeros((batch, hidden)))
        out = lstm_sequence(out, h0, c0, wx, wh, b)
    return out


def init_stack_state(layers: int, batch: int, hidden_dim: int) -> list:
    """Zero (h, c) pairs, one per layer."""
    return [(np.zeros((batch, hidden_dim)), np.zeros((batch, hidden_dim)))
            for _ in range(layers)]


def step_lstm_stack(store: ParameterStore, prefix: str, x: np.ndarray,
                    state: list) -> tuple[np.ndarray, list]:
    """One frame through the stack on raw arrays; returns (h_top, new_state)."""
    new_state = []
    out = np.ascontiguousarray(x, dtype=np.float64)
    for i, (h, c) in enumerate(state):
        h2, c2 = kernels.lstm_step(
            out, h, c,
            store[f"{prefix}.l{i}.wx"].data,
            store[f"{prefix}.l{i}.wh"].data,
            store[f"{prefix}.l{i}.b"].data)
        new_state.append((h2, c2))
        out = h2
    return out, new_state
