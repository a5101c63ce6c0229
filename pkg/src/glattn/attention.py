"""Global and local soft attention over the encoder's feature grid.

Global attention scores every region once per image (tanh of an affine map,
then softmax across regions) and yields the coarse context used to
initialize the decoder states. Local attention re-scores the regions at
every decoding step from the previous hidden state, through a small MLP,
yielding the per-step dynamic context.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class AttentionMap:
    """Nonnegative weights over the L regions, summing to 1."""

    tensor: Tensor  # (L,)

    def __post_init__(self):
        w = self.tensor.values
        if w.ndim != 1:
            raise ValueError(f"AttentionMap: expected a vector, got shape {w.shape}")
        if w.min() < 0.0 or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("AttentionMap: weights must be nonnegative and sum to 1")

    @property
    def weights(self):
        return self.tensor.values

    def as_grid(self, grid_h, grid_w):
        return self.weights.reshape(grid_h, grid_w)


class GlobalAttnParams:
    """Region scorer (affine to a scalar) plus the two state-init maps."""

    def __init__(self, channels, hidden, seed=0):
        rng = np.random.default_rng([seed, 0xA])
        self.w_score = ag.parameter(_glorot(rng, (channels,), channels, 1))
        self.b_score = ag.parameter(np.zeros(1))
        self.w_cell = ag.parameter(_glorot(rng, (channels, hidden), channels, hidden))
        self.b_cell = ag.parameter(np.zeros(hidden))
        self.w_hidden = ag.parameter(_glorot(rng, (channels, hidden), channels, hidden))
        self.b_hidden = ag.parameter(np.zeros(hidden))

    @property
    def hidden_size(self):
        return self.w_cell.values.shape[1]

    def tensors(self):
        return {
            "global_attn/w_score": self.w_score,
            "global_attn/b_score": self.b_score,
            "global_attn/w_cell": self.w_cell,
            "global_attn/b_cell": self.b_cell,
            "global_attn/w_hidden": self.w_hidden,
            "global_attn/b_hidden": self.b_hidden,
        }


class LocalAttnParams:
    """One-hidden-layer scorer over (region vector, previous hidden state).

    The input weights are stored as two blocks (region part and state part);
    applying them and summing equals running the concatenated input through
    a single (channels + hidden) x mlp_hidden matrix.
    """

    def __init__(self, channels, hidden, mlp_hidden=32, seed=0):
        rng = np.random.default_rng([seed, 0xB])
        fan_in = channels + hidden
        self.w_region = ag.parameter(_glorot(rng, (channels, mlp_hidden), fan_in, mlp_hidden))
        self.w_state = ag.parameter(_glorot(rng, (hidden, mlp_hidden), fan_in, mlp_hidden))
        self.b_mlp = ag.parameter(np.zeros(mlp_hidden))
        self.w_out = ag.parameter(_glorot(rng, (mlp_hidden,), mlp_hidden, 1))
        self.b_out = ag.parameter(np.zeros(1))

    def tensors(self):
        return {
            "local_attn/w_region": self.w_region,
            "local_attn/w_state": self.w_state,
            "local_attn/b_mlp": self.b_mlp,
            "local_attn/w_out": self.w_out,
            "local_attn/b_out": self.b_out,
        }


def _glorot(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def global_attention(grid, params):
    """Score all regions once; return (AttentionMap, context vector).

    Weights are softmax over regions of tanh(w . a_i + b); the context is the
    weight-averaged region vector.
    """
    if grid.regions == 0:
        raise ValueError("global_attention: empty feature grid")
    scores = ag.tanh(ag.add(ag.matmul(grid.data, params.w_score), params.b_score))
    weights = ag.softmax(scores)
    context = ag.matmul(weights, grid.data)
    return AttentionMap(weights), context


def init_states(context, regions, params):
    """Decoder start states from the region-count-averaged global context."""
    if regions < 1:
        raise ValueError("init_states: region count must be >= 1")
    avg = ag.scale(context, 1.0 / regions)
    c0 = ag.tanh(ag.add(ag.matmul(avg, params.w_cell), params.b_cell))
    h0 = ag.tanh(ag.add(ag.matmul(avg, params.w_hidden), params.b_hidden))
    return c0, h0


def local_attention(grid, h_prev, params):
    """Re-score the regions against the previous hidden state.

    Returns (AttentionMap, context vector) for this step. The scorer is the
    split-block MLP: tanh(a_i . Wr + h . Ws + b) . w_out, softmaxed over
    regions.
    """
    if grid.regions == 0:
        raise ValueError("local_attention: empty feature grid")
    if h_prev.values.shape != (params.w_state.values.shape[0],):
        raise ValueError(
            f"local_attention: hidden state shape {h_prev.values.shape} does not "
            f"match params ({params.w_state.values.shape[0]},)"
        )
    hidden = ag.tanh(
        ag.add(
            ag.add(ag.matmul(grid.data, params.w_region), ag.matmul(h_prev, params.w_state)),
            params.b_mlp,
        )
    )
    scores = ag.add(ag.matmul(hidden, params.w_out), params.b_out)
    weights = ag.softmax(scores)
    context = ag.matmul(weights, grid.data)
    return AttentionMap(weights), context
