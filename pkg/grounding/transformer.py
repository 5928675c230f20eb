"""
Post-norm transformer encoder with key-padding masks.

Token sequences are laid out as (batch, length, channels). Masks are boolean
(batch, length) arrays in which True marks a token that may be attended to.
Positional encodings are added to the query and key inputs of every layer and
never to the values.
"""
import logging
import math

import numpy as np

from .exceptions import ConfigError, ContractError, DimensionError
from .layers import LayerNorm, Linear, Module, normal
from .tensor import Tensor, dropout, relu, softmax

logger = logging.getLogger(__name__)


def _swap_last(t):
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return t.transpose(*axes)


def scaled_dot_attention(q, k, v, mask=None):
    """
    softmax(q kᵀ / √d_k) v over the last two axes.

    `mask` covers key positions, shape (..., len_k); it is broadcast over the
    query axis. Returns the attended values and the attention weights.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError('scaled_dot_attention', q.shape, k.shape, v.shape)
    scores = (q @ _swap_last(k)) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        mask = np.expand_dims(np.asarray(mask, dtype=bool), -2)
    weights = softmax(scores, axis=-1, mask=mask)
    return weights @ v, weights


class MultiHeadAttention(Module):
    def __init__(self, dim, num_heads, rng):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"model dim {dim} is not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.query = Linear(dim, dim, rng)
        # a key bias shifts every score in a row equally, which softmax ignores
        self.key = Linear(dim, dim, rng, bias=False)
        self.value = Linear(dim, dim, rng)
        self.output = Linear(dim, dim, rng)

    def _split_heads(self, t, batch, length):
        return t.reshape(batch, length, self.num_heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, x, mask=None, pos=None):
        batch, length, _ = x.shape
        if mask is not None and np.shape(mask) != (batch, length):
            raise ContractError(f"mask shape {np.shape(mask)} does not match sequence shape {(batch, length)}")
        if pos is not None and tuple(pos.shape[-2:]) != (length, self.dim):
            raise ContractError(f"positional encoding shape {pos.shape} does not match tokens {x.shape}")

        qk_input = x if pos is None else x + pos
        q = self._split_heads(self.query(qk_input), batch, length)
        k = self._split_heads(self.key(qk_input), batch, length)
        v = self._split_heads(self.value(x), batch, length)

        head_mask = None if mask is None else np.asarray(mask, dtype=bool)[:, None, :]
        attended, weights = scaled_dot_attention(q, k, v, head_mask)
        merged = attended.transpose(0, 2, 1, 3).reshape(batch, length, self.dim)
        return self.output(merged), weights


class EncoderLayer(Module):
    """x' = LN(x + MSA(x)); out = LN(x' + FFN(x'))."""

    def __init__(self, dim, num_heads, ffn_dim, dropout_rate, rng):
        super().__init__()
        self.attention = MultiHeadAttention(dim, num_heads, rng)
        self.ffn_in = Linear(dim, ffn_dim, rng)
        self.ffn_out = Linear(ffn_dim, dim, rng)
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)
        self.dropout_rate = dropout_rate

    def __call__(self, x, mask=None, pos=None, rng=None):
        attended, weights = self.attention(x, mask, pos)
        x = self.norm1(x + dropout(attended, self.dropout_rate, self.training, rng))
        hidden = dropout(relu(self.ffn_in(x)), self.dropout_rate, self.training, rng)
        x = self.norm2(x + self.ffn_out(hidden))
        return x, weights


class TransformerEncoder(Module):
    def __init__(self, num_layers, dim, num_heads, ffn_dim, dropout_rate, rng):
        super().__init__()
        self.dim = dim
        self.layers = [EncoderLayer(dim, num_heads, ffn_dim, dropout_rate, rng) for _ in range(num_layers)]

    def __len__(self):
        return len(self.layers)

    def __call__(self, x, mask=None, pos=None, rng=None):
        """
        Run every layer in order. `pos` is either one encoding shared by all
        layers or a list with one encoding per layer. Returns the output and
        the per-layer attention weights.
        """
        per_layer = pos if isinstance(pos, (list, tuple)) else [pos] * len(self.layers)
        attention = []
        for layer, layer_pos in zip(self.layers, per_layer):
            x, weights = layer(x, mask, layer_pos, rng)
            attention.append(weights)
        return x, attention


def sine_2d_positions(height, width, dim, temperature=10000.0):
    """
    Fixed sine/cosine encodings for an H×W grid, shape (H·W, dim), row-major.

    The first half of the channels encodes the row index, the second half the
    column index, each as [sin, cos] over dim/4 geometric frequencies.
    """
    if dim % 4:
        raise ConfigError(f"sine 2-d encodings need a dim divisible by 4, got {dim}")
    quarter = dim // 4
    freqs = temperature ** (-np.arange(quarter) / quarter)
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing='ij')
    row_angles = rows.reshape(-1, 1) * freqs
    col_angles = cols.reshape(-1, 1) * freqs
    table = np.concatenate(
        [np.sin(row_angles), np.cos(row_angles), np.sin(col_angles), np.cos(col_angles)], axis=1
    )
    return Tensor(table)


class PositionalEncoding(Module):
    KINDS = ('sine-2d', 'learnable-1d', 'none')

    def __init__(self, kind, dim, max_len=None, temperature=10000.0, rng=None):
        super().__init__()
        if kind not in self.KINDS:
            raise ConfigError(f"unknown positional encoding kind '{kind}'")
        self.kind = kind
        self.dim = dim
        self.temperature = temperature
        self._grid_cache = {}
        if kind == 'sine-2d' and dim % 4:
            raise ConfigError(f"sine 2-d encodings need a dim divisible by 4, got {dim}")
        if kind == 'learnable-1d':
            if not max_len or rng is None:
                raise ConfigError("learnable encodings need max_len and a random generator")
            self.table = normal(rng, (max_len, dim))

    def __call__(self, length=None, grid=None):
        if self.kind == 'none':
            return None
        if self.kind == 'sine-2d':
            if grid not in self._grid_cache:
                self._grid_cache[grid] = sine_2d_positions(grid[0], grid[1], self.dim, self.temperature)
            return self._grid_cache[grid]
        if length > self.table.shape[0]:
            raise ContractError(f"sequence of {length} tokens exceeds the positional table ({self.table.shape[0]})")
        return self.table[:length]
