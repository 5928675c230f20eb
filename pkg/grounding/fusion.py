"""
Visual-linguistic fusion: projection of both modalities to a common width,
the [REG] token, the joint transformer and the box-regression head.

Joint sequences are ordered [visual tokens, linguistic tokens, REG].
"""
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .exceptions import ContractError, InvalidMaskError
from .layers import Linear, Module, normal
from .tensor import Tensor, concat, masked_max, relu, sigmoid
from .transformer import PositionalEncoding, TransformerEncoder

logger = logging.getLogger(__name__)


class RegInitMode(str, Enum):
    LEARNABLE = 'learnable'
    AVG_POOL_VISUAL = 'avg-pool-visual'
    MAX_POOL_VISUAL = 'max-pool-visual'
    AVG_POOL_LINGUISTIC = 'avg-pool-linguistic'
    MAX_POOL_LINGUISTIC = 'max-pool-linguistic'
    SHARE_CLS = 'share-cls'

    @classmethod
    def choices(cls):
        return [(mode.value, mode.value) for mode in cls]


@dataclass
class JointSequence:
    embeddings: Tensor
    mask: np.ndarray
    reg_index: int
    num_visual: int
    num_linguistic: int

    @property
    def length(self):
        return self.embeddings.shape[1]


@dataclass
class FusionOutput:
    states: Tensor
    attention: list
    heatmaps: np.ndarray


def masked_average(tokens, mask):
    """Mean over the valid tokens of (B, N, C); returns (B, 1, C)."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1)
    if (counts == 0).any():
        raise InvalidMaskError("average pooling over a fully masked token set")
    weights = Tensor((mask / counts[:, None])[:, :, None])
    return (tokens * weights).sum(axis=1, keepdims=True)


class FusionModule(Module):
    def __init__(self, config, rng):
        super().__init__()
        self.reg_mode = RegInitMode(config.reg_init)
        self.visual_proj = Linear(config.visual_dim, config.fusion_dim, rng)
        self.text_proj = Linear(config.text_dim, config.fusion_dim, rng)
        if self.reg_mode is RegInitMode.LEARNABLE:
            self.reg_token = normal(rng, (config.fusion_dim,))

        max_len = config.num_visual_tokens + config.max_text_len + 1
        table_count = config.vl_layers if config.vl_per_layer_positions else 1
        self.positions = [
            PositionalEncoding('learnable-1d', config.fusion_dim, max_len=max_len, rng=rng)
            for _ in range(max(table_count, 1))
        ]
        self.per_layer_positions = config.vl_per_layer_positions
        self.encoder = TransformerEncoder(
            config.vl_layers, config.fusion_dim, config.vl_heads,
            config.ffn_ratio * config.fusion_dim, config.dropout, rng,
        )

    def project(self, f_v, f_l):
        """Map (B, N_v, C_v) and (B, N_l, C_l) tokens to width C_p."""
        if f_v.shape[-1] != self.visual_proj.in_features:
            raise ContractError(f"visual tokens have {f_v.shape[-1]} channels, projection expects {self.visual_proj.in_features}")
        if f_l.shape[-1] != self.text_proj.in_features:
            raise ContractError(f"linguistic tokens have {f_l.shape[-1]} channels, projection expects {self.text_proj.in_features}")
        return self.visual_proj(f_v), self.text_proj(f_l)

    def _reg_embedding(self, p_v, p_l, visual_mask, text_mask):
        batch = p_v.shape[0]
        mode = self.reg_mode
        if mode is RegInitMode.LEARNABLE:
            return Tensor(np.zeros((batch, 1, 1))) + self.reg_token.reshape(1, 1, -1)
        if mode is RegInitMode.AVG_POOL_VISUAL:
            return masked_average(p_v, visual_mask)
        if mode is RegInitMode.AVG_POOL_LINGUISTIC:
            return masked_average(p_l, text_mask)
        tokens, mask = (p_v, visual_mask) if mode is RegInitMode.MAX_POOL_VISUAL else (p_l, text_mask)
        pooled = masked_max(tokens, np.asarray(mask, dtype=bool)[:, :, None], axis=1)
        return pooled.reshape(batch, 1, -1)

    def assemble(self, p_v, p_l, visual_mask, text_mask, cls_index=0):
        """Concatenate [p_v, p_l, REG]; in share-cls mode no REG is appended."""
        visual_mask = np.asarray(visual_mask, dtype=bool)
        text_mask = np.asarray(text_mask, dtype=bool)
        if visual_mask.shape != p_v.shape[:2] or text_mask.shape != p_l.shape[:2]:
            raise ContractError(
                f"masks {visual_mask.shape}/{text_mask.shape} do not align with tokens {p_v.shape[:2]}/{p_l.shape[:2]}"
            )
        batch, num_visual = visual_mask.shape
        num_linguistic = text_mask.shape[1]

        if self.reg_mode is RegInitMode.SHARE_CLS:
            embeddings = concat([p_v, p_l], axis=1)
            mask = np.concatenate([visual_mask, text_mask], axis=1)
            reg_index = num_visual + cls_index
        else:
            reg = self._reg_embedding(p_v, p_l, visual_mask, text_mask)
            embeddings = concat([p_v, p_l, reg], axis=1)
            mask = np.concatenate([visual_mask, text_mask, np.ones((batch, 1), dtype=bool)], axis=1)
            reg_index = num_visual + num_linguistic
        return JointSequence(embeddings, mask, reg_index, num_visual, num_linguistic)

    def __call__(self, joint, grid, rng=None):
        """
        Run the V-L transformer. Heatmaps hold, per layer, the REG query's
        attention over the visual keys averaged over heads, shaped (B, L, H, W).
        """
        length = joint.length
        if self.per_layer_positions:
            pos = [table(length=length) for table in self.positions]
        else:
            pos = self.positions[0](length=length)
        states, attention = self.encoder(joint.embeddings, joint.mask, pos, rng)

        batch = joint.embeddings.shape[0]
        maps = [
            weights.data[:, :, joint.reg_index, :joint.num_visual].mean(axis=1).reshape(batch, *grid)
            for weights in attention
        ]
        heatmaps = np.stack(maps, axis=1) if maps else np.zeros((batch, 0) + tuple(grid))
        return FusionOutput(states, attention, heatmaps)

    def readout(self, joint, states):
        """The regression input: the REG state, or the joint average when there are no layers."""
        if len(self.encoder) == 0:
            return masked_average(states, joint.mask).reshape(states.shape[0], -1)
        return states[:, joint.reg_index, :]


class PredictionHead(Module):
    """Two ReLU hidden layers of width C_p, a linear output to 4 and logistic squashing."""

    def __init__(self, dim, rng):
        super().__init__()
        self.hidden1 = Linear(dim, dim, rng)
        self.hidden2 = Linear(dim, dim, rng)
        self.output = Linear(dim, 4, rng)

    def raw(self, reg_state):
        return self.output(relu(self.hidden2(relu(self.hidden1(reg_state)))))

    def __call__(self, reg_state):
        """Normalized (cx, cy, w, h) boxes, each coordinate in (0, 1)."""
        return sigmoid(self.raw(reg_state))
