import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from .exceptions import ConfigError
from .fusion import FusionModule, PredictionHead, RegInitMode
from .layers import Module
from .linguistic import LinguisticBranch
from .visual import VisualBranch

logger = logging.getLogger(__name__)

BRANCH_GROUP = 'branch'
FUSION_GROUP = 'fusion'


@dataclass(frozen=True)
class ModelConfig:
    """
    Architecture hyperparameters. Defaults are the desk-scale configuration;
    `full_scale()` gives the full-size dimensions.
    """
    image_size: int = 64
    stem_layers: int = 3
    stem_width: int = 16
    visual_dim: int = 32
    visual_layers: int = 2
    visual_heads: int = 2
    visual_transformer: bool = True
    text_dim: int = 64
    text_layers: int = 2
    text_heads: int = 2
    linguistic_transformer: bool = True
    max_text_len: int = 40
    fusion_dim: int = 32
    vl_layers: int = 2
    vl_heads: int = 2
    vl_per_layer_positions: bool = False
    ffn_ratio: int = 4
    dropout: float = 0.1
    reg_init: str = RegInitMode.LEARNABLE.value
    pos_temperature: float = 10000.0

    def __post_init__(self):
        for name in ('image_size', 'stem_layers', 'stem_width', 'visual_dim', 'text_dim',
                     'max_text_len', 'fusion_dim', 'ffn_ratio', 'visual_heads', 'text_heads', 'vl_heads'):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ('visual_layers', 'text_layers', 'vl_layers'):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} cannot be negative")
        if self.image_size % self.stride:
            raise ConfigError(f"image_size {self.image_size} is not divisible by the stem stride {self.stride}")
        for dim, heads, label in ((self.visual_dim, self.visual_heads, 'visual'),
                                  (self.text_dim, self.text_heads, 'text'),
                                  (self.fusion_dim, self.vl_heads, 'vl')):
            if dim % heads:
                raise ConfigError(f"{label} dim {dim} is not divisible by {heads} heads")
        if self.visual_dim % 4:
            raise ConfigError(f"visual_dim must be divisible by 4 for sine encodings, got {self.visual_dim}")
        if self.max_text_len < 3:
            raise ConfigError("max_text_len must leave room for [CLS] and [SEP]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.reg_init not in {mode.value for mode in RegInitMode}:
            raise ConfigError(f"unknown reg_init mode '{self.reg_init}'")

    @property
    def stride(self):
        return 2 ** self.stem_layers

    @property
    def grid_size(self):
        return self.image_size // self.stride

    @property
    def num_visual_tokens(self):
        return self.grid_size ** 2

    @property
    def joint_length(self):
        extra = 0 if self.reg_init == RegInitMode.SHARE_CLS.value else 1
        return self.num_visual_tokens + self.max_text_len + extra

    @classmethod
    def full_scale(cls, **overrides):
        values = dict(
            image_size=640, stem_layers=5, stem_width=64, visual_dim=256, visual_layers=6, visual_heads=8,
            text_dim=768, text_layers=12, text_heads=12, max_text_len=40,
            fusion_dim=256, vl_layers=6, vl_heads=8, ffn_ratio=8,
        )
        values.update(overrides)
        return cls(**values)

    def with_changes(self, **changes):
        return replace(self, **changes)

    def as_dict(self):
        return asdict(self)


@dataclass
class Prediction:
    boxes: object
    heatmaps: np.ndarray
    joint_length: int


class GroundingModel(Module):
    """Visual branch + linguistic branch + V-L fusion + box head."""

    def __init__(self, config, vocab_size, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.config = config
        self.vocab_size = vocab_size
        self.visual = VisualBranch(config, rng)
        self.linguistic = LinguisticBranch(config, vocab_size, rng)
        self.fusion = FusionModule(config, rng)
        self.head = PredictionHead(config.fusion_dim, rng)
        logger.debug(f"Built model with {self.parameter_count()} parameters")

    def param_groups(self):
        """Branch parameters and fusion/head parameters, never mixed."""
        groups = {BRANCH_GROUP: [], FUSION_GROUP: []}
        for name, param in self.named_parameters():
            group = BRANCH_GROUP if name.startswith(('visual.', 'linguistic.')) else FUSION_GROUP
            groups[group].append((name, param))
        return groups

    def __call__(self, batch, rng=None):
        visual = self.visual(batch.images, rng)
        text = self.linguistic(batch.text_ids, batch.text_mask, rng)
        p_v, p_l = self.fusion.project(visual.embeddings, text.embeddings)
        joint = self.fusion.assemble(p_v, p_l, visual.token_mask, text.token_mask, text.cls_index)
        fused = self.fusion(joint, visual.grid, rng)
        boxes = self.head(self.fusion.readout(joint, fused.states))
        return Prediction(boxes, fused.heatmaps, joint.length)
