"""
Box geometry, IoU/GIoU, smooth-L1 and the grounding objective.

Plain functions (`iou`, `giou`, `accuracy_at_iou`) work on Box objects or
numpy arrays of corners and are used for evaluation. The `*_loss` functions
operate on Tensors so they can be differentiated.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError, ContractError
from .tensor import Tensor, maximum, minimum, relu, smooth_l1

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Box:
    """Center-form box (cx, cy, w, h), normalized by image width and height."""
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        values = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in values):
            raise ContractError(f"box coordinates must be finite, got {values}")
        if self.w < 0 or self.h < 0:
            raise ContractError(f"box width and height must be non-negative, got w={self.w}, h={self.h}")

    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x1, y1, x2, y2):
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @classmethod
    def from_pixels(cls, x, y, w, h, image_w, image_h):
        """Normalize a top-left pixel box (x, y, w, h) by the image size."""
        return cls((x + w / 2) / image_w, (y + h / 2) / image_h, w / image_w, h / image_h)

    def to_pixels(self, image_w, image_h):
        w, h = self.w * image_w, self.h * image_h
        return (self.cx * image_w - w / 2, self.cy * image_h - h / 2, w, h)

    def as_list(self):
        return [self.cx, self.cy, self.w, self.h]


def box_convert(box):
    """Center form to corner form (x1, y1, x2, y2)."""
    return box.corners()


def cxcywh_to_corners(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    if (boxes[..., 2:] < 0).any():
        raise ContractError("box width and height must be non-negative")
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def corners_to_cxcywh(corners):
    corners = np.asarray(corners, dtype=np.float64)
    return np.concatenate([(corners[..., :2] + corners[..., 2:]) / 2, corners[..., 2:] - corners[..., :2]], axis=-1)


def _as_corners(value):
    if isinstance(value, Box):
        return np.asarray(value.corners(), dtype=np.float64)
    return np.asarray(value, dtype=np.float64)


def _overlap(a, b):
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    inter_w = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    inter_h = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = inter_w * inter_h
    return inter, area_a + area_b - inter


def _scalar_or_array(values):
    return float(values) if np.ndim(values) == 0 else values


def iou(a, b):
    """Intersection over union of corner-form boxes (or Box objects)."""
    a, b = _as_corners(a), _as_corners(b)
    inter, union = _overlap(a, b)
    with np.errstate(divide='ignore', invalid='ignore'):
        values = np.where(union > 0, inter / union, 0.0)
    return _scalar_or_array(values)


def giou(a, b):
    """IoU minus the fraction of the enclosing box not covered by the union."""
    a, b = _as_corners(a), _as_corners(b)
    inter, union = _overlap(a, b)
    hull = (
        (np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0]))
        * (np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1]))
    )
    if (hull <= 0).any():
        raise ContractError("GIoU is undefined for a zero-area enclosing box")
    with np.errstate(divide='ignore', invalid='ignore'):
        overlap = np.where(union > 0, inter / union, 0.0)
    return _scalar_or_array(overlap - (hull - union) / hull)


@dataclass(frozen=True)
class LossConfig:
    giou_weight: float = 1.0
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        if self.giou_weight < 0:
            raise ConfigError(f"giou_weight must be non-negative, got {self.giou_weight}")
        if self.smooth_l1_beta <= 0:
            raise ConfigError(f"smooth_l1_beta must be positive, got {self.smooth_l1_beta}")


def _tensor_corners(boxes):
    cx, cy, w, h = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    half_w, half_h = w * 0.5, h * 0.5
    return cx - half_w, cy - half_h, cx + half_w, cy + half_h


def giou_tensor(pred, target):
    """Per-box GIoU between (B, 4) center-form Tensors."""
    px1, py1, px2, py2 = _tensor_corners(pred)
    tx1, ty1, tx2, ty2 = _tensor_corners(target)
    inter = relu(minimum(px2, tx2) - maximum(px1, tx1)) * relu(minimum(py2, ty2) - maximum(py1, ty1))
    union = (px2 - px1) * (py2 - py1) + (tx2 - tx1) * (ty2 - ty1) - inter
    hull = (maximum(px2, tx2) - minimum(px1, tx1)) * (maximum(py2, ty2) - minimum(py1, ty1))
    if (hull.data <= 0).any():
        raise ContractError("GIoU is undefined for a zero-area enclosing box")
    return inter / union - (hull - union) / hull


def smooth_l1_loss(pred, target, beta=1.0):
    """Smooth-L1 per coordinate, averaged over coordinates and batch."""
    return smooth_l1(pred - target, beta).mean()


def giou_loss(pred, target):
    return (1.0 - giou_tensor(pred, target)).mean()


@dataclass
class LossBreakdown:
    total: Tensor
    l1_term: float
    giou_term: float


def grounding_loss(pred, target, cfg=None):
    """smooth_l1 + λ·(1 − GIoU) for (B, 4) normalized center-form boxes."""
    cfg = cfg or LossConfig()
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target), dtype=pred.data.dtype)
    l1 = smooth_l1_loss(pred, target, cfg.smooth_l1_beta)
    g = giou_loss(pred, target)
    total = l1 if cfg.giou_weight == 0 else l1 + g * cfg.giou_weight
    return LossBreakdown(total, l1.item(), g.item())


def _as_cxcywh_array(items):
    if isinstance(items, np.ndarray):
        return items.astype(np.float64).reshape(-1, 4)
    return np.array([item.as_list() if isinstance(item, Box) else list(item) for item in items],
                    dtype=np.float64).reshape(-1, 4)


def iou_scores(predictions, ground_truths):
    """Per-pair IoU of center-form predictions and ground truths."""
    pred = _as_cxcywh_array(predictions)
    gt = _as_cxcywh_array(ground_truths)
    if len(pred) != len(gt):
        raise ContractError(f"{len(pred)} predictions paired with {len(gt)} ground truths")
    if not len(pred):
        raise ContractError("accuracy needs at least one prediction")
    return np.atleast_1d(iou(cxcywh_to_corners(pred), cxcywh_to_corners(gt)))


def accuracy_at_iou(predictions, ground_truths, threshold=0.5):
    """Fraction of predictions whose IoU with the ground truth is above the threshold."""
    return float((iou_scores(predictions, ground_truths) > threshold).mean())
