"""
Visual branch: a strided convolutional stem, 1×1 channel projection,
flattening to visual tokens and the visual transformer.
"""
import logging
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .exceptions import ConfigError, DimensionError
from .layers import Module, xavier_uniform, zeros
from .tensor import Function, Tensor, register, relu
from .transformer import PositionalEncoding, TransformerEncoder

logger = logging.getLogger(__name__)


@register('conv2d')
class Conv2d(Function):
    """Cross-correlation of (B, C, H, W) input with (O, C, k, k) weights plus bias."""

    @staticmethod
    def forward(ctx, x, weight, bias, stride=1, padding=0):
        batch, channels, height, width = x.shape
        out_channels, in_channels, k, k2 = weight.shape
        if in_channels != channels or k != k2 or bias.shape != (out_channels,):
            raise DimensionError('conv2d', x.shape, weight.shape, bias.shape)
        padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        out_h = (height + 2 * padding - k) // stride + 1
        out_w = (width + 2 * padding - k) // stride + 1
        offsets = [(i, j) for i in range(k) for j in range(k)]
        patches = np.stack(
            [padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] for i, j in offsets],
            axis=2,
        )
        kernel = weight.reshape(out_channels, channels, k * k)
        out = np.einsum('bcqhw,ocq->bohw', patches, kernel, optimize=True) + bias[None, :, None, None]

        ctx.patches, ctx.kernel, ctx.offsets = patches, kernel, offsets
        ctx.padded_shape, ctx.weight_shape = padded.shape, weight.shape
        ctx.stride, ctx.padding, ctx.size = stride, padding, (height, width, out_h, out_w)
        return out.astype(x.dtype)

    @staticmethod
    def backward(ctx, grad):
        height, width, out_h, out_w = ctx.size
        stride, padding = ctx.stride, ctx.padding
        grad_weight = np.einsum('bohw,bcqhw->ocq', grad, ctx.patches, optimize=True).reshape(ctx.weight_shape)
        grad_bias = grad.sum(axis=(0, 2, 3))
        grad_patches = np.einsum('bohw,ocq->bcqhw', grad, ctx.kernel, optimize=True)
        grad_padded = np.zeros(ctx.padded_shape, dtype=grad.dtype)
        for q, (i, j) in enumerate(ctx.offsets):
            grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += grad_patches[:, :, q]
        grad_x = grad_padded[:, :, padding:padding + height, padding:padding + width]
        return grad_x, grad_weight, grad_bias


def conv2d(x, weight, bias, stride=1, padding=0):
    return Conv2d.apply(x, weight, bias, stride=stride, padding=padding)


@dataclass
class ImageInput:
    """
    A batch of images: pixels (B, 3, H₀, W₀) in [0, 1] and valid_mask
    (B, H₀, W₀), True where the pixel belongs to the image and False on padding.
    """
    pixels: np.ndarray
    valid_mask: np.ndarray

    @property
    def size(self):
        return self.pixels.shape[2], self.pixels.shape[3]

    @classmethod
    def from_rgb(cls, array):
        """Wrap one fully valid (H, W, 3) uint8 image."""
        pixels = np.asarray(array, dtype=np.float32).transpose(2, 0, 1)[None] / 255.0
        return cls(pixels, np.ones((1,) + pixels.shape[2:], dtype=bool))

    @classmethod
    def stack(cls, images):
        return cls(
            np.concatenate([image.pixels for image in images], axis=0),
            np.concatenate([image.valid_mask for image in images], axis=0),
        )


@dataclass
class VisualTokens:
    embeddings: Tensor
    token_mask: np.ndarray
    grid: tuple


def prepare_image(image, size):
    """
    Letterbox a PIL image to size×size keeping its aspect ratio.

    The longer edge is resized to `size`; the shorter one is padded at the
    bottom/right with the mean colour of the image. Returns the ImageInput and
    the resize factor applied to the original pixels.
    """
    image = image.convert('RGB')
    width, height = image.size
    factor = size / max(width, height)
    new_w, new_h = max(1, round(width * factor)), max(1, round(height * factor))
    if (new_w, new_h) != (width, height):
        image = image.resize((new_w, new_h), Image.BILINEAR)
    pixels = np.asarray(image, dtype=np.float32) / 255.0

    canvas = np.empty((size, size, 3), dtype=np.float32)
    canvas[:] = pixels.reshape(-1, 3).mean(axis=0)
    canvas[:new_h, :new_w] = pixels
    valid = np.zeros((size, size), dtype=bool)
    valid[:new_h, :new_w] = True
    return ImageInput(canvas.transpose(2, 0, 1)[None], valid[None]), factor


class ConvStem(Module):
    """
    Stride-2 3×3 convolutions with ReLU, `num_layers` deep (total stride
    2**num_layers), followed by a 1×1 projection to `out_dim` channels.
    """

    def __init__(self, num_layers, width, out_dim, rng):
        super().__init__()
        self.stride = 2 ** num_layers
        self.weights = []
        self.biases = []
        in_channels = 3
        for depth in range(num_layers):
            channels = width * 2 ** depth
            self.weights.append(xavier_uniform(rng, in_channels * 9, channels * 9, (channels, in_channels, 3, 3)))
            self.biases.append(zeros(channels))
            in_channels = channels
        self.backbone_dim = in_channels
        self.proj_weight = xavier_uniform(rng, in_channels, out_dim, (out_dim, in_channels, 1, 1))
        self.proj_bias = zeros(out_dim)

    def __call__(self, image):
        """Return the (B, C_v, H, W) feature map and the (B, H, W) token mask."""
        batch, _, height, width = image.pixels.shape
        if height % self.stride or width % self.stride:
            raise ConfigError(f"image size {height}x{width} is not divisible by the stem stride {self.stride}")

        # Padding takes the mean colour of the valid pixels, so padded values never reach the features.
        valid = image.valid_mask[:, None]
        counts = np.maximum(valid.sum(axis=(2, 3), keepdims=True), 1)
        means = (image.pixels * valid).sum(axis=(2, 3), keepdims=True) / counts
        x = Tensor(np.where(valid, image.pixels, means))

        for weight, bias in zip(self.weights, self.biases):
            x = relu(conv2d(x, weight, bias, stride=2, padding=1))
        features = conv2d(x, self.proj_weight, self.proj_bias)

        s = self.stride
        token_mask = image.valid_mask.reshape(batch, height // s, s, width // s, s).any(axis=(2, 4))
        return features, token_mask


class VisualBranch(Module):
    def __init__(self, config, rng):
        super().__init__()
        self.stem = ConvStem(config.stem_layers, config.stem_width, config.visual_dim, rng)
        self.positions = PositionalEncoding('sine-2d', config.visual_dim, temperature=config.pos_temperature)
        self.encoder = None
        if config.visual_transformer:
            self.encoder = TransformerEncoder(
                config.visual_layers, config.visual_dim, config.visual_heads,
                config.ffn_ratio * config.visual_dim, config.dropout, rng,
            )

    def __call__(self, image, rng=None):
        features, grid_mask = self.stem(image)
        batch, channels, height, width = features.shape
        tokens = features.reshape(batch, channels, height * width).transpose(0, 2, 1)
        token_mask = grid_mask.reshape(batch, height * width)
        if self.encoder is not None:
            tokens, _ = self.encoder(tokens, token_mask, self.positions(grid=(height, width)), rng)
        return VisualTokens(tokens, token_mask, (height, width))
