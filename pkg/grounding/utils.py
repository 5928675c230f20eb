import logging
from pathlib import Path

import numpy as np
from django.conf import settings
from PIL import Image

from .exceptions import ContractError

logger = logging.getLogger(__name__)


def output_dir(out=None):
    """The --out directory, or GROUNDING_OUTPUT_DIR when none was given; created if missing."""
    path = Path(out) if out else Path(settings.GROUNDING_OUTPUT_DIR)
    path.mkdir(parents=True, exist_ok=True)
    return path


def heatmap_to_gray(heatmap):
    """
    Scale a nonnegative (H, W) map to 0..255. Returns the uint8 image and the
    scale, so that value ≈ gray / scale. An all-zero map keeps scale 0.
    """
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if heatmap.ndim != 2:
        raise ContractError(f"heatmap must be 2-D, got shape {heatmap.shape}")
    if (heatmap < 0).any():
        raise ContractError("attention heatmaps cannot be negative")
    peak = float(heatmap.max()) if heatmap.size else 0.0
    if peak == 0.0:
        return np.zeros(heatmap.shape, dtype=np.uint8), 0.0
    scale = 255.0 / peak
    return np.clip(np.rint(heatmap * scale), 0, 255).astype(np.uint8), scale


def write_pgm(path, heatmap):
    """Write a heatmap as a binary PGM (P5, maxval 255) and return its scale."""
    gray, scale = heatmap_to_gray(heatmap)
    Image.fromarray(gray, 'L').save(path, format='PPM')
    return scale


def format_box(values):
    return ' '.join(f"{v:.6f}" for v in values)


def write_heatmap_csv(path, heatmap):
    """Write the raw (H, W) attention weights as CSV, one image row per line."""
    heatmap = np.asarray(heatmap, dtype=np.float64)
    if heatmap.ndim != 2:
        raise ContractError(f"heatmap must be 2-D, got shape {heatmap.shape}")
    np.savetxt(path, heatmap, delimiter=',', fmt='%.8g')
