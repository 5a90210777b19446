"""Binary mask extraction from generated anomaly-part images.

Anomaly parts encode "no anomaly" as exact black, so a max-channel threshold
followed by a small closing and a component-area filter recovers the mask.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ShapeError

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class MaskExtractionConfig:
    threshold: float = 0.05
    close_radius: int = 1
    min_component_area: int = 4

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.close_radius < 0:
            raise ConfigError(f"close_radius must be >= 0, got {self.close_radius}")
        if self.min_component_area < 0:
            raise ConfigError("min_component_area must be >= 0")


@dataclass(frozen=True)
class MaskStats:
    area: int
    n_components: int
    inside_object_fraction: float


def binary_close(mask: np.ndarray, radius: int = 1) -> np.ndarray:
    """Morphological closing with a square element, padded so borders behave."""
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    pad = 2 * radius
    padded = np.pad(mask, pad)
    element = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    closed = ndimage.binary_closing(padded, structure=element)
    return closed[pad:-pad, pad:-pad]


def binary_erode(mask: np.ndarray, radius: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if radius == 0:
        return mask.copy()
    element = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return ndimage.binary_erosion(mask, structure=element, border_value=0)


def label_components(mask: np.ndarray) -> tuple[np.ndarray, int]:
    return ndimage.label(np.asarray(mask, dtype=bool), structure=EIGHT_CONNECTED)


def remove_small_components(mask: np.ndarray, min_area: int) -> np.ndarray:
    labels, n = label_components(mask)
    if n == 0 or min_area <= 1:
        return labels > 0
    areas = np.bincount(labels.ravel(), minlength=n + 1)
    keep = areas >= min_area
    keep[0] = False
    return keep[labels]


def intensity(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    return image.max(axis=-1) if image.ndim == 3 else image


def extract_mask(anomaly_part: np.ndarray, cfg: MaskExtractionConfig | None = None) -> np.ndarray:
    cfg = cfg or MaskExtractionConfig()
    mask = intensity(anomaly_part) > cfg.threshold
    mask = binary_close(mask, cfg.close_radius)
    return remove_small_components(mask, cfg.min_component_area)


def mask_stats(mask: np.ndarray, object_mask: np.ndarray | None = None) -> MaskStats:
    mask = np.asarray(mask, dtype=bool)
    area = int(mask.sum())
    _, n = label_components(mask)
    if object_mask is None:
        return MaskStats(area, n, 1.0)
    object_mask = np.asarray(object_mask, dtype=bool)
    if object_mask.shape != mask.shape:
        raise ShapeError(f"mask shape {mask.shape} != object mask shape {object_mask.shape}")
    inside = 1.0 if area == 0 else float((mask & object_mask).sum()) / area
    return MaskStats(area, n, inside)


def object_mask_from_image(image: np.ndarray, threshold: float = 0.1, close_radius: int = 1) -> np.ndarray:
    """Segment the foreground object of an image on a uniform background.

    The background colour is the per-channel median of the one-pixel border.
    Pixels that differ from it by more than ``threshold`` in any channel are
    foreground; holes are filled and only the largest component is kept.
    """
    image = np.asarray(image, dtype=np.float64)
    border = np.concatenate([image[0], image[-1], image[1:-1, 0], image[1:-1, -1]])
    bg = np.median(border, axis=0)
    fg = np.abs(image - bg).max(axis=-1) > threshold
    fg = ndimage.binary_fill_holes(binary_close(fg, close_radius))
    labels, n = label_components(fg)
    if n <= 1:
        return fg
    areas = np.bincount(labels.ravel())
    areas[0] = 0
    return labels == int(areas.argmax())
