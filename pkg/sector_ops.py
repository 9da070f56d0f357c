"""
Sector Ops - ultrasound sector masks, semantic maps and sector-restricted losses
Every training objective in the tool reduces its per-pixel loss through
masked_mean_loss so the black background never contributes.
"""

import logging
from dataclasses import dataclass, field

import cv2
import numpy as np
import torch

logger = logging.getLogger(__name__)

LABELS = {
    0: "background",
    1: "lv_myocardium",
    2: "lv_endocardium",
    3: "left_atrium",
    4: "sector",
}
N_LABELS = len(LABELS)
SECTOR_LABEL = 4
DEFAULT_THRESHOLD = 0.05


class EmptySectorError(ValueError):
    """A mask used for a loss or metric has no in-sector pixels"""


class InvalidLabelError(ValueError):
    """A semantic map contains labels outside the declared alphabet"""


@dataclass
class SectorMask:
    """Binary in-sector mask (1 = inside the ultrasound sector)"""

    mask: torch.Tensor
    count_in: int = field(init=False)

    def __post_init__(self):
        mask = torch.as_tensor(self.mask)
        if not bool(((mask == 0) | (mask == 1)).all()):
            raise ValueError("Sector mask values must be exactly 0 or 1")
        self.mask = mask.to(torch.get_default_dtype())
        self.count_in = int(self.mask.sum().item())

    @classmethod
    def from_array(cls, array):
        return cls(torch.from_numpy(np.asarray(array, dtype=np.float64)))

    @classmethod
    def batch(cls, masks):
        """Stack per-sample [H, W] masks into one [N, 1, H, W] mask"""
        return cls(torch.stack([m.mask.reshape(m.mask.shape[-2:]) for m in masks])[:, None])

    @property
    def shape(self):
        return tuple(self.mask.shape)

    def numpy(self):
        return self.mask.detach().cpu().numpy().astype(np.uint8)

    def require_nonempty(self):
        if self.count_in <= 0:
            raise EmptySectorError("Sector mask has no in-sector pixels")
        return self


@dataclass
class SemanticMap:
    """Integer label image over the 5-symbol alphabet in LABELS"""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError(f"Semantic map must be 2-D, got shape {labels.shape}")
        unknown = np.setdiff1d(np.unique(labels), np.array(list(LABELS)))
        if unknown.size:
            raise InvalidLabelError(f"Unknown labels in semantic map: {unknown.tolist()}")
        self.labels = labels.astype(np.uint8)

    @property
    def resolution(self):
        return self.labels.shape[0]

    def sector_mask(self):
        """In-sector mask derived from every non-background label"""
        return SectorMask.from_array(self.labels >= 1)

    def counts(self):
        """Pixel count per label"""
        return {label: int((self.labels == label).sum()) for label in LABELS}


def _largest_component(binary):
    n_components, component_ids, stats, _ = cv2.connectedComponentsWithStats(
        binary.astype(np.uint8), connectivity=8
    )
    if n_components <= 1:
        return binary.astype(np.uint8)
    # component 0 is background
    largest = 1 + int(np.argmax(stats[1:, cv2.CC_STAT_AREA]))
    return (component_ids == largest).astype(np.uint8)


def sector_from_image(image, threshold=DEFAULT_THRESHOLD):
    """
    Recover the sector mask of an echo image by thresholding

    Pixels above threshold * max(image) are kept, speckle holes are filled with
    a 3x3 morphological closing and only the largest connected component
    survives.

    Args:
        image: 2-D array with values in [0, 1]
        threshold: fraction of the image maximum

    Returns:
        SectorMask
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"Expected a 2-D image, got shape {image.shape}")
    if image.min() < 0 or image.max() > 1:
        raise ValueError("Image values must lie in [0, 1]")

    peak = image.max()
    if peak <= 0:
        raise EmptySectorError("Image is all zero; no sector to recover")

    binary = (image > threshold * peak).astype(np.uint8)
    kernel = np.ones((3, 3), dtype=np.uint8)
    closed = cv2.morphologyEx(binary, cv2.MORPH_CLOSE, kernel)
    sector = _largest_component(closed)

    if not sector.any():
        raise EmptySectorError("Thresholding produced an empty sector")
    return SectorMask.from_array(sector)


def masked_mean_loss(per_pixel_loss, mask):
    """
    Mean of a per-pixel loss over in-sector pixels

    The mask broadcasts against the loss (e.g. [N,1,H,W] over [N,C,H,W]); the
    divisor is the number of broadcast in-sector elements, so a loss of 1
    everywhere reduces to exactly 1.
    """
    mask_t = mask.mask if isinstance(mask, SectorMask) else torch.as_tensor(mask)
    mask_t = mask_t.to(per_pixel_loss.dtype)
    try:
        expanded = mask_t.expand_as(per_pixel_loss)
    except RuntimeError as e:
        raise ValueError(
            f"Mask shape {tuple(mask_t.shape)} does not match loss shape {tuple(per_pixel_loss.shape)}"
        ) from e

    count = expanded.sum()
    if count.item() <= 0:
        raise EmptySectorError("Cannot reduce a loss over an empty sector")
    # out-of-sector values never enter the sum, not even as 0 * value
    masked = torch.where(expanded > 0, per_pixel_loss, torch.zeros_like(per_pixel_loss))
    return masked.sum() / count


def downsample_mask(mask, factor):
    """
    Majority-vote downsampling of a sector mask; ties resolve to in-sector

    Works on [H, W] or [..., H, W] masks.
    """
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"Downsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    m = mask.mask
    h, w = m.shape[-2], m.shape[-1]
    if h % factor or w % factor:
        raise ValueError(f"Mask extents {h}x{w} not divisible by {factor}")
    if factor == 1:
        return SectorMask(m.clone())

    blocks = m.reshape(*m.shape[:-2], h // factor, factor, w // factor, factor)
    votes = blocks.sum(dim=(-3, -1))
    return SectorMask((2 * votes >= factor * factor).to(m.dtype))
