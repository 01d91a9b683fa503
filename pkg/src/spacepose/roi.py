"""Depth-derived bounding boxes, center augmentation and ROI cropping."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .geometry import GeometryError, PixelCoord

log = logging.getLogger(__name__)


class RoiContractError(ValueError):
    pass


class OutOfFrameWarning(UserWarning):
    """A crop box lies entirely outside the image; the crop is all zeros."""


@dataclass(frozen=True)
class BoundingBox:
    center: PixelCoord
    side: float

    def __post_init__(self):
        if not self.side > 0:
            raise GeometryError(f"bounding box side must be positive, got {self.side}")
        object.__setattr__(self, "center", PixelCoord(float(self.center[0]), float(self.center[1])))

    @property
    def corners(self) -> tuple[float, float, float, float]:
        """``(left, top, right, bottom)`` in pixels."""
        h = self.side / 2
        u, v = self.center
        return u - h, v - h, u + h, v + h

    def to_dict(self) -> dict:
        return {"u": self.center.u, "v": self.center.v, "side": self.side}


@dataclass
class RoiConfig:
    k_object: float = 5000.0
    crop_size: int = 224
    cda_r: float = 0.15
    hc_enabled: bool = False
    hc_channels: int = 64

    def __post_init__(self):
        if not self.k_object > 0:
            raise ValueError("k_object must be positive")
        if self.crop_size < 8:
            raise ValueError("crop_size must be at least 8")
        if not self.cda_r > 0:
            raise ValueError("cda_r must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def bounding_box(center, z: float, cfg: RoiConfig) -> BoundingBox:
    """Square box of side ``K_O / z`` centered on the predicted center."""
    if not z > 0:
        raise GeometryError(f"depth must be positive to size a box, got z={z}")
    return BoundingBox(PixelCoord(*center), cfg.k_object / z)


def augment_box(box: BoundingBox, r: float, rng: np.random.Generator) -> BoundingBox:
    """Jitter the box center with N(0, (side * r)^2) per axis; side is kept."""
    if not r > 0:
        raise ValueError("r must be positive")
    du, dv = rng.normal(0.0, box.side * r, size=2)
    return BoundingBox(PixelCoord(box.center.u + du, box.center.v + dv), box.side)


def _sampling_grid(boxes: torch.Tensor, width: int, height: int, crop_size: int) -> torch.Tensor:
    """grid_sample grid for ``boxes`` given as ``(B, 3)`` rows of ``(u, v, side)``.

    An optional fourth column ``phi`` samples the square rotated so that the
    crop content appears rotated by ``phi`` (radians, +u toward +v).
    """
    k = (torch.arange(crop_size, dtype=boxes.dtype, device=boxes.device) + 0.5) / crop_size - 0.5
    u, v, s = boxes[:, 0, None, None], boxes[:, 1, None, None], boxes[:, 2, None, None]
    n = crop_size
    a = (k[None, None, :] * s).expand(-1, n, n)  # output offset along u
    b = (k[None, :, None] * s).expand(-1, n, n)  # along v
    if boxes.shape[1] > 3:
        phi = boxes[:, 3, None, None]
        c, sn = torch.cos(phi), torch.sin(phi)
        a, b = a * c + b * sn, b * c - a * sn
    return torch.stack([2.0 * (u + a) / width - 1.0, 2.0 * (v + b) / height - 1.0], dim=-1)


def boxes_to_tensor(boxes, dtype=torch.float32) -> torch.Tensor:
    if isinstance(boxes, BoundingBox):
        boxes = [boxes]
    if torch.is_tensor(boxes):
        return boxes.to(dtype)
    return torch.tensor([[b.center.u, b.center.v, b.side] for b in boxes], dtype=dtype)


def out_of_frame(boxes: torch.Tensor, width: int, height: int) -> torch.Tensor:
    h = boxes[:, 2] / 2
    return ((boxes[:, 0] + h <= 0) | (boxes[:, 0] - h >= width)
            | (boxes[:, 1] + h <= 0) | (boxes[:, 1] - h >= height))


def crop_and_rescale(image: torch.Tensor, box, crop_size: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Crop square ROIs and resample them to ``crop_size`` with bilinear interpolation.

    ``image`` is ``(C, H, W)`` or ``(B, C, H, W)``; ``box`` a BoundingBox, a list
    of them, or a ``(B, 3)`` tensor of ``(u, v, side)`` with an optional fourth
    in-plane rotation column. Area outside the image
    is zero-filled. Returns ``(crops, outside)`` where ``outside`` flags boxes
    that miss the image entirely. Differentiable with respect to ``image``.
    """
    if image.numel() == 0:
        raise RoiContractError("empty image")
    single = image.dim() == 3
    batch = image[None] if single else image
    boxes = boxes_to_tensor(box, dtype=batch.dtype).to(batch.device).detach()
    if boxes.shape[0] != batch.shape[0]:
        if batch.shape[0] == 1:
            batch = batch.expand(boxes.shape[0], -1, -1, -1)
        else:
            raise RoiContractError(f"{boxes.shape[0]} boxes for {batch.shape[0]} images")
    height, width = batch.shape[-2:]
    grid = _sampling_grid(boxes, width, height, crop_size)
    crops = F.grid_sample(batch, grid, mode="bilinear", padding_mode="zeros", align_corners=False)
    outside = out_of_frame(boxes, width, height)
    if outside.any():
        warnings.warn(f"{int(outside.sum())} crop box(es) entirely outside the image",
                      OutOfFrameWarning, stacklevel=2)
    return (crops[0] if single else crops), outside


def assemble_orientation_input(image: torch.Tensor, heatstack: torch.Tensor | None, box,
                               cfg: RoiConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Build the orientation network input: the ROI crop of the image, with the
    non-normalized heatmaps stacked channel-wise in front when HC is enabled.

    ``heatstack`` is ``(B, H, h, w)``; it is resampled to the image resolution
    before concatenation so both share the same pixel grid.
    """
    if cfg.hc_enabled:
        if heatstack is None:
            raise RoiContractError("heatmap concatenation is enabled but no heatmaps were given")
        single = image.dim() == 3
        img = image[None] if single else image
        hs = heatstack[None] if heatstack.dim() == 3 else heatstack
        if hs.shape[1] != cfg.hc_channels:
            raise RoiContractError(f"expected {cfg.hc_channels} heatmaps, got {hs.shape[1]}")
        if hs.shape[0] != img.shape[0]:
            raise RoiContractError("heatmap and image batch sizes differ")
        if hs.shape[-2:] != img.shape[-2:]:
            hs = F.interpolate(hs, size=img.shape[-2:], mode="bilinear", align_corners=False)
        stack = torch.cat([hs, img.to(hs.dtype)], dim=1)
        crops, outside = crop_and_rescale(stack, box, cfg.crop_size)
        return (crops[0] if single else crops), outside
    if heatstack is not None:
        raise RoiContractError("heatmaps given but heatmap concatenation is disabled")
    return crop_and_rescale(image, box, cfg.crop_size)
