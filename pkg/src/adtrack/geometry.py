"""Boxes, crop geometry, and the map <-> crop <-> source coordinate chain.

Conventions used throughout:

* Source-image and crop coordinates are continuous, x to the right and
  y down; pixel ``j`` covers ``[j, j+1)`` so its center is ``j + 0.5``.
* The key frame is cropped to ``128x128`` with the target's larger side
  scaled to ``2/3`` of the crop (25% margin per side); the search frame is
  cropped to ``256x256`` at the same scale.
* Search features are block-averaged to ``16x16`` and key features to
  ``8x8`` before correlation, so correlation maps are ``9x9`` and one map
  cell corresponds to a 16-crop-pixel shift.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import ContractViolation

KEY_CROP = 128
SEARCH_CROP = 256
KEY_DOWN = 8
SEARCH_DOWN = 16
MAP_SIZE = SEARCH_DOWN - KEY_DOWN + 1  # 9x9 correlation maps
PAD_FACTOR = 1.5  # crop span = 1.5 * max(box side): >= 25% margin per side

# one map cell == this many search-crop pixels
CELL_PX = SEARCH_CROP // SEARCH_DOWN


@dataclass(frozen=True)
class BoxAA:
    """Axis-aligned box: top-left corner (x, y) and positive extents (w, h)."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ContractViolation(f"box extents must be positive, got w={self.w}, h={self.h}")

    @property
    def center(self):
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    @property
    def area(self):
        return self.w * self.h


@dataclass(frozen=True)
class CropGeometry:
    """Scale and anchors tying key/search crops back to source pixels.

    ``scale`` is source pixels per crop pixel. Anchors are the source
    coordinates of each crop's (0, 0) corner. ``search_anchor`` is None
    until a search crop has been taken.
    """

    scale: float
    key_anchor: tuple[float, float]
    pad_fill: tuple[float, float, float]
    search_anchor: tuple[float, float] | None = None

    def __post_init__(self):
        if not self.scale > 0:
            raise ContractViolation(f"scale must be positive, got {self.scale}")

    def with_search_anchor(self, anchor):
        return replace(self, search_anchor=anchor)


def map_cell_to_search_px(cell):
    """Center of the key window, in search-crop pixels, for a map coordinate.

    Map cell (r, c) places the 8x8 key window over downsampled search cells
    r..r+7, whose combined center sits at boundary coordinate r + 4 of the
    16x16 grid, i.e. 16*(r + 4) crop pixels. Accepts scalars per axis.
    """
    return CELL_PX * (cell + KEY_DOWN / 2.0)


def search_px_to_map_cell(px):
    """Inverse of :func:`map_cell_to_search_px` (continuous)."""
    return px / CELL_PX - KEY_DOWN / 2.0


def crop_to_source(anchor, scale, crop_xy):
    return anchor[0] + crop_xy[0] * scale, anchor[1] + crop_xy[1] * scale


def source_to_crop(anchor, scale, src_xy):
    return (src_xy[0] - anchor[0]) / scale, (src_xy[1] - anchor[1]) / scale
