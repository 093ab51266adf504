"""Image-plane grid cells and nearest-center class assignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError


@dataclass(frozen=True)
class GridSpec:
    rows: int = 18
    cols: int = 32
    cell: int = 60
    image_width: int = 1920
    image_height: int = 1080

    def __post_init__(self):
        if self.rows * self.cell != self.image_height or self.cols * self.cell != self.image_width:
            raise ConfigError(
                f"grid {self.rows}x{self.cols} of {self.cell}px cells does not tile "
                f"{self.image_width}x{self.image_height}"
            )

    @classmethod
    def from_cell(cls, cell, image_width=1920, image_height=1080):
        if image_width % cell or image_height % cell:
            raise ConfigError(f"cell {cell} does not tile {image_width}x{image_height}")
        return cls(image_height // cell, image_width // cell, cell, image_width, image_height)

    @property
    def num_classes(self):
        return self.rows * self.cols

    def centers(self):
        """(num_classes, 2) array of (x, y) cell centers in class-id order."""
        r, c = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        return np.stack([(c.ravel() + 0.5) * self.cell, (r.ravel() + 0.5) * self.cell], axis=1)


def _nearest_index(coord, cell, n):
    # candidates around floor(coord / cell); ties keep the smaller index
    base = np.floor(coord / cell).astype(np.int64)
    best = np.clip(base - 1, 0, n - 1)
    best_d = np.abs(coord - (best + 0.5) * cell)
    for off in (0, 1):
        cand = np.clip(base + off, 0, n - 1)
        d = np.abs(coord - (cand + 0.5) * cell)
        better = (d < best_d) | ((d == best_d) & (cand < best))
        best = np.where(better, cand, best)
        best_d = np.where(better, d, best_d)
    return best


def box_centers(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.stack([(boxes[..., 0] + boxes[..., 2]) / 2, (boxes[..., 1] + boxes[..., 3]) / 2], axis=-1)


def grid_class(box, spec=GridSpec()):
    """Class of the cell whose center is nearest the box center.

    ``box`` is ``(x1, y1, x2, y2)`` or an array of such boxes; the result is
    ``row * cols + col`` with ties resolved to the smaller id.
    """
    centers = box_centers(box)
    col = _nearest_index(centers[..., 0], spec.cell, spec.cols)
    row = _nearest_index(centers[..., 1], spec.cell, spec.rows)
    out = row * spec.cols + col
    return int(out) if np.ndim(out) == 0 else out
