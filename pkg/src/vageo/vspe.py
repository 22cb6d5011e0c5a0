"""View-specific positional encoding of the clicked query object.

Ground queries get a smooth radial decay around the click; drone queries get
four concentric square rings with fixed weights.  The map is appended to the
query image as one extra input channel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import torch

View = Literal["ground", "drone"]
Kernel = Literal["paper-squared", "laplace-absolute"]

DEFAULT_SIGMA = 25.0
DEFAULT_RING_WEIGHTS = (0.60, 0.15, 0.15, 0.10)

# Ring weight vectors from the drone weight ablation, best first.
RING_WEIGHT_PRESETS = (
    (0.60, 0.15, 0.15, 0.10),
    (0.60, 0.20, 0.15, 0.05),
    (0.40, 0.30, 0.20, 0.10),
    (0.50, 0.30, 0.10, 0.10),
    (0.70, 0.15, 0.10, 0.05),
    (0.80, 0.10, 0.05, 0.05),
    (0.60, 0.25, 0.10, 0.05),
    (0.90, 0.05, 0.05, 0.00),
)


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class ClickPoint:
    row: int
    col: int

    def check_inside(self, height: int, width: int) -> None:
        if not (0 <= self.row < height and 0 <= self.col < width):
            raise EncodingError(
                f"click ({self.row}, {self.col}) outside {height}x{width} image"
            )

    def scaled(self, sy: float, sx: float, height: int, width: int) -> "ClickPoint":
        """Click position after resizing the image by (sy, sx), clamped to the new bounds."""
        row = min(max(int(np.floor((self.row + 0.5) * sy)), 0), height - 1)
        col = min(max(int(np.floor((self.col + 0.5) * sx)), 0), width - 1)
        return ClickPoint(row, col)


@dataclass(frozen=True)
class GroundEncodingConfig:
    sigma: float = DEFAULT_SIGMA
    kernel: Kernel = "paper-squared"
    normalize_peak: bool = True

    def __post_init__(self):
        if not self.sigma > 0 or not np.isfinite(self.sigma):
            raise EncodingError(f"sigma must be positive, got {self.sigma}")
        if self.kernel not in ("paper-squared", "laplace-absolute"):
            raise EncodingError(f"unknown kernel {self.kernel!r}")


@dataclass(frozen=True)
class DroneEncodingConfig:
    weights: tuple[float, float, float, float] = DEFAULT_RING_WEIGHTS

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if len(w) != 4:
            raise EncodingError(f"need 4 ring weights, got {len(w)}")
        if any(x < 0 or not np.isfinite(x) for x in w):
            raise EncodingError(f"ring weights must be non-negative: {w}")
        if abs(sum(w) - 1.0) > 1e-9:
            raise EncodingError(f"ring weights must sum to 1, got {sum(w)!r}")
        # inner ring must dominate, otherwise the click is not the map maximum
        if any(a < b for a, b in zip(w, w[1:])):
            raise EncodingError(f"ring weights must be non-increasing inside->out: {w}")


@dataclass
class EncodingMap:
    values: np.ndarray
    source_view: View
    click: ClickPoint = field(default=None)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def _distances(height: int, width: int, click: ClickPoint):
    rows = np.arange(height, dtype=np.float64)[:, None] - click.row
    cols = np.arange(width, dtype=np.float64)[None, :] - click.col
    return rows, cols


def ground_encoding(
    height: int,
    width: int,
    click: ClickPoint,
    config: GroundEncodingConfig | None = None,
) -> EncodingMap:
    """Radial decay map ``exp(-d**2/sigma) / (2 sigma)`` (or ``exp(-d/sigma)``) around the click.

    Values are float64 so the decay stays strictly monotone far from the click.
    """
    config = config or GroundEncodingConfig()
    click.check_inside(height, width)
    dr, dc = _distances(height, width, click)
    d2 = dr**2 + dc**2
    if config.kernel == "paper-squared":
        arg = d2 / config.sigma
    else:
        arg = np.sqrt(d2) / config.sigma
    values = np.exp(-arg) / (2.0 * config.sigma)
    if config.normalize_peak:
        values = values / values[click.row, click.col]
    return EncodingMap(values, "ground", click)


def ring_index(height: int, width: int, click: ClickPoint) -> np.ndarray:
    """Ring number (1..4) of every pixel, by Chebyshev distance to the click.

    Rings split [0, R] into four equal bands, R being the Chebyshev distance to
    the farthest image corner.
    """
    click.check_inside(height, width)
    dr, dc = _distances(height, width, click)
    cheb = np.maximum(np.abs(dr), np.abs(dc))
    radius = max(click.row, height - 1 - click.row, click.col, width - 1 - click.col)
    if radius == 0:
        return np.ones((height, width), dtype=np.int64)
    ring = np.ceil(4.0 * cheb / radius).astype(np.int64)
    return np.clip(ring, 1, 4)


def drone_encoding(
    height: int,
    width: int,
    click: ClickPoint,
    config: DroneEncodingConfig | None = None,
) -> EncodingMap:
    config = config or DroneEncodingConfig()
    ring = ring_index(height, width, click)
    weights = np.asarray(config.weights, dtype=np.float64)
    return EncodingMap(weights[ring - 1], "drone", click)


def encode(view: View, height: int, width: int, click: ClickPoint, ground=None, drone=None) -> EncodingMap:
    if view == "ground":
        return ground_encoding(height, width, click, ground)
    if view == "drone":
        return drone_encoding(height, width, click, drone)
    raise EncodingError(f"unknown view {view!r}")


def attach_encoding(query_image, enc: EncodingMap):
    """Append the encoding map as an extra last channel of a C x H x W image.

    Works on numpy arrays and torch tensors; the output keeps the input's type and dtype.
    """
    if query_image.ndim != 3:
        raise EncodingError(f"expected C x H x W image, got shape {tuple(query_image.shape)}")
    if tuple(query_image.shape[1:]) != enc.values.shape:
        raise EncodingError(
            f"encoding map {enc.values.shape} does not match image {tuple(query_image.shape[1:])}"
        )
    if isinstance(query_image, torch.Tensor):
        extra = torch.as_tensor(enc.values, dtype=query_image.dtype, device=query_image.device)
        return torch.cat([query_image, extra[None]], dim=0)
    extra = enc.values.astype(query_image.dtype, copy=False)
    return np.concatenate([query_image, extra[None]], axis=0)
