from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in image pixels, center format.

    Corners follow the half-open convention: the box covers [x0, x1) x [y0, y1).
    """

    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_corners(cls, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        return cls((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)

    def corners(self) -> tuple[float, float, float, float]:
        return (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )

    @property
    def area(self) -> float:
        return max(self.w, 0.0) * max(self.h, 0.0)

    def scaled(self, sx: float, sy: float) -> "BBox":
        return BBox(self.cx * sx, self.cy * sy, self.w * sx, self.h * sy)

    def is_valid_in(self, height: int, width: int) -> bool:
        """Positive size and a non-empty overlap with the image."""
        if not (self.w > 0 and self.h > 0):
            return False
        x0, y0, x1, y1 = self.corners()
        return min(x1, width) > max(x0, 0) and min(y1, height) > max(y0, 0)

    def as_list(self) -> list[float]:
        return [self.cx, self.cy, self.w, self.h]
