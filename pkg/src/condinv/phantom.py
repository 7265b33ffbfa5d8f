"""Piecewise constant test coefficients built from simple inclusions."""

from dataclasses import dataclass

import numpy as np

__all__ = ["Rect", "Disk", "PhantomSpec", "rasterize_phantom"]


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle [x0,x1] x [y0,y1] adding ``contrast``."""

    x0: float
    x1: float
    y0: float
    y1: float
    contrast: float

    def contains(self, x, y):
        # closed rectangle; membership is decided by subdomain centers,
        # which generically avoid the boundary
        return (x >= self.x0) & (x <= self.x1) & (y >= self.y0) & (y <= self.y1)


@dataclass(frozen=True)
class Disk:
    """Open disk around (cx, cy) adding ``contrast``.

    Membership is strict (distance < radius), so a center exactly on the
    circle is excluded.
    """

    cx: float
    cy: float
    radius: float
    contrast: float

    def contains(self, x, y):
        return (x - self.cx) ** 2 + (y - self.cy) ** 2 < self.radius ** 2


@dataclass(frozen=True)
class PhantomSpec:
    """Background value plus a list of contrast inclusions."""

    background: float = 3.0
    inclusions: tuple = ()

    @staticmethod
    def default():
        """Background 3 with a C-shaped +2 inclusion (three rectangles
        meeting edge to edge) and a -2 disk, all with 1/30-aligned
        geometry."""
        return PhantomSpec(
            background=3.0,
            inclusions=(
                Rect(5 / 30, 9 / 30, 3 / 30, 27 / 30, 2.0),
                Rect(9 / 30, 27 / 30, 3 / 30, 7 / 30, 2.0),
                Rect(9 / 30, 27 / 30, 23 / 30, 27 / 30, 2.0),
                Disk(18 / 30, 15 / 30, 4 / 30, -2.0),
            ),
        )

    def to_dict(self):
        incs = []
        for inc in self.inclusions:
            if isinstance(inc, Rect):
                incs.append({"type": "rect", "x0": inc.x0, "x1": inc.x1,
                             "y0": inc.y0, "y1": inc.y1, "contrast": inc.contrast})
            else:
                incs.append({"type": "disk", "cx": inc.cx, "cy": inc.cy,
                             "radius": inc.radius, "contrast": inc.contrast})
        return {"background": self.background, "inclusions": incs}

    @staticmethod
    def from_dict(data):
        incs = []
        for raw in data.get("inclusions", ()):
            kind = raw.get("type")
            if kind == "rect":
                incs.append(Rect(raw["x0"], raw["x1"], raw["y0"], raw["y1"],
                                 raw["contrast"]))
            elif kind == "disk":
                incs.append(Disk(raw["cx"], raw["cy"], raw["radius"],
                                 raw["contrast"]))
            else:
                raise ValueError(f"unknown inclusion type {kind!r}")
        return PhantomSpec(background=float(data.get("background", 3.0)),
                           inclusions=tuple(incs))


def rasterize_phantom(spec, partition):
    """Sample a phantom on the partition by the center-point rule.

    Every subdomain receives the background plus the contrasts of all
    inclusions containing its center.  The result must stay strictly
    positive, otherwise the phantom is rejected.
    """
    cx, cy = partition.centers()
    values = np.full(partition.p, float(spec.background))
    for inc in spec.inclusions:
        inside = inc.contains(cx, cy)
        values[inside] += inc.contrast
    if values.min() <= 0.0:
        raise ValueError(
            f"invalid phantom: minimum coefficient {values.min()} <= 0 "
            "after rasterization"
        )
    return values
