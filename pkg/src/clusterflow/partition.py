"""Per-building subdomains and containment queries."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .field import Box, GridSpec, VelocityField
from .exceptions import EmptyRegionError

# (center_xy, height) of the three subdomains in units of L, tallest first.
DEFAULT_SUBDOMAIN_LAYOUT = (
    ((-1.0, -1.0), 5.0),
    ((1.0, 0.0), 4.0),
    ((-1.0, 1.0), 3.0),
)
DEFAULT_SUBDOMAIN_SIDE = 2.0

_LOCATE_TOL = 1e-9


@dataclass(frozen=True)
class Subdomain:
    """Ground-mounted box around one building; ``index`` runs from 1."""

    index: int
    center_xy: tuple[float, float]
    side: float
    height: float

    @property
    def box(self) -> Box:
        cx, cy = self.center_xy
        h = self.side / 2.0
        return Box((cx - h, cy - h, 0.0), (cx + h, cy + h, self.height))

    def to_dict(self) -> dict:
        return {"index": self.index, "center_xy": list(self.center_xy),
                "side": self.side, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "Subdomain":
        return cls(int(d["index"]), tuple(d["center_xy"]), float(d["side"]), float(d["height"]))


def default_subdomains(L: float = 1.0) -> tuple[Subdomain, ...]:
    """The three 2L x 2L subdomains of the building complex, tallest first.

    ``L`` scales the geometry; pass 1.0 to work in units of L (the grid
    convention used throughout the package) or the physical length in metres.
    """
    if not L > 0:
        raise ValueError(f"length scale must be positive, got {L}")
    return tuple(
        Subdomain(i + 1, (cx * L, cy * L), DEFAULT_SUBDOMAIN_SIDE * L, h * L)
        for i, ((cx, cy), h) in enumerate(DEFAULT_SUBDOMAIN_LAYOUT)
    )


@dataclass(frozen=True, eq=False)
class Restriction:
    """Node subset of a grid selected by a subdomain, plus the field values there."""

    subdomain: Subdomain
    nodes: np.ndarray
    values: np.ndarray


def subdomain_nodes(grid: GridSpec, sub: Subdomain) -> np.ndarray:
    nodes = grid.nodes_in_box(sub.box)
    if nodes.size == 0:
        raise EmptyRegionError(f"subdomain {sub.index} contains no grid nodes")
    return nodes


def restrict(field: VelocityField, sub: Subdomain) -> Restriction:
    nodes = subdomain_nodes(field.grid, sub)
    return Restriction(sub, nodes, field.values[nodes])


def locate_many(points, subs: Sequence[Subdomain]) -> np.ndarray:
    """Subdomain index for each point, 0 where no subdomain contains it."""
    p = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.zeros(len(p), dtype=np.int64)
    # Walk from highest to lowest index so that shared faces resolve to the lowest.
    for sub in sorted(subs, key=lambda s: s.index, reverse=True):
        out[sub.box.contains(p, tol=_LOCATE_TOL)] = sub.index
    return out


def locate(point, subs: Sequence[Subdomain]) -> int | None:
    idx = int(locate_many(point, subs)[0])
    return idx or None


def check_disjoint(subs: Sequence[Subdomain]) -> None:
    for a in range(len(subs)):
        for b in range(a + 1, len(subs)):
            if subs[a].box.intersects(subs[b].box):
                raise ValueError(f"subdomains {subs[a].index} and {subs[b].index} overlap")
