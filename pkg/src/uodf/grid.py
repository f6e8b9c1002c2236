"""Sampling lattice over the normalized cube and the three orthogonal directions."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property

import numpy as np


class Direction(enum.Enum):
    """Orthogonal ray direction. The value is the world axis the rays run along."""

    LR = 0
    FB = 1
    UD = 2

    @property
    def axis(self) -> int:
        return self.value

    @property
    def plane_axes(self) -> tuple[int, int]:
        """World axes spanning the plane the rays are seeded on, ascending."""
        return tuple(a for a in range(3) if a != self.value)  # type: ignore[return-value]

    @classmethod
    def parse(cls, name: str | int | Direction) -> Direction:
        if isinstance(name, Direction):
            return name
        if isinstance(name, int):
            return cls(name)
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f"unknown direction {name!r}; expected one of lr, fb, ud") from None


@dataclass(frozen=True)
class GridSpec:
    """Lattice of ``resolution`` corners per axis over [-1, 1]^3."""

    resolution: int

    def __post_init__(self):
        if int(self.resolution) != self.resolution or self.resolution < 2:
            raise ValueError(f"grid resolution must be an integer >= 2, got {self.resolution!r}")

    @property
    def spacing(self) -> float:
        return 2.0 / (self.resolution - 1)

    @cached_property
    def coords(self) -> np.ndarray:
        # linspace pins both ends to exactly -1 and +1
        return np.linspace(-1.0, 1.0, self.resolution)

    def corner(self, i) -> np.ndarray | float:
        return self.coords[i]

    def edge_index(self, s: np.ndarray) -> np.ndarray:
        """Index k of the lattice edge [coords[k], coords[k+1]] holding axis coordinate ``s``."""
        k = np.floor((np.asarray(s, dtype=np.float64) + 1.0) / self.spacing).astype(np.int64)
        return np.clip(k, 0, self.resolution - 2)

    def plane_lattice(self) -> tuple[np.ndarray, np.ndarray]:
        """Flattened (u, v) coordinates of all R^2 rays, u-index fastest.

        Ray ``r`` has plane indices ``iu = r % R`` and ``iv = r // R``.
        """
        c = self.coords
        v, u = np.meshgrid(c, c, indexing="ij")
        return u.ravel(), v.ravel()
