"""Regular 3D scalar grids and their on-disk format."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np


@dataclass
class VolumeGrid:
    """A regular grid of scalars.

    ``dims`` is (nx, ny, nz); ``data`` is stored as an array of shape
    (nz, ny, nx) so its C-order flattening is x-fastest. ``origin`` is the
    outer corner of voxel (0, 0, 0); voxel centres sit half a step inside.
    """

    dims: tuple
    spacing: np.ndarray
    origin: np.ndarray
    data: Optional[np.ndarray] = None

    def __post_init__(self):
        self.dims = tuple(int(n) for n in self.dims)
        self.spacing = np.broadcast_to(np.asarray(self.spacing, dtype=float), (3,)).copy()
        self.origin = np.broadcast_to(np.asarray(self.origin, dtype=float), (3,)).copy()
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"bad grid dims {self.dims}")
        if np.any(self.spacing <= 0):
            raise ValueError("grid spacing must be positive")
        shape = self.dims[::-1]
        if self.data is None:
            self.data = np.zeros(shape)
        else:
            self.data = np.asarray(self.data).reshape(shape)

    @classmethod
    def centered(cls, dims, spacing, center=(0.0, 0.0, 0.0)) -> "VolumeGrid":
        """Grid whose geometric centre is ``center``."""
        dims = np.broadcast_to(np.asarray(dims, dtype=int), (3,))
        spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (3,))
        origin = np.asarray(center, dtype=float) - 0.5 * dims * spacing
        return cls(tuple(dims), spacing, origin)

    def like(self, data=None) -> "VolumeGrid":
        return VolumeGrid(self.dims, self.spacing, self.origin, data)

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.spacing[axis]

    def centers(self) -> np.ndarray:
        """(nz, ny, nx, 3) array of voxel-centre coordinates."""
        x, y, z = (self.axis_centers(a) for a in range(3))
        Z, Y, X = np.meshgrid(z, y, x, indexing="ij")
        return np.stack([X, Y, Z], axis=-1)

    def index_of(self, point) -> np.ndarray:
        """Nearest voxel index (ix, iy, iz) of a point, unclipped."""
        p = np.asarray(point, dtype=float)
        return np.floor((p - self.origin) / self.spacing).astype(int)

    def contains_index(self, idx) -> bool:
        idx = np.asarray(idx)
        return bool(np.all(idx >= 0) and np.all(idx < np.array(self.dims)))

    def sidecar(self) -> dict:
        return {"dims": list(self.dims), "spacing": self.spacing.tolist(),
                "origin": self.origin.tolist(), "dtype": "<f4", "order": "x-fastest"}

    def save(self, path) -> None:
        path = Path(path)
        path.write_bytes(np.ascontiguousarray(self.data, dtype="<f4").tobytes())
        Path(str(path) + ".json").write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "VolumeGrid":
        path = Path(path)
        meta = json.loads(Path(str(path) + ".json").read_text())
        raw = np.frombuffer(path.read_bytes(), dtype="<f4")
        dims = meta["dims"]
        if raw.size != int(np.prod(dims)):
            raise ValueError("volume file size does not match sidecar dims")
        return cls(dims, meta["spacing"], meta["origin"], raw.astype(np.float32))
