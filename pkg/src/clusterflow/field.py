"""Grids, velocity fields, snapshots and datasets.

Positions are expressed in multiples of the reference length ``L``; the
physical value of ``L`` travels with a :class:`Dataset` as
``length_scale``. Velocity values are stored node-major with ``x`` varying
fastest, then ``y``, then ``z``, three components per node.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .exceptions import (
    DatasetError,
    EmptyRegionError,
    InvalidConditionError,
    OutOfDomainError,
)

FIELD_DTYPE = np.dtype("<f8")
_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class OperatingCondition:
    """Wind speed ``u_inf`` in m/s and direction ``alpha`` in degrees."""

    u_inf: float
    alpha: float

    def __post_init__(self):
        if not (math.isfinite(self.u_inf) and self.u_inf > 0):
            raise InvalidConditionError(f"u_inf must be > 0, got {self.u_inf}")
        if not (0.0 <= self.alpha < 360.0):
            raise InvalidConditionError(f"alpha must lie in [0, 360), got {self.alpha}")

    def scaled(self, factor: float) -> "OperatingCondition":
        return OperatingCondition(self.u_inf * factor, self.alpha)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lo, hi]`` (closed)."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "lo", tuple(float(v) for v in self.lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in self.hi))
        if any(h < l for l, h in zip(self.lo, self.hi)):
            raise ValueError(f"degenerate box {self.lo} .. {self.hi}")

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        lo = np.asarray(self.lo) - tol
        hi = np.asarray(self.hi) + tol
        return np.all((p >= lo) & (p <= hi), axis=-1)

    def intersects(self, other: "Box") -> bool:
        return all(a_lo < b_hi and b_lo < a_hi for a_lo, a_hi, b_lo, b_hi in
                   zip(self.lo, self.hi, other.lo, other.hi))


@dataclass(frozen=True)
class GridSpec:
    """Regular grid: ``origin`` and ``spacing`` in multiples of L, node counts ``dims``."""

    origin: tuple[float, float, float]
    spacing: tuple[float, float, float]
    dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "spacing", tuple(float(v) for v in self.spacing))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        if len(self.origin) != 3 or len(self.spacing) != 3 or len(self.dims) != 3:
            raise DatasetError("grid origin, spacing and dims need 3 components")
        if any(not (s > 0) for s in self.spacing):
            raise DatasetError(f"grid spacing must be positive, got {self.spacing}")
        if any(d < 2 for d in self.dims):
            raise DatasetError(f"grid needs at least 2 nodes per axis, got {self.dims}")

    @classmethod
    def from_bounds(cls, lo, hi, dims) -> "GridSpec":
        spacing = [(h - l) / (n - 1) for l, h, n in zip(lo, hi, dims)]
        return cls(tuple(lo), tuple(spacing), tuple(dims))

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.dims))

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.spacing))

    @property
    def upper(self) -> tuple[float, float, float]:
        return tuple(o + s * (n - 1) for o, s, n in zip(self.origin, self.spacing, self.dims))

    @property
    def bounds(self) -> Box:
        return Box(self.origin, self.upper)

    def axes(self) -> list[np.ndarray]:
        return [o + s * np.arange(n) for o, s, n in zip(self.origin, self.spacing, self.dims)]

    def node_coords(self) -> np.ndarray:
        """All node positions, shape ``(n_nodes, 3)``, x fastest."""
        ax, ay, az = self.axes()
        z, y, x = np.meshgrid(az, ay, ax, indexing="ij")
        return np.column_stack([x.ravel(), y.ravel(), z.ravel()])

    def flat_index(self, i, j, k):
        nx, ny, _ = self.dims
        return np.asarray(i) + nx * (np.asarray(j) + ny * np.asarray(k))

    def nodes_in_box(self, box: Box) -> np.ndarray:
        """Flat indices of nodes inside ``box`` (boundary inclusive), ascending."""
        tol = _EDGE_TOL * min(self.spacing)
        ranges = []
        for ax, lo, hi in zip(self.axes(), box.lo, box.hi):
            ranges.append(np.nonzero((ax >= lo - tol) & (ax <= hi + tol))[0])
        if any(r.size == 0 for r in ranges):
            return np.empty(0, dtype=np.int64)
        k, j, i = np.meshgrid(ranges[2], ranges[1], ranges[0], indexing="ij")
        return self.flat_index(i.ravel(), j.ravel(), k.ravel()).astype(np.int64)

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "spacing": list(self.spacing), "dims": list(self.dims)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["origin"]), tuple(d["spacing"]), tuple(d["dims"]))


def interpolation_weights(grid: GridSpec, points) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear stencil for each point.

    Returns ``(index, weight)``, both shaped ``(n_points, 8)``; ``index`` holds
    flat node indices. Raises :class:`OutOfDomainError` for points outside
    the grid's bounding box.
    """
    p = np.atleast_2d(np.asarray(points, dtype=float))
    origin = np.asarray(grid.origin)
    spacing = np.asarray(grid.spacing)
    dims = np.asarray(grid.dims)
    t = (p - origin) / spacing
    tol = _EDGE_TOL
    bad = np.any((t < -tol) | (t > dims - 1 + tol) | ~np.isfinite(t), axis=1)
    if np.any(bad):
        raise OutOfDomainError(f"point {p[np.argmax(bad)].tolist()} lies outside the grid")
    t = np.clip(t, 0.0, dims - 1)
    cell = np.minimum(np.floor(t).astype(np.int64), dims - 2)
    frac = t - cell
    idx = np.empty((len(p), 8), dtype=np.int64)
    w = np.empty((len(p), 8))
    corner = 0
    for dk in (0, 1):
        for dj in (0, 1):
            for di in (0, 1):
                wx = frac[:, 0] if di else 1.0 - frac[:, 0]
                wy = frac[:, 1] if dj else 1.0 - frac[:, 1]
                wz = frac[:, 2] if dk else 1.0 - frac[:, 2]
                idx[:, corner] = grid.flat_index(cell[:, 0] + di, cell[:, 1] + dj, cell[:, 2] + dk)
                w[:, corner] = wx * wy * wz
                corner += 1
    return idx, w


@dataclass(frozen=True, eq=False)
class VelocityField:
    """Three velocity components per grid node, shape ``(n_nodes, 3)``."""

    grid: GridSpec
    values: np.ndarray
    dimensionless: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != (self.grid.n_nodes, 3):
            raise DatasetError(
                f"field has shape {values.shape}, grid expects ({self.grid.n_nodes}, 3)")
        if not np.all(np.isfinite(values)):
            raise DatasetError("velocity field contains non-finite values")
        if values.flags.writeable:
            values = values.copy()
            values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def as_grid_array(self) -> np.ndarray:
        """Values reshaped to ``(nz, ny, nx, 3)``."""
        nx, ny, nz = self.grid.dims
        return self.values.reshape(nz, ny, nx, 3)


@dataclass(frozen=True, eq=False)
class Snapshot:
    id: int
    mu: OperatingCondition
    field: VelocityField


def normalize_snapshot(snap: Snapshot) -> VelocityField:
    """Divide every velocity component by the snapshot's free-stream speed."""
    if snap.field.dimensionless:
        raise DatasetError(f"snapshot {snap.id} is already dimensionless")
    u_inf = snap.mu.u_inf
    if not u_inf > 0:
        raise InvalidConditionError(f"u_inf must be > 0, got {u_inf}")
    return VelocityField(snap.field.grid, snap.field.values / u_inf, dimensionless=True)


def sample_velocity(field: VelocityField, point) -> np.ndarray:
    """Trilinear interpolation of ``field`` at a single point."""
    idx, w = interpolation_weights(field.grid, point)
    return np.einsum("pc,pcd->pd", w, field.values[idx])[0]


def hilbert_norm(field: VelocityField, region: Box) -> float:
    """Volume-weighted L2 norm of ``field`` over the grid nodes inside ``region``."""
    nodes = field.grid.nodes_in_box(region)
    if nodes.size == 0:
        raise EmptyRegionError(f"no grid nodes inside {region}")
    sq = np.sum(field.values[nodes] ** 2)
    return float(np.sqrt(sq * field.grid.cell_volume))


class Dataset:
    """An ordered collection of snapshots sharing one grid.

    Field values are kept in one contiguous array of shape
    ``(n_snapshots, n_nodes, 3)`` so that large datasets are not copied
    when restricted or sampled; :attr:`snapshots` hands out read-only views.
    """

    def __init__(self, grid: GridSpec, ids, u_inf, alpha, values, role: str = "train",
                 length_scale: float = 0.5):
        if role not in ("train", "test"):
            raise DatasetError(f"role must be 'train' or 'test', got {role!r}")
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        values = np.asarray(values, dtype=float)
        n = ids.size
        if values.shape != (n, grid.n_nodes, 3):
            raise DatasetError(
                f"values have shape {values.shape}, expected ({n}, {grid.n_nodes}, 3)")
        if len(np.unique(ids)) != n:
            raise DatasetError("snapshot ids must be unique within a dataset")
        self.grid = grid
        self.ids = ids
        self.conditions = [OperatingCondition(float(u), float(a)) for u, a in zip(u_inf, alpha)]
        if len(self.conditions) != n:
            raise DatasetError("one operating condition per snapshot is required")
        self.u_inf = np.array([c.u_inf for c in self.conditions])
        self.alpha = np.array([c.alpha for c in self.conditions])
        values.flags.writeable = False
        self.values = values
        self.role = role
        self.length_scale = float(length_scale)

    @classmethod
    def from_snapshots(cls, snapshots: Sequence[Snapshot], role: str = "train",
                       length_scale: float = 0.5) -> "Dataset":
        snapshots = list(snapshots)
        if not snapshots:
            raise DatasetError("cannot build a dataset from zero snapshots without a grid")
        grid = snapshots[0].field.grid
        if any(s.field.grid != grid for s in snapshots):
            raise DatasetError("all snapshots in a dataset must share one grid")
        if any(s.field.dimensionless for s in snapshots):
            raise DatasetError("datasets hold dimensional snapshots")
        return cls(grid, [s.id for s in snapshots], [s.mu.u_inf for s in snapshots],
                   [s.mu.alpha for s in snapshots], np.stack([s.field.values for s in snapshots]),
                   role=role, length_scale=length_scale)

    def __len__(self) -> int:
        return int(self.ids.size)

    def __getitem__(self, pos: int) -> Snapshot:
        return Snapshot(int(self.ids[pos]), self.conditions[pos],
                        VelocityField(self.grid, self.values[pos]))

    def __iter__(self) -> Iterator[Snapshot]:
        for pos in range(len(self)):
            yield self[pos]

    @property
    def snapshots(self) -> list[Snapshot]:
        return list(self)

    def require_nonempty(self) -> "Dataset":
        if len(self) == 0:
            raise DatasetError(f"{self.role} dataset is empty")
        return self

    def normalized_values(self, nodes=None) -> np.ndarray:
        """Dimensionless values, optionally restricted to a node subset."""
        v = self.values if nodes is None else self.values[:, nodes, :]
        return v / self.u_inf[:, None, None]

    def sample(self, points) -> np.ndarray:
        """Dimensional velocities at ``points`` for every snapshot, ``(n, n_points, 3)``."""
        idx, w = interpolation_weights(self.grid, points)
        return np.einsum("pc,npcd->npd", w, self.values[:, idx, :])

    def subset(self, positions) -> "Dataset":
        positions = np.asarray(positions, dtype=np.int64)
        return Dataset(self.grid, self.ids[positions], self.u_inf[positions],
                       self.alpha[positions], self.values[positions], role=self.role,
                       length_scale=self.length_scale)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.grid.to_dict(), sort_keys=True).encode())
        h.update(self.ids.astype("<i8").tobytes())
        h.update(self.u_inf.astype(FIELD_DTYPE).tobytes())
        h.update(self.alpha.astype(FIELD_DTYPE).tobytes())
        h.update(memoryview(np.ascontiguousarray(self.values, dtype=FIELD_DTYPE)).cast("B"))
        return h.hexdigest()


# -- on-disk format ---------------------------------------------------------

MANIFEST = "manifest.json"


def write_dataset(ds: Dataset, directory) -> Path:
    """Write ``manifest.json`` plus one raw little-endian float64 file per snapshot."""
    directory = Path(directory)
    (directory / "fields").mkdir(parents=True, exist_ok=True)
    entries = []
    for pos, sid in enumerate(ds.ids):
        name = f"fields/snapshot_{int(sid):06d}.bin"
        np.ascontiguousarray(ds.values[pos], dtype=FIELD_DTYPE).tofile(directory / name)
        entries.append({"id": int(sid), "u_inf_mps": float(ds.u_inf[pos]),
                        "alpha_deg": float(ds.alpha[pos]), "field_file": name})
    manifest = {"role": ds.role, "length_scale_m": ds.length_scale,
                "grid": ds.grid.to_dict(), "snapshots": entries}
    path = directory / MANIFEST
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"no dataset manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed manifest {path}: {exc}") from None


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = read_manifest(directory)
    try:
        grid = GridSpec.from_dict(manifest["grid"])
        entries = manifest["snapshots"]
        role = manifest.get("role", "train")
        length_scale = manifest.get("length_scale_m", 0.5)
    except (KeyError, TypeError) as exc:
        raise DatasetError(f"manifest missing field {exc}") from None
    values = np.empty((len(entries), grid.n_nodes, 3))
    for pos, entry in enumerate(entries):
        raw = np.fromfile(directory / entry["field_file"], dtype=FIELD_DTYPE)
        if raw.size != grid.n_nodes * 3:
            raise DatasetError(
                f"{entry['field_file']}: {raw.size} values, expected {grid.n_nodes * 3}")
        values[pos] = raw.reshape(grid.n_nodes, 3)
    if not np.all(np.isfinite(values)):
        raise DatasetError(f"non-finite velocities in {directory}")
    return Dataset(grid, [e["id"] for e in entries], [e["u_inf_mps"] for e in entries],
                   [e["alpha_deg"] for e in entries], values, role=role,
                   length_scale=length_scale)


def plane_nodes(grid: GridSpec, axis: str, value: float) -> np.ndarray:
    """Flat indices of the grid nodes lying on the plane ``axis = value``."""
    a = "xyz".index(axis)
    coords = grid.axes()[a]
    hit = np.nonzero(np.abs(coords - value) <= _EDGE_TOL * grid.spacing[a] + 1e-12)[0]
    if hit.size == 0:
        raise EmptyRegionError(f"plane {axis}={value} contains no grid nodes")
    lo = list(grid.origin)
    hi = list(grid.upper)
    lo[a] = hi[a] = float(coords[hit[0]])
    return grid.nodes_in_box(Box(lo, hi))


def write_slice_csv(field: VelocityField, axis: str, value: float, path) -> int:
    """Export the nodes of one grid plane as ``x,y,z,u,v,w`` rows; returns the row count."""
    nodes = plane_nodes(field.grid, axis, value)
    xyz = field.grid.node_coords()[nodes]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "z", "u", "v", "w"])
        for p, u in zip(xyz, field.values[nodes]):
            writer.writerow([repr(float(c)) for c in (*p, *u)])
    return int(nodes.size)
