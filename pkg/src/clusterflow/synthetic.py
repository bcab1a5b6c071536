"""Deterministic synthetic wake flows around a building complex.

The generator stands in for a RANS database: a uniform free stream from
direction ``alpha`` minus one Gaussian wake deficit per building. With
``reynolds_eps = 0`` and ``noise_sigma = 0`` the normalized field depends on
``alpha`` only, which makes it an exact oracle for scaling tests.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .exceptions import ConfigError
from .field import Dataset, GridSpec, OperatingCondition, Snapshot, VelocityField

_FOOTPRINT_TOL = 1e-9
# Reference speed for the Reynolds-dependence term; middle of the default range.
_U_REF = 14.3


@dataclass(frozen=True)
class BuildingSpec:
    center_xy: tuple[float, float]
    height: float
    side: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center_xy", tuple(float(v) for v in self.center_xy))
        if not (self.height > 0 and self.side > 0):
            raise ConfigError(f"building height and side must be positive: {self}")


DEFAULT_BUILDINGS = (
    BuildingSpec((-1.0, -1.0), 4.0),
    BuildingSpec((1.0, 0.0), 3.0),
    BuildingSpec((-1.0, 1.0), 2.0),
)
DEFAULT_GRID = GridSpec((-4.0, -4.0, 0.0), (0.25, 0.25, 0.25), (33, 33, 25))
REDUCED_GRID = GridSpec((-4.0, -4.0, 0.0), (0.5, 0.5, 0.5), (17, 17, 13))


@dataclass(frozen=True)
class WakeParams:
    amplitude: float = 0.6
    width: float = 0.4
    spread: float = 0.15
    cutoff_width: float = 0.15


@dataclass(frozen=True)
class GenConfig:
    """Generator settings; defaults mirror the reference building-complex setup."""

    buildings: tuple[BuildingSpec, ...] = DEFAULT_BUILDINGS
    grid: GridSpec = DEFAULT_GRID
    m_train: int = 800
    n_test: int = 200
    u_range: tuple[float, float] = (7.9, 20.7)
    alpha_range: tuple[float, float] = (0.0, 360.0)
    reynolds_eps: float = 0.0
    noise_sigma: float = 0.0
    seed: int = 0
    length_scale: float = 0.5
    wake: WakeParams = field(default_factory=WakeParams)

    def __post_init__(self):
        object.__setattr__(self, "buildings", tuple(self.buildings))
        lo, hi = self.u_range
        if not (lo > 0 and hi >= lo):
            raise ConfigError(f"u_range must satisfy 0 < min <= max, got {self.u_range}")
        a_lo, a_hi = self.alpha_range
        if not (0.0 <= a_lo <= a_hi <= 360.0):
            raise ConfigError(f"alpha_range must lie within [0, 360], got {self.alpha_range}")
        if self.m_train < 1 or self.n_test < 0:
            raise ConfigError("m_train must be >= 1 and n_test >= 0")
        if self.reynolds_eps < 0 or self.noise_sigma < 0:
            raise ConfigError("reynolds_eps and noise_sigma must be non-negative")
        if not self.buildings:
            raise ConfigError("at least one building is required")

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        d = dict(d)
        kwargs = {}
        if "buildings" in d:
            kwargs["buildings"] = tuple(
                BuildingSpec(tuple(b["center_xy"]), float(b["height"]), float(b.get("side", 1.0)))
                for b in d.pop("buildings"))
        if "grid" in d:
            kwargs["grid"] = GridSpec.from_dict(d.pop("grid"))
        if "wake" in d:
            kwargs["wake"] = WakeParams(**d.pop("wake"))
        for key in ("u_range", "alpha_range"):
            if key in d:
                kwargs[key] = tuple(float(v) for v in d.pop(key))
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown generator settings: {sorted(unknown)}")
        kwargs.update(d)
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        out = asdict(self)
        out["grid"] = self.grid.to_dict()
        out["buildings"] = [asdict(b) | {"center_xy": list(b.center_xy)} for b in self.buildings]
        out["u_range"] = list(self.u_range)
        out["alpha_range"] = list(self.alpha_range)
        return out

    def with_(self, **changes) -> "GenConfig":
        return replace(self, **changes)


def wake_deficit(points: np.ndarray, building: BuildingSpec, alpha_deg: float,
                 wake: WakeParams = WakeParams()) -> np.ndarray:
    """Dimensionless streamwise velocity deficit of one building at ``points``."""
    a = np.deg2rad(alpha_deg)
    ca, sa = np.cos(a), np.sin(a)
    rx = points[:, 0] - building.center_xy[0]
    ry = points[:, 1] - building.center_xy[1]
    # Downstream distance measured from the rear-most footprint corner.
    rear = 0.5 * building.side * (abs(ca) + abs(sa))
    xd = rx * ca + ry * sa - rear
    yc = -rx * sa + ry * ca
    active = xd >= 0.0
    xd = np.where(active, xd, 0.0)
    sigma = wake.width + wake.spread * xd
    amp = wake.amplitude / (1.0 + xd)
    lateral = np.exp(-0.5 * (yc / sigma) ** 2)
    arg = np.clip((points[:, 2] - building.height) / wake.cutoff_width, -50.0, 50.0)
    vertical = 1.0 / (1.0 + np.exp(arg))
    return np.where(active, amp * lateral * vertical, 0.0)


def reynolds_shape(points: np.ndarray) -> np.ndarray:
    """Smooth, bounded, direction-independent perturbation pattern."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    q = np.pi / 4.0
    return np.column_stack([
        np.sin(q * x) * np.cos(q * y),
        np.cos(q * x) * np.sin(q * y),
        0.5 * np.sin(np.pi * z / 6.0),
    ])


def building_mask(points: np.ndarray, buildings: Sequence[BuildingSpec]) -> np.ndarray:
    inside = np.zeros(len(points), dtype=bool)
    for b in buildings:
        h = 0.5 * b.side + _FOOTPRINT_TOL
        inside |= ((np.abs(points[:, 0] - b.center_xy[0]) <= h)
                   & (np.abs(points[:, 1] - b.center_xy[1]) <= h)
                   & (points[:, 2] <= b.height + _FOOTPRINT_TOL))
    return inside


def unit_field(alpha_deg: float, points: np.ndarray, buildings: Sequence[BuildingSpec],
               wake: WakeParams = WakeParams()) -> np.ndarray:
    """Reynolds-independent normalized field at ``points`` (no perturbation, no noise)."""
    a = np.deg2rad(alpha_deg)
    deficit = np.zeros(len(points))
    for b in buildings:
        deficit += wake_deficit(points, b, alpha_deg, wake)
    speed = 1.0 - deficit
    return np.column_stack([speed * np.cos(a), speed * np.sin(a), np.zeros(len(points))])


def _snapshot_rng(seed: int, snapshot_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(1, snapshot_id))))


def _field_values(mu: OperatingCondition, cfg: GenConfig, snapshot_id: int,
                  points: np.ndarray, solid: np.ndarray) -> np.ndarray:
    u_plus = unit_field(mu.alpha, points, cfg.buildings, cfg.wake)
    if cfg.reynolds_eps > 0:
        u_plus = u_plus + cfg.reynolds_eps * np.log(mu.u_inf / _U_REF) * reynolds_shape(points)
    values = mu.u_inf * u_plus
    if cfg.noise_sigma > 0:
        rng = _snapshot_rng(cfg.seed, snapshot_id)
        values = values + rng.normal(0.0, cfg.noise_sigma * mu.u_inf, size=values.shape)
    values[solid] = 0.0
    return values


def generate_snapshot(mu: OperatingCondition, cfg: GenConfig, snapshot_id: int = 0) -> Snapshot:
    """One dimensional snapshot; the noise substream is keyed by ``snapshot_id``."""
    points = cfg.grid.node_coords()
    solid = building_mask(points, cfg.buildings)
    values = _field_values(mu, cfg, snapshot_id, points, solid)
    return Snapshot(snapshot_id, mu, VelocityField(cfg.grid, values))


def sample_conditions(cfg: GenConfig) -> list[OperatingCondition]:
    n = cfg.m_train + cfg.n_test
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed, spawn_key=(0,))))
    u = rng.uniform(cfg.u_range[0], cfg.u_range[1], n)
    alpha = np.mod(rng.uniform(cfg.alpha_range[0], cfg.alpha_range[1], n), 360.0)
    return [OperatingCondition(float(ui), float(ai)) for ui, ai in zip(u, alpha)]


def generate_fields(conditions: Sequence[OperatingCondition], ids: Sequence[int],
                    cfg: GenConfig, n_jobs: int = 1) -> np.ndarray:
    """Stacked dimensional fields ``(n, n_nodes, 3)`` for the given conditions."""
    points = cfg.grid.node_coords()
    solid = building_mask(points, cfg.buildings)
    out = np.empty((len(conditions), cfg.grid.n_nodes, 3))

    def work(pos):
        out[pos] = _field_values(conditions[pos], cfg, int(ids[pos]), points, solid)

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            list(pool.map(work, range(len(conditions))))
    else:
        for pos in range(len(conditions)):
            work(pos)
    return out


def generate_dataset(cfg: GenConfig, n_jobs: int = 1) -> tuple[Dataset, Dataset]:
    """Training and test datasets; snapshot ids run 1..M then M+1..M+N."""
    conditions = sample_conditions(cfg)
    ids = np.arange(1, len(conditions) + 1)
    values = generate_fields(conditions, ids, cfg, n_jobs=n_jobs)
    m = cfg.m_train

    def build(sl, role):
        conds = conditions[sl]
        return Dataset(cfg.grid, ids[sl], [c.u_inf for c in conds], [c.alpha for c in conds],
                       values[sl], role=role, length_scale=cfg.length_scale)

    return build(slice(0, m), "train"), build(slice(m, None), "test")
