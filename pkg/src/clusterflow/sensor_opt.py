"""Candidate sensor grid and exhaustive placement search."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .crom import ClusterModel
from .estimator import (
    SensorSpec,
    SignalLibrary,
    Trajectory,
    TrajectoryEvaluator,
    build_signal_library,
    trajectory_errors,
    _estimate_batch,
)
from .exceptions import PlacementError
from .field import Dataset
from .partition import Subdomain, locate
from .synthetic import DEFAULT_BUILDINGS, BuildingSpec

# Projection pattern on the roof: two lower corners, centre, two upper corners.
PROJECTION_OFFSETS = ((-1, -1), (1, -1), (0, 0), (-1, 1), (1, 1))
N_LEVELS = 5
LEVEL_STEP = 0.1
BASE_CLEARANCE = 0.2
CORNER_OFFSET = 0.5


@dataclass(frozen=True)
class Candidate:
    id: int
    sensor: SensorSpec
    local_id: int


@dataclass(frozen=True)
class CandidateSet:
    candidates: tuple[Candidate, ...]

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def by_id(self, cid: int) -> Candidate:
        for c in self.candidates:
            if c.id == cid:
                return c
        raise KeyError(f"no candidate with id {cid}")


def build_candidate_grid(buildings: Sequence[BuildingSpec] = DEFAULT_BUILDINGS,
                         subs: Sequence[Subdomain] | None = None, L: float = 1.0) -> CandidateSet:
    """25 roof-top candidates per building, numbered 1.. building by building.

    Within a building the local id is ``5 * level + position`` (1-based
    position in :data:`PROJECTION_OFFSETS`), levels rising by 0.1 L from
    0.2 L above the roof.
    """
    from .partition import default_subdomains

    subs = tuple(subs) if subs is not None else default_subdomains(L)
    if len(subs) != len(buildings):
        raise PlacementError("one subdomain per building is required")
    out = []
    cid = 0
    for b, sub in zip(buildings, sorted(subs, key=lambda s: s.index)):
        cx, cy = b.center_xy
        for level in range(N_LEVELS):
            z = b.height + (BASE_CLEARANCE + LEVEL_STEP * level) * L
            for pos, (ox, oy) in enumerate(PROJECTION_OFFSETS):
                cid += 1
                loc = (cx + ox * CORNER_OFFSET * L, cy + oy * CORNER_OFFSET * L, z)
                if locate(loc, subs) != sub.index:
                    raise PlacementError(f"candidate {cid} at {loc} is outside subdomain {sub.index}")
                out.append(Candidate(cid, SensorSpec(loc, sub.index), N_LEVELS * level + pos + 1))
    return CandidateSet(tuple(out))


@dataclass(frozen=True, eq=False)
class OptimizationReport:
    ids: np.ndarray
    locations: np.ndarray
    subdomains: np.ndarray
    errors: np.ndarray
    settings: dict = field(default_factory=dict)

    @property
    def best_index(self) -> int:
        # argmin returns the first minimum, i.e. the lowest id for sorted ids.
        return int(np.nanargmin(self.errors))

    @property
    def best_id(self) -> int:
        return int(self.ids[self.best_index])

    @property
    def best_error(self) -> float:
        return float(self.errors[self.best_index])

    @property
    def best_location(self) -> tuple[float, float, float]:
        return tuple(float(v) for v in self.locations[self.best_index])

    def write(self, directory) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        table = directory / "candidates.csv"
        with open(table, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "x", "y", "z", "subdomain", "E_train_percent"])
            for cid, loc, sub, err in zip(self.ids, self.locations, self.subdomains, self.errors):
                w.writerow([int(cid), *(repr(float(v)) for v in loc), int(sub), repr(float(err))])
        summary = directory / "summary.json"
        payload = {"best_id": self.best_id, "best_E_train_percent": self.best_error,
                   "best_location": list(self.best_location),
                   "best_subdomain": int(self.subdomains[self.best_index]),
                   "n_candidates": int(len(self.ids)), "settings": self.settings}
        summary.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
        return table, summary


class _SweepKernel:
    """Picklable subset of a TrajectoryEvaluator: enough to score a library."""

    def __init__(self, ev: TrajectoryEvaluator):
        self.projector = ev.projector
        self.truth = ev.truth
        self.beta = ev.traj.beta
        self.k = ev.k
        self.k_uinf = ev.k_uinf
        self.component = ev.component

    def errors(self, lib: SignalLibrary) -> np.ndarray:
        vel, _, _ = _estimate_batch(lib.training_signals, lib, self.projector, self.k, self.k_uinf)
        return trajectory_errors(vel, self.truth, self.beta, self.component)


_KERNEL = None


def _init_worker(kernel):
    global _KERNEL
    _KERNEL = kernel


def _score(lib):
    errs = _KERNEL.errors(lib)
    return float(np.mean(errs[~np.isnan(errs)])) if np.any(~np.isnan(errs)) else float("nan")


def optimize_sensor(model: ClusterModel, matrices, train: Dataset, candidates: CandidateSet,
                    traj: Trajectory, k: int = 2, k_uinf: int = 4, component: str = "all",
                    n_jobs: int = 1) -> OptimizationReport:
    """Average training-set estimation error for every candidate, and the minimizer.

    The cluster model and matrices are shared; only the signal library
    changes between candidates. ``n_jobs > 1`` distributes candidates over
    worker processes; the table is identical to the serial sweep.
    """
    ev = TrajectoryEvaluator(model, matrices, train, traj, k=k, k_uinf=k_uinf, component=component)
    libs = [build_signal_library(model, train, c.sensor) for c in candidates]
    kernel = _SweepKernel(ev)
    if n_jobs and n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs, initializer=_init_worker,
                                 initargs=(kernel,)) as pool:
            errors = list(pool.map(_score, libs, chunksize=max(1, len(libs) // (4 * n_jobs))))
    else:
        _init_worker(kernel)
        errors = [_score(lib) for lib in libs]
    settings = {"k": k, "k_uinf": k_uinf, "K": model.K, "component": component,
                "trajectory": {"n_samples": traj.n_samples,
                               "start": [float(v) for v in traj.points[0]],
                               "end": [float(v) for v in traj.points[-1]]}}
    return OptimizationReport(
        ids=np.array([c.id for c in candidates]),
        locations=np.array([c.sensor.location for c in candidates]),
        subdomains=np.array([c.sensor.sub_index for c in candidates]),
        errors=np.array(errors),
        settings=settings,
    )


def read_summary(directory) -> dict:
    return json.loads((Path(directory) / "summary.json").read_text())


def available_workers() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
