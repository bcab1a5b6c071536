"""End-to-end orchestration and report generation.

Artifact directory layout::

    config.json                 resolved configuration
    data/train, data/test       datasets (manifest + raw fields)
    model/                      cluster model
    matrices/                   inference matrices and their entropies
    optimize/                   candidate table and summary
    evaluate/                   per-test-snapshot errors at the chosen sensor
    reports/                    figure-data CSVs
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .crom import ClusterModel, fit_clusters, representation_error
from .estimator import (
    SensorSpec,
    Trajectory,
    TrajectoryEvaluator,
    build_signal_library,
    estimate_points,
)
from .exceptions import ClusterFlowError, ConfigError, StageError
from .field import Dataset, plane_nodes, read_dataset, write_dataset, write_slice_csv
from .inference import (
    build_all_matrices,
    column_uncertainty,
    matrix_filename,
    read_matrix_csv,
    write_matrix_csv,
)
from .partition import default_subdomains
from .sensor_opt import build_candidate_grid, optimize_sensor, read_summary
from .synthetic import GenConfig, generate_dataset

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger(__name__)

QUANTILE_THRESHOLDS = (20.0, 30.0, 40.0)


def derive_seed(root: int, stage: int) -> int:
    return int(np.random.SeedSequence(root, spawn_key=(1000 + stage,)).generate_state(1)[0])


@dataclass(frozen=True)
class TrajectorySpec:
    start: tuple[float, float, float] = (-2.0, 0.0, 1.0)
    end: tuple[float, float, float] = (2.0, 0.0, 1.0)
    n_samples: int = 101

    def build(self, subs) -> Trajectory:
        return Trajectory.line(self.start, self.end, self.n_samples, subs)


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of a pipeline run; defaults follow the reference parameter set.

    ``K = 20`` clusters, ``knn_u_inf = 4`` neighbours for the incoming wind
    and a two-centroid sensor affiliation (``knn_affiliation = 2``).
    """

    seed: int = 0
    generator: GenConfig = field(default_factory=lambda: GenConfig(reynolds_eps=0.02))
    K: int = 20
    knn_u_inf: int = 4
    knn_affiliation: int = 2
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    component: str = "all"
    optimize: bool = True
    sensor: tuple[float, float, float] | None = None
    slice_axis: str = "x"
    slice_value: float = 0.0
    threads: int = 1

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.knn_affiliation not in (1, 2):
            raise ConfigError("knn_affiliation must be 1 or 2")
        if self.knn_u_inf < 1:
            raise ConfigError("knn_u_inf must be >= 1")
        if self.component not in ("all", "x"):
            raise ConfigError("component must be 'all' or 'x'")
        if self.slice_axis not in ("x", "y", "z"):
            raise ConfigError("slice_axis must be x, y or z")
        if not self.optimize and self.sensor is None:
            raise ConfigError("a fixed sensor location is required when optimization is off")

    @property
    def generator_seed(self) -> int:
        return derive_seed(self.seed, 0)

    @property
    def cluster_seed(self) -> int:
        return derive_seed(self.seed, 1) % (2 ** 32)

    def resolved_generator(self) -> GenConfig:
        return replace(self.generator, seed=self.generator_seed)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["generator"] = self.generator.to_dict()
        d["trajectory"] = {k: list(v) if isinstance(v, tuple) else v
                           for k, v in asdict(self.trajectory).items()}
        d["sensor"] = list(self.sensor) if self.sensor is not None else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        kwargs = {}
        if "generator" in d:
            gen = dict(d.pop("generator"))
            gen.pop("seed", None)
            base = {"reynolds_eps": 0.02}
            base.update(gen)
            kwargs["generator"] = GenConfig.from_dict(base)
        if "trajectory" in d:
            t = d.pop("trajectory")
            kwargs["trajectory"] = TrajectorySpec(
                tuple(t.get("start", TrajectorySpec.start)), tuple(t.get("end", TrajectorySpec.end)),
                int(t.get("n_samples", TrajectorySpec.n_samples)))
        if d.get("sensor") is not None:
            kwargs["sensor"] = tuple(float(v) for v in d.pop("sensor"))
        else:
            d.pop("sensor", None)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {sorted(unknown)}")
        kwargs.update(d)
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def with_(self, **changes) -> "PipelineConfig":
        return replace(self, **changes)


def load_config(path=None, **overrides) -> PipelineConfig:
    data = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    cfg = PipelineConfig.from_dict(data)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return cfg.with_(**overrides) if overrides else cfg


def _stage(name):
    def wrap(fn):
        def run(*args, **kwargs):
            logger.info("stage %s", name)
            try:
                return fn(*args, **kwargs)
            except StageError:
                raise
            except (ClusterFlowError, OSError, ValueError, KeyError) as exc:
                raise StageError(name, exc) from exc
        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run
    return wrap


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise StageError(stage, FileNotFoundError(f"missing artifact {path}"))
    return path


# -- stages ---------------------------------------------------------------------

@_stage("gen")
def stage_gen(cfg: PipelineConfig, out: Path):
    train, test = generate_dataset(cfg.resolved_generator(), n_jobs=cfg.threads)
    for ds, name in ((train, "train"), (test, "test")):
        target = out / "data" / name
        if target.exists():
            shutil.rmtree(target)
        write_dataset(ds, target)
    return train, test


@_stage("train")
def stage_train(cfg: PipelineConfig, out: Path, train: Dataset) -> ClusterModel:
    model = fit_clusters(train, default_subdomains(1.0), K=cfg.K, seed=cfg.cluster_seed)
    model.save(out / "model")
    return model


@_stage("matrices")
def stage_matrices(model: ClusterModel, out: Path):
    matrices = build_all_matrices(model)
    write_matrices(matrices, out / "matrices")
    return matrices


def write_matrices(matrices, directory: Path, prefix: str = "") -> None:
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for (a, b), P in sorted(matrices.items()):
        write_matrix_csv(P, directory / (prefix + matrix_filename(a, b)))
        H, KL, mH, mKL = column_uncertainty(P)
        for i in range(P.K):
            rows.append([a, b, i, repr(float(H[i])), repr(float(KL[i]))])
        rows.append([a, b, "mean", repr(mH), repr(mKL)])
    with open(directory / (prefix + "uncertainty.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "target", "source_cluster", "entropy", "kl_from_uniform"])
        w.writerows(rows)


def read_matrices(directory: Path, subs) -> dict:
    out = {}
    for a in subs:
        for b in subs:
            if a.index != b.index:
                P = read_matrix_csv(directory / matrix_filename(a.index, b.index))
                out[(a.index, b.index)] = P
    return out


@_stage("optimize")
def stage_optimize(cfg: PipelineConfig, out: Path, model, matrices, train: Dataset):
    traj = cfg.trajectory.build(model.subdomains)
    candidates = build_candidate_grid(cfg.generator.buildings, model.subdomains)
    report = optimize_sensor(model, matrices, train, candidates, traj, k=cfg.knn_affiliation,
                             k_uinf=cfg.knn_u_inf, component=cfg.component, n_jobs=cfg.threads)
    report.write(out / "optimize")
    return report


def chosen_sensor(cfg: PipelineConfig, out: Path, subs) -> SensorSpec:
    if cfg.sensor is not None and not cfg.optimize:
        return SensorSpec.at(cfg.sensor, subs)
    summary = read_summary(_require(out / "optimize", "optimize"))
    return SensorSpec.at(summary["best_location"], subs)


@_stage("evaluate")
def stage_evaluate(cfg: PipelineConfig, out: Path, model, matrices, train: Dataset, test: Dataset):
    if len(test) == 0:
        logger.warning("test set is empty; evaluate stage skipped")
        return None
    sensor = chosen_sensor(cfg, out, model.subdomains)
    traj = cfg.trajectory.build(model.subdomains)
    lib = build_signal_library(model, train, sensor)
    table = TrajectoryEvaluator(model, matrices, test, traj, k=cfg.knn_affiliation,
                                k_uinf=cfg.knn_u_inf, component=cfg.component).table(lib)
    directory = out / "evaluate"
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "test_errors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "u_inf_mps", "alpha_deg", "E_percent"])
        for sid, u, a, e in zip(table.ids, table.u_inf, table.alpha, table.errors):
            w.writerow([int(sid), repr(float(u)), repr(float(a)), repr(float(e))])
    _write_json(directory / "summary.json", {
        "E_test_percent": table.average, "n_cases": int(len(table.ids)),
        "n_undefined": table.n_failed, "sensor": list(sensor.location),
        "sensor_subdomain": sensor.sub_index})
    return table


# -- reports --------------------------------------------------------------------

def _read_errors(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    ids = np.array([int(r["id"]) for r in rows])
    alpha = np.array([float(r["alpha_deg"]) for r in rows])
    err = np.array([float(r["E_percent"]) for r in rows])
    return ids, alpha, err


def quantile_summary(errors) -> dict:
    e = np.asarray(errors, dtype=float)
    e = e[~np.isnan(e)]
    lo, mid, hi = QUANTILE_THRESHOLDS
    return {
        "n_cases": int(e.size),
        "mean_E_percent": float(e.mean()),
        f"fraction_below_{lo:g}": float(np.mean(e < lo)),
        f"fraction_below_{mid:g}": float(np.mean(e < mid)),
        f"fraction_above_{hi:g}": float(np.mean(e > hi)),
    }


def representative_case(ids, errors) -> int:
    """Snapshot whose error is closest to the mean error (ties to the lowest id)."""
    e = np.asarray(errors, dtype=float)
    ok = ~np.isnan(e)
    gap = np.abs(e[ok] - e[ok].mean())
    cand = np.asarray(ids)[ok]
    order = np.lexsort((cand, gap))
    return int(cand[order[0]])


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([v if isinstance(v, (int, str, np.integer)) else repr(float(v)) for v in r])


def emit_reports(artifacts) -> Path:
    """Regenerate every report CSV from the on-disk artifacts of a run."""
    art = Path(artifacts)
    stage = "report"
    cfg = PipelineConfig.from_dict(json.loads(_require(art / "config.json", stage).read_text()))
    model = ClusterModel.load(_require(art / "model", "train"))
    subs = model.subdomains
    train = read_dataset(_require(art / "data" / "train", "gen"))
    _require(art / "matrices", "matrices")
    matrices = read_matrices(art / "matrices", subs)
    reports = art / "reports"
    reports.mkdir(parents=True, exist_ok=True)

    write_matrices(matrices, reports, prefix="inference_")

    test_dir = art / "data" / "test"
    test = read_dataset(test_dir) if (test_dir / "manifest.json").exists() else None
    rep_rows, rep_summary = [], []
    for sub in subs:
        for role, ds in (("train", train), ("test", test)):
            if ds is None or len(ds) == 0:
                continue
            per, avg = representation_error(model, ds, sub.index)
            rep_rows.extend([sub.index, role, int(sid), e] for sid, e in zip(ds.ids, per))
            rep_summary.append([sub.index, role, model.K, avg])
    _write_rows(reports / "representation_error.csv",
                ["subdomain", "role", "snapshot_id", "E_percent"], rep_rows)
    _write_rows(reports / "representation_error_summary.csv",
                ["subdomain", "role", "K", "mean_E_percent"], rep_summary)

    err_path = art / "evaluate" / "test_errors.csv"
    if test is None or len(test) == 0 or not err_path.exists():
        logger.warning("no test evaluation available; error reports skipped")
        return reports
    ids, alpha, err = _read_errors(err_path)
    _write_rows(reports / "error_vs_alpha.csv", ["id", "alpha_deg", "E_percent"],
                [[int(i), a, e] for i, a, e in zip(ids, alpha, err)])
    summary = quantile_summary(err)
    case_id = representative_case(ids, err)
    summary["representative_id"] = case_id
    summary["representative_E_percent"] = float(err[ids == case_id][0])
    _write_rows(reports / "quantile_summary.csv", ["metric", "value"],
                [[k, v] for k, v in summary.items()])

    # Representative case: slice and trajectory profile.
    sensor = chosen_sensor(cfg, art, subs)
    lib = build_signal_library(model, train, sensor)
    pos = int(np.nonzero(test.ids == case_id)[0][0])
    snap = test[pos]
    signal = test.sample(np.asarray(sensor.location)[None, :])[pos, 0]
    kw = dict(k=cfg.knn_affiliation, k_uinf=cfg.knn_u_inf)

    nodes = plane_nodes(test.grid, cfg.slice_axis, cfg.slice_value)
    xyz = test.grid.node_coords()[nodes]
    write_slice_csv(snap.field, cfg.slice_axis, cfg.slice_value, reports / "slice_truth.csv")
    from .partition import locate_many
    inside = locate_many(xyz, subs) > 0
    est = np.full((len(nodes), 3), np.nan)
    if np.any(inside):
        est[inside] = estimate_points(model, matrices, lib, signal, xyz[inside], **kw).velocity
    _write_rows(reports / "slice_estimate.csv", ["x", "y", "z", "u", "v", "w"],
                [[*p, *u] for p, u in zip(xyz, est)])

    traj = cfg.trajectory.build(subs)
    tr_est = estimate_points(model, matrices, lib, signal, traj.points, **kw)
    truth = test.sample(traj.points)[pos]
    u_inf = snap.mu.u_inf
    _write_rows(reports / "trajectory_profile.csv",
                ["beta", "x", "y", "z", "U_plus_true", "U_plus_hat"],
                [[b, *p, t[0] / u_inf, h[0] / u_inf]
                 for b, p, t, h in zip(traj.beta, traj.points, truth, tr_est.velocity)])
    return reports


def run_pipeline(cfg: PipelineConfig, out) -> Path:
    """gen, train, matrices, optimize, evaluate, report; reruns overwrite identically."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    train, test = stage_gen(cfg, out)
    model = stage_train(cfg, out, train)
    matrices = stage_matrices(model, out)
    if cfg.optimize:
        stage_optimize(cfg, out, model, matrices, train)
    stage_evaluate(cfg, out, model, matrices, train, test)
    del train, test
    _stage("report")(emit_reports)(out)
    return out
