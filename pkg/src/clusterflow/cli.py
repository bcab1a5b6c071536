"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .crom import ClusterModel, fit_clusters
from .estimator import SensorSpec, TrajectoryEvaluator, build_signal_library, estimate_trajectory
from .exceptions import ClusterFlowError, ConfigError, DataError
from .field import read_dataset, write_dataset
from .inference import build_all_matrices
from .partition import default_subdomains
from .pipeline import (
    emit_reports,
    load_config,
    read_matrices,
    run_pipeline,
    write_matrices,
)
from .sensor_opt import build_candidate_grid, optimize_sensor
from .synthetic import generate_dataset

logger = logging.getLogger("clusterflow")


def _dataset_dir(path, role="train") -> Path:
    path = Path(path)
    if (path / "manifest.json").exists():
        return path
    if (path / role / "manifest.json").exists():
        return path / role
    raise DataError(f"no {role} dataset found under {path}")


def _matrices_for(model, path):
    if path is not None:
        return read_matrices(Path(path), model.subdomains)
    return build_all_matrices(model)


def _point(text) -> tuple[float, float, float]:
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}") from None
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected x,y,z, got {text!r}")
    return vals


def _config(args, **extra):
    overrides = dict(seed=getattr(args, "seed", None), K=getattr(args, "K", None),
                     knn_affiliation=getattr(args, "knn_affiliation", None),
                     threads=getattr(args, "threads", None),
                     component=getattr(args, "component", None))
    overrides.update(extra)
    return load_config(getattr(args, "config", None), **overrides)


def _sensor(args, cfg, subs) -> SensorSpec:
    if getattr(args, "candidate", None) is not None:
        try:
            return build_candidate_grid(cfg.generator.buildings, subs).by_id(args.candidate).sensor
        except KeyError as exc:
            raise ConfigError(str(exc)) from None
    if getattr(args, "sensor", None) is not None:
        return SensorSpec.at(args.sensor, subs)
    summary = getattr(args, "summary", None)
    if summary is not None:
        data = json.loads((Path(summary) / "summary.json").read_text())
        return SensorSpec.at(data["best_location"], subs)
    raise ConfigError("give --sensor x,y,z, --candidate ID or --summary DIR")


# -- subcommands ------------------------------------------------------------------

def cmd_gen(args):
    cfg = _config(args)
    train, test = generate_dataset(cfg.resolved_generator(), n_jobs=cfg.threads)
    write_dataset(train, Path(args.out) / "train")
    write_dataset(test, Path(args.out) / "test")
    print(f"wrote {len(train)} train and {len(test)} test snapshots to {args.out}")


def cmd_train(args):
    train = read_dataset(_dataset_dir(args.data))
    model = fit_clusters(train, default_subdomains(1.0), K=args.K, seed=args.seed)
    model.save(args.out)
    print(f"model with K={model.K} written to {args.out}")


def cmd_matrices(args):
    model = ClusterModel.load(args.model)
    write_matrices(build_all_matrices(model), Path(args.out))
    print(f"inference matrices written to {args.out}")


def cmd_optimize(args):
    cfg = _config(args)
    model = ClusterModel.load(args.model)
    train = read_dataset(_dataset_dir(args.data))
    matrices = _matrices_for(model, args.matrices)
    traj = cfg.trajectory.build(model.subdomains)
    cands = build_candidate_grid(cfg.generator.buildings, model.subdomains)
    report = optimize_sensor(model, matrices, train, cands, traj, k=cfg.knn_affiliation,
                             k_uinf=cfg.knn_u_inf, component=cfg.component, n_jobs=cfg.threads)
    report.write(args.out)
    print(f"best candidate {report.best_id}: E_train = {report.best_error:.4f} %")


def cmd_evaluate(args):
    cfg = _config(args)
    model = ClusterModel.load(args.model)
    train = read_dataset(_dataset_dir(args.data))
    test = read_dataset(_dataset_dir(args.test, role="test"))
    matrices = _matrices_for(model, args.matrices)
    sensor = _sensor(args, cfg, model.subdomains)
    lib = build_signal_library(model, train, sensor)
    traj = cfg.trajectory.build(model.subdomains)
    table = TrajectoryEvaluator(model, matrices, test, traj, k=cfg.knn_affiliation,
                                k_uinf=cfg.knn_u_inf, component=cfg.component).table(lib)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "test_errors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "u_inf_mps", "alpha_deg", "E_percent"])
        for row in zip(table.ids, table.u_inf, table.alpha, table.errors):
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])
    (out / "summary.json").write_text(json.dumps(
        {"E_test_percent": table.average, "n_cases": int(len(table.ids)),
         "n_undefined": table.n_failed, "sensor": list(sensor.location),
         "sensor_subdomain": sensor.sub_index}, indent=1, sort_keys=True) + "\n")
    print(f"E(test) = {table.average:.4f} % over {len(table.ids)} snapshots")


def read_signal_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if len(rows) != 1:
        raise DataError(f"{path}: expected exactly one u,v,w row, got {len(rows)}")
    try:
        return np.array([float(rows[0][c]) for c in ("u", "v", "w")])
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: bad signal row ({exc})") from None


def cmd_estimate(args):
    cfg = _config(args)
    model = ClusterModel.load(args.model)
    train = read_dataset(_dataset_dir(args.data))
    matrices = _matrices_for(model, args.matrices)
    sensor = _sensor(args, cfg, model.subdomains)
    lib = build_signal_library(model, train, sensor)
    traj = cfg.trajectory.build(model.subdomains)
    est = estimate_trajectory(model, matrices, lib, read_signal_csv(args.signal), traj,
                              k=cfg.knn_affiliation, k_uinf=cfg.knn_u_inf)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["beta", "x", "y", "z", "u_hat", "v_hat", "w_hat", "entropy_of_q"])
        for b, p, v, h in zip(traj.beta, traj.points, est.velocity, est.entropy):
            w.writerow([repr(float(x)) for x in (b, *p, *v, h)])
    print(f"U_inf estimate {est.u_inf_hat:.4f} m/s; {traj.n_samples} points written to {out}")


def cmd_report(args):
    path = emit_reports(args.artifacts)
    print(f"reports written to {path}")


def cmd_pipeline(args):
    cfg = _config(args)
    out = run_pipeline(cfg, args.out)
    summary = out / "evaluate" / "summary.json"
    if summary.exists():
        print(f"E(test) = {json.loads(summary.read_text())['E_test_percent']:.4f} %")
    print(f"artifacts in {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clusterflow", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, model=False, data=False):
        p.add_argument("--config", help="TOML configuration file")
        p.add_argument("--seed", type=int, help="root seed")
        p.add_argument("--threads", type=int, help="worker cap for parallel stages")
        p.add_argument("--knn-affiliation", type=int, choices=(1, 2), dest="knn_affiliation")
        p.add_argument("--component", choices=("all", "x"))
        if model:
            p.add_argument("--model", required=True, help="model artifact directory")
            p.add_argument("--matrices", help="inference-matrix directory (default: rebuild)")
        if data:
            p.add_argument("--data", required=True, help="training dataset directory")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="cluster a training dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--K", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("matrices", help="build inference matrices from a model")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_matrices)

    p = sub.add_parser("optimize", help="exhaustive sensor placement over the candidate grid")
    common(p, model=True, data=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("evaluate", help="test-set error at a sensor location")
    common(p, model=True, data=True)
    p.add_argument("--test", required=True, help="test dataset directory")
    p.add_argument("--sensor", type=_point)
    p.add_argument("--candidate", type=int)
    p.add_argument("--summary", help="optimize output directory (uses its best sensor)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("estimate", help="estimate velocities along the trajectory from a signal")
    common(p, model=True, data=True)
    p.add_argument("--sensor", type=_point)
    p.add_argument("--candidate", type=int)
    p.add_argument("--summary")
    p.add_argument("--signal", required=True, help="CSV with columns u,v,w in m/s")
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("report", help="emit report CSVs from a pipeline artifact directory")
    p.add_argument("--artifacts", "--out", required=True, dest="artifacts")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    common(p)
    p.add_argument("--K", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ClusterFlowError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
