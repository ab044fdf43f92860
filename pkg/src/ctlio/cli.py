"""Command-line entry points: simulate, odometry, loop-correct, evaluate, plot-data."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import dump_config, load_config, parse_pairs
from .estimator import EstimatorConfig, extrinsics_from_rpy, run_odometry
from .geometry import RigidTransform, log_so3_batch, quat_from_rotation, rotation_from_quat
from .imu import GRAVITY, ImuBias, ImuData, predicted_accel
from .lidar import Scan, read_scan_index, write_ply
from .loopclosure import loop_correct, read_loops
from .sim import SimConfig, emit_dataset
from .trajectory import Trajectory, export_tum, read_tum, sample_times

log = logging.getLogger(__name__)

ASSOCIATION_WINDOW = 0.005
EXPORT_RATE = 100.0
KEYSCAN_HEADER = ["id", "t", "tx", "ty", "tz", "qx", "qy", "qz", "qw"]


class CliError(Exception):
    pass


# --- evaluation --------------------------------------------------------------

@dataclass
class EvaluationResult:
    trans_rmse: float
    rot_rmse: float
    times: np.ndarray
    trans_errors: np.ndarray
    rot_errors: np.ndarray
    alignment: str


def associate_times(t_est, t_gt, window: float = ASSOCIATION_WINDOW):
    """Index pairs ``(i_est, i_gt)`` matching each estimate to its nearest gt stamp."""
    t_est, t_gt = np.asarray(t_est, float), np.asarray(t_gt, float)
    if len(t_est) == 0 or len(t_gt) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    hi = np.clip(np.searchsorted(t_gt, t_est), 0, len(t_gt) - 1)
    lo = np.clip(hi - 1, 0, len(t_gt) - 1)
    j = np.where(np.abs(t_gt[lo] - t_est) <= np.abs(t_gt[hi] - t_est), lo, hi)
    ok = np.abs(t_gt[j] - t_est) <= window
    return np.flatnonzero(ok), j[ok]


def evaluate_poses(est, gt, mode: str = "first-pose-align") -> EvaluationResult:
    """``est`` and ``gt`` are ``(times, rotations, positions)`` triples."""
    if mode not in ("first-pose-align", "none"):
        raise CliError(f"unknown alignment mode {mode!r}")
    t_e, R_e, p_e = est
    t_g, R_g, p_g = gt
    ie, ig = associate_times(t_e, t_g)
    if len(ie) == 0:
        raise CliError("estimate and ground truth share no timestamps within 5 ms")
    R_e, p_e, R_g, p_g = R_e[ie], p_e[ie], R_g[ig], p_g[ig]
    if mode == "first-pose-align":
        A = RigidTransform(R_g[0], p_g[0]) @ RigidTransform(R_e[0], p_e[0]).inverse()
        R_e = A.rotation @ R_e
        p_e = p_e @ A.rotation.T + A.translation
    te = np.linalg.norm(p_e - p_g, axis=1)
    re = np.linalg.norm(log_so3_batch(np.swapaxes(R_g, -1, -2) @ R_e), axis=1)
    return EvaluationResult(float(np.sqrt(np.mean(te ** 2))), float(np.sqrt(np.mean(re ** 2))),
                            t_e[ie], te, re, mode)


# --- file helpers ------------------------------------------------------------

def write_keyscans(path, keyscans) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(KEYSCAN_HEADER)
        for ks in keyscans:
            q = quat_from_rotation(ks.pose.rotation)
            w.writerow([ks.id, repr(float(ks.t)), *(repr(float(x)) for x in ks.pose.translation),
                        *(repr(float(x)) for x in q)])


def read_keyscans(path):
    """``(ids, times, poses)`` from a key-scan CSV."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != KEYSCAN_HEADER:
            raise CliError(f"{path}: unexpected key-scan header")
        ids, times, poses = [], [], []
        for row in reader:
            if not row:
                continue
            v = [float(x) for x in row[1:]]
            ids.append(int(row[0]))
            times.append(v[0])
            poses.append(RigidTransform(rotation_from_quat(v[4:8]), v[1:4]))
    return ids, np.array(times), poses


def read_run_info(run_dir: Path) -> dict:
    path = run_dir / "run.txt"
    if not path.exists():
        raise CliError(f"{run_dir}: not an odometry output (run.txt missing)")
    return parse_pairs(path.read_text(), str(path))


def dataset_dir(run_dir: Path, info: dict) -> Path:
    ds = Path(info["dataset"])
    return ds if ds.is_absolute() else Path.cwd() / ds


def load_dataset(ds: Path):
    """IMU stream, scans and extrinsics of a simulated dataset directory."""
    manifest = ds / "manifest.txt"
    if not manifest.exists():
        raise CliError(f"{ds}: dataset manifest missing")
    sim_cfg = load_config(SimConfig, manifest)
    imu = ImuData.read_csv(ds / "imu.csv")
    index = ds / "scans" / "index.csv"
    entries = read_scan_index(index) if index.exists() else []
    if not entries:
        raise CliError(f"{ds}: dataset contains no scans")
    scans = []
    for n, (t, period, rel) in enumerate(entries):
        try:
            scans.append(Scan.read_csv(ds / rel, t, period))
        except (OSError, ValueError) as exc:
            raise CliError(f"scan {n} is unreadable: {exc}") from None
    ext = extrinsics_from_rpy(sim_cfg.extrinsic_translation, sim_cfg.extrinsic_rpy)
    return imu, scans, ext


def write_bias(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "bax", "bay", "baz", "bwx", "bwy", "bwz"])
        for t, b in history:
            w.writerow([repr(float(t)), *(repr(float(x)) for x in (*b.accel, *b.gyro))])


def read_bias(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], [ImuBias(r[1:4], r[4:7]) for r in data]


def _bias_at(times, biases, t):
    idx = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(biases) - 1)
    ba = np.array([b.accel for b in biases])[idx]
    bw = np.array([b.gyro for b in biases])[idx]
    return ba, bw


# --- commands ------------------------------------------------------------------

def cmd_simulate(args) -> None:
    overrides = {"seed": args.seed} if args.seed is not None else {}
    cfg = load_config(SimConfig, args.config, **overrides)
    if cfg.world and not Path(cfg.world).exists():
        raise CliError(f"world file not found: {cfg.world}")
    emit_dataset(cfg, args.out)
    print(f"wrote {cfg.n_scans} scans to {args.out}")


def cmd_odometry(args) -> None:
    cfg = load_config(EstimatorConfig, args.config)
    ds = Path(args.dataset)
    imu, scans, ext = load_dataset(ds)
    odo, reports = run_odometry(cfg, ext, imu, scans)
    odo.refresh_keyscan_poses()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    odo.trajectory.save(out / "trajectory.txt")
    export_tum(odo.trajectory, out / "trajectory.tum", EXPORT_RATE)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scan_id", "cost_init", "cost_final", "n_corr", "keyscan", "degenerate", "ms"])
        for r in reports:
            ms = 0.0 if args.no_timing else r.ms
            w.writerow([r.scan_id, repr(float(r.cost_init)), repr(float(r.cost_final)), r.n_corr,
                        int(r.keyscan), int(r.degenerate), f"{ms:.1f}"])
    write_keyscans(out / "keyscans.csv", odo.keyscans)
    write_bias(out / "bias.csv", odo.bias_history)
    points = [ks.pose @ ext for ks in odo.keyscans]
    cloud = [T.apply(np.vstack([ks.edge_points, ks.planar_points]))
             for T, ks in zip(points, odo.keyscans)]
    write_ply(out / "map.ply", np.vstack(cloud) if cloud else np.zeros((0, 3)))
    (out / "run.txt").write_text(f"dataset = {args.dataset}\n" + dump_config(cfg))
    print(f"processed {len(reports)} scans, {len(odo.keyscans)} key-scans")


def cmd_loop_correct(args) -> None:
    run_dir = Path(args.run)
    info = read_run_info(run_dir)
    traj = Trajectory.load(run_dir / "trajectory.txt")
    ids, times, _ = read_keyscans(run_dir / "keyscans.csv")
    loops = read_loops(args.constraints)
    known = set(ids)
    for c in loops:
        for i in (c.id_a, c.id_b):
            if i not in known:
                raise CliError(f"loop constraint references unknown key-scan id {i}")
    corrected, updated, r1, r2 = loop_correct(traj, ids, times, loops)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corrected.save(out / "trajectory.txt")
    export_tum(corrected, out / "trajectory.tum", EXPORT_RATE)
    with open(out / "keyscans.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(KEYSCAN_HEADER)
        for k, t in zip(ids, times):
            T = corrected.pose_at(t)
            w.writerow([k, repr(float(t)), *(repr(float(x)) for x in T.translation),
                        *(repr(float(x)) for x in quat_from_rotation(T.rotation))])
    lines = [f"loops = {len(loops)}",
             f"pose_graph = {r1.termination} {r1.iterations}",
             f"refit = {r2.termination} {r2.iterations}"]
    gt_path = Path(args.gt) if args.gt else dataset_dir(run_dir, info) / "groundtruth" / "trajectory.tum"
    if gt_path.exists():
        gt = read_tum(gt_path)
        t = sample_times(traj, EXPORT_RATE)
        for label, tr in (("before", traj), ("after", corrected)):
            s = tr.evaluate(t)
            res = evaluate_poses((t, s.R, s.p), gt, "none")
            lines.append(f"ape_trans_rmse_{label} = {res.trans_rmse!r}")
            lines.append(f"ape_rot_rmse_{label} = {res.rot_rmse!r}")
    else:
        lines.append("ground_truth = unavailable")
    (out / "ape.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


def cmd_evaluate(args) -> None:
    res = evaluate_poses(read_tum(args.estimate), read_tum(args.groundtruth), args.mode)
    text = (f"trans_rmse = {res.trans_rmse!r}\nrot_rmse = {res.rot_rmse!r}\n"
            f"pairs = {len(res.times)}\nalignment = {res.alignment}\n")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.txt").write_text(text)
        with open(out / "errors.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "trans_err", "rot_err"])
            for row in zip(res.times, res.trans_errors, res.rot_errors):
                w.writerow([repr(float(x)) for x in row])
    print(text, end="")


def plot_series(traj: Trajectory, imu: ImuData, bias_times, biases, gravity=GRAVITY):
    """Model-predicted vs measured IMU samples inside the trajectory span."""
    lo, hi = traj.interval
    m = (imu.t >= lo) & (imu.t <= hi)
    t = imu.t[m]
    s = traj.evaluate(t, derivatives=True)
    ba, bw = _bias_at(bias_times, biases, t)
    accel = predicted_accel(s.R, s.a, gravity) + ba
    gyro = s.omega + bw
    return t, {"accel": (accel, imu.accel[m]), "gyro": (gyro, imu.gyro[m])}


def cmd_plot_data(args) -> None:
    run_dir = Path(args.run)
    info = read_run_info(run_dir)
    imu = ImuData.read_csv(dataset_dir(run_dir, info) / "imu.csv")
    traj = Trajectory.load(run_dir / "trajectory.txt")
    bt, biases = read_bias(run_dir / "bias.csv")
    t, series = plot_series(traj, imu, bt, biases)
    out = Path(args.out) if args.out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    for name, (model, meas) in series.items():
        with open(out / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "deriv_x", "deriv_y", "deriv_z", "imu_x", "imu_y", "imu_z"])
            for row in np.column_stack([t, model, meas]):
                w.writerow([repr(float(x)) for x in row])
        print(f"{name}: {len(t)} rows, max |deriv - imu| = {np.abs(model - meas).max():.3g}")


# --- entry point -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="random seed (overrides the config file)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ctlio", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="synthesize a dataset")
    s.set_defaults(func=cmd_simulate, need_out=True)

    s = sub.add_parser("odometry", parents=[common], help="run the estimator on a dataset")
    s.add_argument("dataset")
    s.add_argument("--no-timing", action="store_true",
                   help="write 0 in the ms column so reports are reproducible")
    s.set_defaults(func=cmd_odometry, need_out=True)

    s = sub.add_parser("loop-correct", parents=[common], help="two-stage loop correction")
    s.add_argument("run", help="odometry output directory")
    s.add_argument("constraints", help="loop constraint CSV")
    s.add_argument("--gt", help="ground-truth TUM file for the APE summary")
    s.set_defaults(func=cmd_loop_correct, need_out=True)

    s = sub.add_parser("evaluate", parents=[common], help="RMSE of a TUM estimate")
    s.add_argument("estimate")
    s.add_argument("groundtruth")
    s.add_argument("--mode", choices=["first-pose-align", "none"], default="first-pose-align")
    s.set_defaults(func=cmd_evaluate, need_out=False)

    s = sub.add_parser("plot-data", parents=[common], help="IMU fit series for plotting")
    s.add_argument("run", help="odometry output directory")
    s.set_defaults(func=cmd_plot_data, need_out=False)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.need_out and not args.out:
            raise CliError(f"{args.command}: --out is required")
        args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a one-line message
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"ctlio {args.command}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
