"""``hbev`` command line: dataset generation, hindsight labels, lifting, evaluation, plots.

Every command writes its outputs atomically and is byte-for-byte reproducible for
a given config and inputs (SVG plots aside). On failure the exit code is non-zero
and a JSON error object is printed to stderr.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import io as hio
from .bevlift import camera_rig, generate_frustum, lift, splat, synthetic_logits, FrustumPointSet
from .config import RunConfig, load_config
from .gridmap import GridMap
from .hindsight import HindsightAccumulator, select_reference_samples
from .metrics import Evaluator
from .synthworld import make_world, simulate_step, step_times

log = logging.getLogger("hbev")

DATASET_FORMAT = "hbev-dataset"
HINDSIGHT_FORMAT = "hbev-hindsight"


class CliError(Exception):
    def __init__(self, message: str, path=None):
        super().__init__(message)
        self.path = None if path is None else str(path)


class _Context:
    def __init__(self, config: RunConfig, jobs: int):
        self.config = config
        self.jobs = jobs


def _step_name(index: int) -> str:
    return f"step_{index:05d}"


def _map_jobs(jobs: int, fn, items: list) -> list:
    """``[fn(x) for x in items]``, spread over up to ``jobs`` threads, results in input order."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _chunks(items: list, n: int) -> list[list]:
    n = max(1, min(n, len(items)))
    size = math.ceil(len(items) / n) if items else 0
    return [items[i:i + size] for i in range(0, len(items), size)] if items else []


def _setup_logging(verbose: int) -> None:
    level = os.environ.get("HBEV_LOG", "").upper() or "WARNING"
    if verbose:
        level = "DEBUG" if verbose > 1 else "INFO"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="TOML or JSON run configuration.")
@click.option("--jobs", "-j", type=click.IntRange(min=1), default=1, show_default=True,
              help="Worker threads for per-sample work.")
@click.option("--verbose", "-v", count=True, help="More logging (-v info, -vv debug).")
@click.pass_context
def cli(ctx, config_path, jobs, verbose):
    """Hindsight BEV traversability toolkit."""
    _setup_logging(verbose)
    try:
        config = load_config(config_path)
    except OSError as exc:
        raise CliError(f"cannot read config: {exc.strerror}", config_path) from None
    ctx.obj = _Context(config, jobs)


# --------------------------------------------------------------------------- #
# gen-world


@cli.command("gen-world")
@click.option("--seed", type=int, default=None)
@click.option("--extent", type=float, default=None, help="World side length [m].")
@click.option("--obstacles", "n_obstacles", type=click.IntRange(min=0), default=None)
@click.option("--traj", "trajectory", type=click.Choice(["loop", "line", "figure8"]), default=None)
@click.option("--rate", type=float, default=None, help="Dataset steps per second.")
@click.option("--duration", type=float, default=None, help="Trajectory duration [s].")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.pass_obj
def gen_world(obj: _Context, seed, extent, n_obstacles, trajectory, rate, duration, out_dir):
    """Generate a synthetic dataset: trajectory, scans, per-step estimates and oracle maps."""
    config = obj.config.updated(
        "world", seed=seed, extent=extent, n_obstacles=n_obstacles, trajectory=trajectory,
        rate=rate, duration=duration,
    )
    wc = config.world
    out = Path(out_dir)
    world = make_world(wc.seed, wc.extent, wc.n_obstacles, wc.n_bumps, wc.trajectory, wc.duration, wc.path_radius)
    sensor = config.sensor.sensor()
    spec = config.grid.spec()
    times = step_times(world, wc.rate)
    log.info("generating %d steps into %s", len(times), out)
    hio.write_trajectory(out / "trajectory.csv", world.trajectory)

    def one(index: int) -> dict:
        step = simulate_step(world, sensor, spec, index, float(times[index]))
        name = _step_name(index)
        files = {
            "cloud": f"clouds/{name}.hbpc",
            "estimate": f"estimates/{name}.hbgm",
            "oracle": f"oracle/{name}.hbgm",
        }
        hio.write_cloud(out / files["cloud"], step.cloud)
        hio.write_gridmap(out / files["estimate"], step.estimate)
        hio.write_gridmap(out / files["oracle"], step.oracle)
        p2 = step.pose2
        log.debug("step %d: %d points", index, len(step.cloud))
        return {"index": index, "name": name, "time": step.time, "pose": [p2.x, p2.y, p2.yaw], **files}

    steps = _map_jobs(obj.jobs, one, list(range(len(times))))
    manifest = {
        "format": DATASET_FORMAT,
        "version": hio.FORMAT_VERSION,
        "config_hash": config.config_hash(),
        "config": config.model_dump(mode="json"),
        "world": world.to_dict(),
        "trajectory": "trajectory.csv",
        "steps": steps,
    }
    hio.write_json(out / "manifest.json", manifest)
    click.echo(f"wrote {len(steps)} steps to {out}")


# --------------------------------------------------------------------------- #
# hindsight


def _load_map_index(maps_dir: Path) -> list[dict]:
    """(name, time, pose, path) of every per-step map, from a dataset manifest or a plain directory."""
    manifest = maps_dir / "manifest.json"
    if manifest.exists():
        doc = json.loads(manifest.read_text())
        return [
            {"name": s["name"], "time": float(s["time"]), "pose": s["pose"], "path": maps_dir / s["estimate"]}
            for s in doc.get("steps", [])
        ]
    if not maps_dir.is_dir():
        raise CliError("maps directory does not exist", maps_dir)
    entries = []
    for path in sorted(maps_dir.glob("*.hbgm")):
        spec, stamp = hio.read_gridmap_header(path)
        pose = spec.center_pose
        entries.append({"name": path.stem, "time": stamp, "pose": [pose.x, pose.y, pose.yaw], "path": path})
    return entries


class _WindowCache:
    """Maps currently inside the sliding time window; entries are loaded once and evicted in time order."""

    def __init__(self, entries: list[dict]):
        self.entries = entries  # sorted by time
        self.loaded: dict[int, GridMap] = {}

    def window(self, lo: float, hi: float) -> list[GridMap]:
        for i in [i for i in self.loaded if not lo <= self.entries[i]["time"] <= hi]:
            del self.loaded[i]
        out = []
        for i, e in enumerate(self.entries):
            if lo <= e["time"] <= hi:
                if i not in self.loaded:
                    self.loaded[i] = hio.read_gridmap(e["path"])
                out.append(self.loaded[i])
        return out


@cli.command("hindsight")
@click.option("--maps", "maps_dir", type=click.Path(), required=True,
              help="Dataset directory (with manifest.json) or a directory of per-step .hbgm maps.")
@click.option("--ref-time", type=float, default=None, help="Only the sample closest to this time.")
@click.option("--window", type=float, default=None, help="Fusion window [s], centered on each sample.")
@click.option("--confidence", type=float, default=None, help="Reliability threshold for traversability.")
@click.option("--min-distance", type=float, default=None, help="Minimum travel between samples [m].")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.pass_obj
def hindsight_cmd(obj: _Context, maps_dir, ref_time, window, confidence, min_distance, out_dir):
    """Fuse per-step maps into hindsight ground truth at selected reference samples."""
    config = obj.config.updated(
        "fusion", window=window, confidence_threshold=confidence, min_travel_distance=min_distance
    )
    policy = config.fusion.policy()
    out = Path(out_dir)
    entries = sorted(_load_map_index(Path(maps_dir)), key=lambda e: e["time"])
    if entries:
        picked = select_reference_samples([e["pose"][:2] for e in entries], config.fusion.min_travel_distance)
    else:
        picked = []
    if ref_time is not None and picked:
        picked = [min(picked, key=lambda i: (abs(entries[i]["time"] - ref_time), i))]
    log.info("%d maps, %d reference samples", len(entries), len(picked))
    half = policy.window / 2.0

    def run(chunk: list[int]) -> list[dict]:
        cache = _WindowCache(entries)
        done = []
        for i in chunk:
            ref = entries[i]
            maps = cache.window(ref["time"] - half, ref["time"] + half)
            spec, _ = hio.read_gridmap_header(ref["path"])
            acc = HindsightAccumulator(spec, policy)
            for m in maps:
                acc.add(m)
            rel = f"gt/{ref['name']}.hbgm"
            hio.write_gridmap(out / rel, acc.result(ref["time"]))
            done.append({"name": ref["name"], "time": ref["time"], "pose": ref["pose"],
                         "n_maps": len(maps), "gt": rel})
        return done

    samples = [s for part in _map_jobs(obj.jobs, run, _chunks(picked, obj.jobs)) for s in part]
    hio.write_json(out / "manifest.json", {
        "format": HINDSIGHT_FORMAT,
        "version": hio.FORMAT_VERSION,
        "config_hash": config.config_hash(),
        "fusion": config.fusion.model_dump(mode="json"),
        "samples": samples,
    })
    click.echo(f"wrote {len(samples)} hindsight maps to {out}")


# --------------------------------------------------------------------------- #
# lift


@cli.command("lift")
@click.option("--calib", type=click.Path(dir_okay=False), default=None,
              help="Camera calibration JSON (default: synthetic 4-camera rig).")
@click.option("--logits", type=click.Path(dir_okay=False), default=None,
              help="Depth logits tensor (cameras, Fh, Fw, N_D) (default: seeded random).")
@click.option("--features", type=click.Path(dir_okay=False), default=None,
              help="Feature tensor (cameras, Fh, Fw, K) (default: ones, K = 1).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False), default=None)
@click.option("--bench", is_flag=True, help="Time the splat and print points per second.")
@click.option("--repeats", type=click.IntRange(min=1), default=5, show_default=True)
@click.pass_obj
def lift_cmd(obj: _Context, calib, logits, features, seed, out_path, bench, repeats):
    """Lift camera depth distributions into a BEV feature map."""
    fc = obj.config.frustum.frustum()
    rig = hio.read_cameras(calib) if calib else camera_rig(4, fc)
    lg = hio.read_tensor(logits) if logits else synthetic_logits(len(rig), fc, seed)
    if lg.ndim == 3:
        lg = lg[None]
    expected = (len(rig), fc.feature_height, fc.feature_width, fc.n_depth)
    if lg.shape != expected:
        raise CliError(f"logits have shape {lg.shape}, expected {expected}", logits)
    if features:
        ft = hio.read_tensor(features)
        if ft.ndim == 3:
            ft = ft[None]
        if ft.shape[:3] != expected[:3]:
            raise CliError(f"features have shape {ft.shape}, expected {expected[:3]} + (K,)", features)
    else:
        ft = np.ones(expected[:3] + (1,), dtype=np.float32)
    spec = obj.config.grid.spec()
    points = FrustumPointSet.concatenate([
        lift(generate_frustum(intr, pose, fc, k), lg[k], ft[k]) for k, (intr, pose) in enumerate(rig)
    ])
    grid = splat(points, spec)
    if out_path:
        hio.write_gridmap(out_path, grid)
    if bench:
        best = math.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            splat(points, spec)
            best = min(best, time.perf_counter() - t0)
        click.echo(json.dumps({"points": len(points), "seconds": best, "points_per_second": len(points) / best}))
    elif not out_path:
        click.echo(f"lifted {len(points)} points into {spec.shape[0]}x{spec.shape[1]} cells")


# --------------------------------------------------------------------------- #
# evaluate


def _pair_files(gt_dir: Path, pred_dir: Path) -> list[tuple[Path, Path]]:
    gt_dir = gt_dir / "gt" if (gt_dir / "gt").is_dir() else gt_dir
    if not gt_dir.is_dir():
        raise CliError("ground-truth directory does not exist", gt_dir)
    if not pred_dir.is_dir():
        raise CliError("prediction directory does not exist", pred_dir)
    pairs = []
    for g in sorted(gt_dir.glob("*.hbgm")):
        p = pred_dir / g.name
        if not p.exists():
            raise CliError(f"no prediction for {g.name}", p)
        pairs.append((g, p))
    return pairs


@cli.command("evaluate")
@click.option("--gt", "gt_dir", type=click.Path(), required=True, help="Ground-truth maps directory.")
@click.option("--pred", "pred_dir", type=click.Path(), required=True, help="Prediction maps directory.")
@click.option("--clouds", "cloud_dir", type=click.Path(), default=None,
              help="Point clouds (same stem, .hbpc) for the observed/unobserved split.")
@click.option("--out", "out_path", type=click.Path(dir_okay=False), required=True, help="Report JSON.")
@click.option("--csv", "csv_path", type=click.Path(dir_okay=False), default=None, help="Per-distance-bin CSV.")
@click.pass_obj
def evaluate_cmd(obj: _Context, gt_dir, pred_dir, cloud_dir, out_path, csv_path):
    """Score predictions against ground truth; files are paired by name."""
    mc = obj.config.metrics
    pairs = _pair_files(Path(gt_dir), Path(pred_dir))

    def run(chunk):
        ev = Evaluator(mc.fatal_threshold, mc.bin_width)
        for g, p in chunk:
            cloud = None
            if cloud_dir is not None:
                cpath = Path(cloud_dir) / f"{g.stem}.hbpc"
                if not cpath.exists():
                    raise CliError(f"no point cloud for {g.name}", cpath)
                cloud = hio.read_cloud(cpath)
            ev.add(hio.read_gridmap(g), hio.read_gridmap(p), cloud)
        return ev

    parts = _map_jobs(obj.jobs, run, _chunks(pairs, obj.jobs))
    ev = Evaluator(mc.fatal_threshold, mc.bin_width)
    for part in parts:
        ev = ev.merge(part)
    report = ev.report()
    doc = report.to_dict()
    doc["config_hash"] = obj.config.config_hash()
    doc["pairs"] = [g.name for g, _ in pairs]
    hio.write_json(out_path, doc)
    if csv_path:
        hio.atomic_write(csv_path, report.bins_csv())
    click.echo(f"evaluated {len(pairs)} map pairs")


# --------------------------------------------------------------------------- #
# plot


def _read_bins_csv(path: Path) -> dict[str, np.ndarray]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise CliError("no rows in bins CSV", path)

    def col(name):
        return np.array([float(r[name]) if r[name] != "" else np.nan for r in rows])

    try:
        return {k: col(k) for k in ("range_min", "range_max", "precision", "recall", "f1", "mse", "elevation_mae")}
    except KeyError as exc:
        raise CliError(f"missing column {exc}", path) from None


@cli.command("plot")
@click.argument("csv_files", nargs=-1, required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
def plot_cmd(csv_files, out_dir):
    """Render distance curves (hazard P/R/F1, MSE, elevation MAE) from evaluation CSVs to SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "hbev"
    data = {Path(p).stem: _read_bins_csv(Path(p)) for p in csv_files}
    panels = [
        ("hazard", ("precision", "recall", "f1"), "score"),
        ("mse", ("mse",), "traversability MSE"),
        ("elevation_mae", ("elevation_mae",), "elevation MAE [m]"),
    ]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for fname, keys, ylabel in panels:
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, d in data.items():
            centers = 0.5 * (d["range_min"] + d["range_max"])
            for k in keys:
                ax.plot(centers, d[k], label=f"{label} {k}" if len(data) > 1 or len(keys) > 1 else label)
        ax.set_xlabel("distance from vehicle [m]")
        ax.set_ylabel(ylabel)
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize="small")
        fig.tight_layout()
        target = out / f"{fname}.svg"
        tmp = out / f".{fname}.svg.tmp"
        fig.savefig(tmp, format="svg", metadata={"Date": None})
        plt.close(fig)
        os.replace(tmp, target)
    click.echo(f"wrote {len(panels)} plots to {out}")


# --------------------------------------------------------------------------- #
# entry point


def _error_json(exc: BaseException, path=None) -> str:
    doc = {"error": type(exc).__name__, "message": str(exc)}
    path = path or getattr(exc, "path", None) or getattr(exc, "filename", None)
    if path is not None:
        doc["path"] = str(path)
    return json.dumps(doc, sort_keys=True)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="hbev", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo(_error_json(KeyboardInterrupt("aborted")), err=True)
        return 130
    except click.ClickException as exc:
        click.echo(_error_json(exc), err=True)
        return exc.exit_code or 2
    except OSError as exc:
        msg = OSError(exc.strerror or str(exc))
        click.echo(_error_json(msg, exc.filename), err=True)
        return 1
    except Exception as exc:  # every failure is reported as JSON
        log.debug("command failed", exc_info=True)
        click.echo(_error_json(exc), err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
