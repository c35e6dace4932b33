"""Command line: simulate | reduce | gt | train | eval | viz | ablate.

Exit codes: 0 success, 2 validation error, 3 numeric failure (non-finite loss).
``ROCC_SEED`` overrides the seed of any command.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .geometry import GridSpec, hfov_mask
from .metrics import DEFAULT_RANGES, MetricAccumulator, METRICS
from .network import ModelConfig, RadarOcc
from .occupancy import BACKGROUND, FOREGROUND, OccupancyGrid, build_gt, load_grid, save_grid
from .radar_signal import RadarConfig, load_4drt, save_4drt, simulate_frame
from .scenes import LabeledSweepSequence, Scenario
from .training import (NumericError, RunConfig, evaluate, load_dataset, load_model, save_dataset,
                       synthetic_dataset, train)
from .volume_reduction import MEAN, load_sparse_rt, reduce_tensor, save_sparse_rt

log = logging.getLogger("radarocc")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


def _seed(default: int) -> int:
    env = os.environ.get("ROCC_SEED")
    if env is None:
        return default
    try:
        return int(env)
    except ValueError:
        raise ValueError(f"ROCC_SEED must be an integer, got {env!r}") from None


def _radar_config(args) -> RadarConfig:
    cfg = RadarConfig.paper() if args.profile == "paper" else RadarConfig.desk()
    if args.radar_config:
        d = json.loads(Path(args.radar_config).read_text())
        unknown = set(d) - set(RadarConfig.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown radar config keys: {sorted(unknown)}")
        cfg = replace(cfg, **d)
    return cfg


def _grid(name: str) -> GridSpec:
    if name == "desk":
        return GridSpec.desk()
    if name == "default":
        return GridSpec()
    return GridSpec.from_array(json.loads(Path(name).read_text()))


def _write_log(out_dir: Path, name: str, payload: dict) -> None:
    """Echo the fully defaulted configuration; no timestamps so reruns stay byte-identical."""
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    log.info("%s config:\n%s", name, text)
    (out_dir / f"{name}.log").write_text(text)


# ---------------------------------------------------------------- simulate / reduce / gt

def cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = _seed(args.seed)
    radar = _radar_config(args)
    if args.random is not None:
        model = ModelConfig.desk(radar=radar, grid=_grid(args.grid))
        _write_log(out, "simulate", {"random": args.random, "seed": seed, "radar": radar.to_dict(),
                                     "grid": model.grid.as_array().tolist(), "frames_per_scene": args.frames})
        save_dataset(out, synthetic_dataset(model, args.random, seed, frames_per_scene=args.frames))
        return EXIT_OK
    if not args.scene:
        raise ValueError("simulate needs --scene or --random")
    scen = Scenario.load(args.scene)
    _write_log(out, "simulate", {"scene": scen.to_dict(), "seed": seed, "radar": radar.to_dict(),
                                 "frames": args.frames})
    for k in range(args.frames):
        rt = simulate_frame(scen.radar_scene(k, radar), radar, seed=int(np.random.default_rng([seed, k]).integers(2**31)))
        save_4drt(out / f"frame_{k:04d}.4drt", rt)
    scen.sequence(args.frames).save(out / "sweeps.seq")
    return EXIT_OK


def cmd_reduce(args) -> int:
    rt = load_4drt(args.input)
    keep = args.keep_fraction
    s = reduce_tensor(rt, mode=args.mode, n_r=args.nr, keep_fraction=keep, descriptor=not args.average_pool)
    save_sparse_rt(args.out, s)
    return EXIT_OK


def cmd_gt(args) -> int:
    seq = LabeledSweepSequence.load(args.sequence)
    save_grid(args.out, build_gt(seq, args.target, _grid(args.grid)))
    return EXIT_OK


# ---------------------------------------------------------------- train / eval / ablate

def _load_run(args) -> RunConfig:
    d = json.loads(Path(args.config).read_text()) if args.config else {}
    if getattr(args, "out", None):
        d["out_dir"] = args.out
    d["seed"] = _seed(d.get("seed", 0))
    return RunConfig.from_dict(d)


def _datasets(run: RunConfig):
    cfg = run.model_config()
    if run.train_dir:
        tr = load_dataset(run.train_dir)
        va = load_dataset(run.val_dir) if run.val_dir else []
    else:
        tr = synthetic_dataset(cfg, run.n_train, run.data_seed, frames_per_scene=run.frames_per_scene)
        va = synthetic_dataset(cfg, run.n_val, run.data_seed, offset=run.n_train,
                               frames_per_scene=run.frames_per_scene)
    return tr, va


def cmd_train(args) -> int:
    run = _load_run(args)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_log(out, "train", {"run": run.to_dict(), "model": run.model_config().to_dict()})
    tr, va = _datasets(run)
    train(run, tr, va, resume=args.resume, stop_at=args.stop_at)
    return EXIT_OK


def _table_csv(rows: list[tuple[str, dict]], ranges) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "rwa", "dbd", "sss", "sfe", *(f"{m}@{r:g}" for r in ranges for m in METRICS)])
    for label, rec in rows:
        t = rec["table"]
        vals = ["" if np.isnan(t.get(m, r)) else f"{t.get(m, r):.6f}" for r in ranges for m in METRICS]
        c = rec["cfg"]
        w.writerow([label, int(c.rwa), int(c.dbd), c.sss, c.sfe, *vals])
    return buf.getvalue()


def cmd_eval(args) -> int:
    ranges = tuple(float(r) for r in args.ranges.split(",")) if args.ranges else DEFAULT_RANGES
    if args.checkpoint:
        cfg = ModelConfig.load(args.model_config) if args.model_config else None
        model, _ = load_model(args.checkpoint, cfg)
    else:
        cfg = ModelConfig.load(args.model_config) if args.model_config else ModelConfig.desk()
        model = RadarOcc(cfg, seed=_seed(args.seed))
    samples = load_dataset(args.data)
    if args.oracle:
        # prediction replaced by ground truth: sanity check of the metric plumbing
        mask = hfov_mask(model.cfg.grid)
        acc = MetricAccumulator(ranges)
        for s in samples:
            acc.add(s.gt, s.gt, mask)
        table = acc.table()
    else:
        table = evaluate(model, samples, ranges)
    sys.stdout.write(table.to_text())
    if args.out:
        Path(args.out).write_text(table.to_csv())
    return EXIT_OK


ABLATIONS = {
    "RWA": ("w/o RWA", {"rwa": False}),
    "DBD": ("w/o DBD", {"dbd": False}),
    "SSS": ("w/o SSS", {"sss": "percentile"}),
    "SFE": ("w/o SFE", {"sfe": "cartesian"}),
}


def ablation_runs(base: RunConfig, toggles) -> list[tuple[str, RunConfig]]:
    runs = [("Ours", base)]
    for key in ("DBD", "SSS", "SFE", "RWA"):
        if key in toggles:
            label, change = ABLATIONS[key]
            runs.append((label, replace(base, out_dir=str(Path(base.out_dir).parent / key.lower()), **change)))
    return runs


def cmd_ablate(args) -> int:
    base = _load_run(args)
    toggles = [t.strip().upper() for t in args.toggles.split(",") if t.strip()]
    bad = set(toggles) - set(ABLATIONS)
    if bad:
        raise ValueError(f"unknown toggles {sorted(bad)}; choose from {sorted(ABLATIONS)}")
    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = replace(base, out_dir=str(out / "ours"))
    _write_log(out, "ablate", {"run": base.to_dict(), "toggles": toggles})
    tr, va = _datasets(base)
    if not va:
        raise ValueError("ablation needs validation data")
    rows = []
    for label, run in ablation_runs(base, toggles):
        res = train(run, tr, va)
        rows.append((label, {"cfg": run.model_config(), "table": evaluate(res["model"], va, run.ranges)}))
    text = _table_csv(rows, base.ranges)
    (out / "ablation.csv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- viz

PALETTE = {0: (0, 0, 0), BACKGROUND: (128, 128, 128), FOREGROUND: (255, 140, 0)}
_RAMP = np.array([[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]], dtype=np.float64)


def ramp(v: np.ndarray) -> np.ndarray:
    """Viridis-like colour ramp for values in [0, 1]."""
    x = np.clip(v, 0, 1) * (len(_RAMP) - 1)
    i = np.minimum(x.astype(int), len(_RAMP) - 2)
    f = (x - i)[..., None]
    return np.round(_RAMP[i] * (1 - f) + _RAMP[i + 1] * f).astype(np.uint8)


def bev_grid(g: OccupancyGrid) -> np.ndarray:
    """(rows, cols, 3) image: rows run from far to near x, columns from left (+y) to right."""
    top = g.labels.max(axis=0)                      # (W, L): foreground wins over background
    img = np.zeros((*top.shape, 3), dtype=np.uint8)
    for label, color in PALETTE.items():
        img[top == label] = color
    return img[::-1, ::-1].transpose(1, 0, 2)


def bev_power(power_ra: np.ndarray) -> np.ndarray:
    """Range (rows, far at top) x azimuth image of log power."""
    v = np.log10(np.maximum(power_ra, 1e-12))
    lo, hi = v.min(), v.max()
    norm = (v - lo) / (hi - lo) if hi > lo else np.zeros_like(v)
    return ramp(norm[::-1])


def write_ppm(path, img: np.ndarray) -> None:
    h, w, _ = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def cmd_viz(args) -> int:
    path = Path(args.input)
    if path.suffix == ".grid":
        img = bev_grid(load_grid(path))
    elif path.suffix == ".sprt":
        s = load_sparse_rt(path)
        R, A, E = s.shape
        pw = np.zeros((R, A))
        if len(s):
            np.maximum.at(pw, (s.coords[:, 0], s.coords[:, 1]), s.features[:, MEAN])
        img = bev_power(pw)
    elif path.suffix == ".4drt":
        img = bev_power(load_4drt(path).power.max(axis=(2, 3)))
    else:
        raise ValueError(f"cannot visualise {path.suffix!r} files (expected .grid, .sprt or .4drt)")
    write_ppm(args.out, img)
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="radarocc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="synthesize radar tensors and LiDAR sweeps")
    s.add_argument("--scene", help="scene JSON file")
    s.add_argument("--random", type=int, help="write N random desk scenes as a (4drt, grid) dataset")
    s.add_argument("--frames", type=int, default=3, help="frames per scene")
    s.add_argument("--profile", choices=("desk", "paper"), default="desk")
    s.add_argument("--radar-config", help="JSON overrides of radar parameters")
    s.add_argument("--grid", default="desk", help="desk | default | JSON file with 7 grid values")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_simulate)

    s = sub.add_parser("reduce", help="4DRT -> SparseRT")
    s.add_argument("input")
    s.add_argument("--nr", type=int, default=32)
    s.add_argument("--mode", choices=("sidelobe", "percentile"), default="sidelobe")
    s.add_argument("--keep-fraction", type=float)
    s.add_argument("--average-pool", action="store_true", help="mean-only descriptor (w/o DBD)")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_reduce)

    s = sub.add_parser("gt", help="occupancy ground truth from a sweep sequence")
    s.add_argument("--sequence", required=True)
    s.add_argument("--target", type=int, default=0)
    s.add_argument("--grid", default="desk")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gt)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", help="run config JSON")
    s.add_argument("--out", help="override out_dir")
    s.add_argument("--resume", help="checkpoint with optimizer state")
    s.add_argument("--stop-at", type=int, help="stop after this many steps of the schedule")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="metric table on a dataset")
    s.add_argument("--checkpoint", help="omit to evaluate an untrained model")
    s.add_argument("--model-config", help="model config JSON (default: checkpoint sidecar)")
    s.add_argument("--data", required=True)
    s.add_argument("--ranges", default=",".join(f"{r:g}" for r in DEFAULT_RANGES))
    s.add_argument("--seed", type=int, default=0, help="init seed of an untrained model")
    s.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    s.add_argument("--out", help="CSV output")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("viz", help="bird's-eye-view image (.ppm)")
    s.add_argument("input")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_viz)

    s = sub.add_parser("ablate", help="train + eval with components switched off")
    s.add_argument("--config", help="run config JSON")
    s.add_argument("--out", help="override out_dir")
    s.add_argument("--toggles", default="DBD,SSS,SFE,RWA")
    s.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except NumericError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
