"""Command-line entry point: ``mv3d {gen-data,train,eval,sweep,plot}``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import ConfigError, RunConfig, preset_text
from .evaluate import evaluate_model
from .metrics import EvalResult
from .model import ModelConfigError, PerceptionModel
from .pgm import write_pgm
from .robustness import (NoiseSpecError, OracleDetector, camera_miss_grid, delay_grid, extrinsics_grid, plot_rows,
                         read_csv_rows, robustness_sweep, rows_to_csv, write_sweep)
from .scene import BEV_CLASSES, CLASS_NAMES, SceneConfigError, dataset_hash, load_dataset, write_dataset
from .train import NumericError, TrainConfigError, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

CONFIG_ERRORS = (ConfigError, SceneConfigError, ModelConfigError, TrainConfigError, NoiseSpecError,
                 FileNotFoundError, checkpoint.CheckpointError)


def _paths(cfg: RunConfig) -> dict:
    root = Path(cfg.data.root)
    out = Path(cfg.out_dir)
    return {"train": root / "train", "eval": root / "eval", "scenes_csv": root / "scenes.csv", "out": out,
            "ckpt": out / "checkpoint.bin", "log": out / "train_log.csv", "metrics": out / "metrics.csv"}


def _load_scenes(path: Path):
    if not (path / "index.json").exists():
        raise FileNotFoundError(f"no dataset at {path}; run gen-data first")
    return load_dataset(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def scene_summary_csv(scenes, split: str) -> list[list]:
    rows = []
    for i, seq in enumerate(scenes):
        o = seq.objects
        speed = np.linalg.norm(o.velocity, axis=1) if len(o) else np.zeros(0)
        path = np.linalg.norm(seq.ego_to_global[-1].translation[:2] - seq.ego_to_global[0].translation[:2])
        rows.append([split, i, seq.seed, len(o)] + [int(np.sum(o.cls == c)) for c in range(len(CLASS_NAMES))]
                    + [int(np.sum(speed == 0)), repr(float(path))])
    return rows


def cmd_gen_data(cfg: RunConfig) -> dict:
    """Write the train and eval splits plus a per-scene summary CSV."""
    p = _paths(cfg)
    write_dataset(p["train"], cfg.scene, cfg.data.n_train, cfg.data.seed, cfg.data.images, cfg.model.map_size)
    write_dataset(p["eval"], cfg.scene, cfg.data.n_eval, cfg.data.eval_seed, cfg.data.images, cfg.model.map_size)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "scene", "seed", "n_objects"] + [f"n_{c}" for c in CLASS_NAMES] + ["n_static", "ego_path_m"])
    for split in ("train", "eval"):
        w.writerows(scene_summary_csv(load_dataset(p[split]), split))
    p["scenes_csv"].write_text(buf.getvalue())
    return {"train": dataset_hash(p["train"]), "eval": dataset_hash(p["eval"])}


def build_model(cfg: RunConfig) -> PerceptionModel:
    return PerceptionModel.create(cfg.model)


def load_model(cfg: RunConfig, ckpt_path=None) -> PerceptionModel:
    model = build_model(cfg)
    path = Path(ckpt_path) if ckpt_path else _paths(cfg)["ckpt"]
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}; run train first")
    checkpoint.load_into(model.params, checkpoint.load(path))
    return model


def cmd_train(cfg: RunConfig, progress=None) -> PerceptionModel:
    p = _paths(cfg)
    scenes = _load_scenes(p["train"])
    p["out"].mkdir(parents=True, exist_ok=True)
    cfg.save(p["out"] / "config.json")
    model = build_model(cfg)
    train(model, scenes, cfg.train, log_path=p["log"], dump_dir=p["out"], callback=progress)
    checkpoint.save(p["ckpt"], model.params)
    return model


def _predictions_jsonl(frames, preds) -> str:
    lines = []
    for (s, k), pr in zip(frames, preds):
        order = np.argsort(-pr.score, kind="stable")
        recs = [{"class": CLASS_NAMES[int(pr.cls[i])], "score": float(pr.score[i]),
                 "center_m": [float(x) for x in pr.center[i]], "yaw_rad": float(pr.yaw[i]),
                 "velocity_mps": [float(x) for x in pr.velocity[i]]} for i in order]
        lines.append(json.dumps({"scene": s, "sweep": k, "detections": recs}, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def cmd_eval(cfg: RunConfig, ckpt_path=None) -> EvalResult:
    from .data import eval_frames

    p = _paths(cfg)
    scenes = _load_scenes(p["eval"])
    model = load_model(cfg, ckpt_path)
    frames = eval_frames(scenes)
    keep = cfg.eval.dump_bev
    out = evaluate_model(model, scenes, frames, batch_size=cfg.eval.batch_size, keep_outputs=keep)
    result, preds = out[0], out[1]
    p["out"].mkdir(parents=True, exist_ok=True)
    p["metrics"].write_text(rows_to_csv([result.row()]))
    (p["out"] / "metrics.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    if cfg.eval.dump_predictions:
        (p["out"] / "predictions.jsonl").write_text(_predictions_jsonl(frames, preds))
    if keep and len(out) > 3:
        bev_dir = p["out"] / "bev"
        bev_dir.mkdir(exist_ok=True)
        for (s, k), bev in zip(frames, out[3]):
            for name, ch in zip(BEV_CLASSES, bev):
                write_pgm(bev_dir / f"scene{s:04d}_s{k:02d}_{name}.pgm", ch)
    return result


def sweep_grid(cfg: RunConfig, kinds=None) -> list:
    sc = cfg.sweep
    grid = []
    for kind in kinds or sc.kinds:
        if kind == "extrinsics_rotation":
            grid += extrinsics_grid(sc.r_max, sc.seeds)
        elif kind == "time_delay":
            grid += delay_grid(sc.delays, sc.seeds)
        elif kind == "camera_miss":
            grid += camera_miss_grid(cfg.scene.n_cams, sc.seeds, sc.miss_mode)
        elif kind == "clean":
            from .robustness import NoiseSpec

            grid += [NoiseSpec("clean", seed=s) for s in sc.seeds]
        else:
            raise ConfigError(f"unknown sweep kind {kind!r}")
    return grid


def cmd_sweep(cfg: RunConfig, ckpt_path=None, kinds=None, oracle: bool = False, name: str = "sweep") -> list[dict]:
    p = _paths(cfg)
    scenes = _load_scenes(p["eval"])
    model = OracleDetector(scenes) if oracle else load_model(cfg, ckpt_path)
    rows = robustness_sweep(model, scenes, sweep_grid(cfg, kinds), batch_size=cfg.eval.batch_size)
    p["out"].mkdir(parents=True, exist_ok=True)
    write_sweep(rows, p["out"] / f"{name}.csv", p["out"] / f"{name}.svg")
    return rows


def plot_training_log(csv_path, svg_path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "mv3d"
    rows = read_csv_rows(csv_path)
    steps = [int(r["step"]) for r in rows]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("total", "focal", "l1", "seg_ce"):
        vals = [float(r[key]) for r in rows]
        if not all(np.isnan(vals)):
            ax.plot(steps, vals, label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(svg_path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_plot(csv_path, svg_path) -> None:
    """Plot a sweep CSV (one panel per noise kind) or a training log (loss curves)."""
    with open(csv_path, newline="") as fh:
        header = next(csv.reader(fh), [])
    if "kind" in header:
        plot_rows(read_csv_rows(csv_path), svg_path)
    elif "step" in header:
        plot_training_log(csv_path, svg_path)
    else:
        raise ConfigError(f"{csv_path} is neither a sweep table nor a training log")


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mv3d", description="Multi-view 3D detection and BEV segmentation toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", "-c", help="run configuration: a JSON file or a packaged preset name such as "
                       "'benchmark'; defaults are used when omitted")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=JSON",
                       help="override one config value, e.g. train.steps=50")
        return p

    with_config(sub.add_parser("gen-data", help="generate the synthetic dataset"))
    t = with_config(sub.add_parser("train", help="train a model"))
    t.add_argument("--quiet", action="store_true")
    e = with_config(sub.add_parser("eval", help="evaluate a checkpoint"))
    e.add_argument("--checkpoint")
    s = with_config(sub.add_parser("sweep", help="robustness sweep"))
    s.add_argument("--checkpoint")
    s.add_argument("--kind", action="append", help="restrict to these noise kinds")
    s.add_argument("--oracle", action="store_true", help="use the geometry-oracle detector instead of a model")
    s.add_argument("--name", default="sweep", help="output file stem")
    pl = sub.add_parser("plot", help="render a sweep or training-log CSV as SVG")
    pl.add_argument("csv")
    pl.add_argument("--out", help="SVG path (default: next to the CSV)")
    return ap


def apply_overrides(d: dict, overrides: list[str]) -> dict:
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or "." not in key and key != "out_dir":
            raise ConfigError(f"override {item!r} must look like section.key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if key == "out_dir":
            d["out_dir"] = value
            continue
        section, name = key.split(".", 1)
        d.setdefault(section, {})[name] = value
    return d


def load_config(args) -> RunConfig:
    d = {}
    if args.config:
        path = Path(args.config)
        # a bare name that is not a file refers to a packaged preset
        text = path.read_text() if path.exists() or path.suffix else preset_text(args.config)
        d = json.loads(text)
    if args.config and not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(apply_overrides(d, args.set))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "plot":
            out = args.out or str(Path(args.csv).with_suffix(".svg"))
            cmd_plot(args.csv, out)
            print(out)
            return EXIT_OK
        try:
            cfg = load_config(args)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        if args.command == "gen-data":
            hashes = cmd_gen_data(cfg)
            print(json.dumps({"root": cfg.data.root, **hashes}, sort_keys=True))
        elif args.command == "train":
            def progress(row):
                if not args.quiet and (row["step"] % 50 == 0 or row["step"] == cfg.train.steps - 1):
                    print(f"step {row['step']:5d}  loss {row['total']:.4f}  focal {row['focal']:.4f}  "
                          f"l1 {row['l1']:.4f}  seg {row['seg_ce']:.4f}", flush=True)
            cmd_train(cfg, progress)
            print(_paths(cfg)["ckpt"])
        elif args.command == "eval":
            res = cmd_eval(cfg, args.checkpoint)
            print(json.dumps(res.to_dict(), sort_keys=True))
        elif args.command == "sweep":
            rows = cmd_sweep(cfg, args.checkpoint, args.kind, args.oracle, args.name)
            sys.stdout.write(rows_to_csv(rows))
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except CONFIG_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
