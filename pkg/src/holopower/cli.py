"""Command-line interface.

Settings resolve as built-in defaults < ``--config`` JSON file (flat dotted
keys) < ``HOLO_SEED`` environment variable < command-line flags. Every command
writes the fully resolved settings to ``run_config.json`` in its output
directory; passing that file back via ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_PARTIAL = 2
EXIT_USAGE = 64
EXIT_DATAERR = 65
EXIT_NOINPUT = 66
EXIT_IOERR = 74

log = logging.getLogger("holopower")

DEFAULTS = {
    "seed": 0,
    "jobs": 1,
    "optics.resolution": 128,
    "optics.wavelengths": [639e-9, 515e-9, 473e-9],
    "optics.anchor_wavelength": 515e-9,
    "optics.pitch": 8e-6,
    "optics.plane_distances": [-0.005, 0.0, 0.005],
    "opt.scale": 1.8,
    "opt.steps": 300,
    "opt.lr_start": 0.025,
    "opt.lr_end": 0.005,
    "opt.subframes": 3,
    "opt.beta1": 0.9,
    "opt.beta2": 0.999,
    "opt.eps": 1e-8,
    "dataset.count": 200,
    "train.epochs": 40,
    "train.lr_start": 0.002,
    "train.lr_end": 0.0005,
    "train.batch_size": 8,
    "train.val_fraction": 0.1,
    "eval.count": 20,
    "eval.base_seed": 100000,
    "eval.checkpoints": [70, 300],
}


class UsageError(Exception):
    pass


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"t": round(record.created, 3), "level": record.levelname,
                           "logger": record.name, "msg": record.getMessage()})


# -- config ------------------------------------------------------------------

def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise CliError(f"config file not found: {path}", EXIT_NOINPUT) from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}: invalid JSON ({exc})", EXIT_DATAERR) from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a JSON object of dotted keys")
    unknown = sorted(k for k in data if k not in DEFAULTS and not k.startswith("paths."))
    if unknown:
        raise UsageError(f"{path}: unknown config keys {unknown}")
    return data


def resolve_config(args, flag_map) -> dict:
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        cfg.update(load_config_file(args.config))
    if os.environ.get("HOLO_SEED"):
        try:
            cfg["seed"] = int(os.environ["HOLO_SEED"])
        except ValueError as exc:
            raise UsageError(f"HOLO_SEED must be an integer, got {os.environ['HOLO_SEED']!r}") from exc
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg[key] = value
    return cfg


def echo_config(cfg, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


def _opt_config(cfg, seed=None):
    from .holo_opt import OptimizationConfig

    return OptimizationConfig(
        steps=int(cfg["opt.steps"]), lr_start=float(cfg["opt.lr_start"]),
        lr_end=float(cfg["opt.lr_end"]), scale=float(cfg["opt.scale"]),
        beta1=float(cfg["opt.beta1"]), beta2=float(cfg["opt.beta2"]), eps=float(cfg["opt.eps"]),
        seed=int(cfg["seed"] if seed is None else seed), subframes=int(cfg["opt.subframes"]),
    )


def _checked(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _parse_list(text, cast=float):
    try:
        return [cast(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"invalid list {text!r}") from exc


# -- commands ----------------------------------------------------------------

def cmd_dataset_gen(args) -> int:
    from .dataset import build_dataset

    cfg = resolve_config(args, {
        "count": "dataset.count", "resolution": "optics.resolution", "steps": "opt.steps",
        "seed": "seed", "scale": "opt.scale", "jobs": "jobs",
        "lr_start": "opt.lr_start", "lr_end": "opt.lr_end",
    })
    cfg["paths.out"] = str(args.out)
    if int(cfg["dataset.count"]) < 1:
        raise UsageError("--count must be >= 1")
    if int(cfg["optics.resolution"]) < 32:
        raise UsageError("--resolution must be >= 32")
    opt = _checked(_opt_config, cfg)
    try:
        echo_config(cfg, args.out)
        summary = build_dataset(
            int(cfg["dataset.count"]), int(cfg["optics.resolution"]), opt, args.out,
            base_seed=int(cfg["seed"]), wavelengths=cfg["optics.wavelengths"],
            plane_distances=cfg["optics.plane_distances"], pitch=cfg["optics.pitch"],
            anchor_wavelength=cfg["optics.anchor_wavelength"], jobs=int(cfg["jobs"]),
        )
    except OSError as exc:
        raise CliError(f"I/O error: {exc}", EXIT_IOERR) from exc
    print((Path(args.out) / "manifest.json").read_text(), end="")
    print(json.dumps({k: summary[k] for k in ("count", "requested", "mean_final_loss",
                                              "wall_time_s", "failures")}, indent=2))
    return EXIT_PARTIAL if summary["failures"] else EXIT_OK


def _training_pairs(corpus):
    from .dataset import RecordError, load_corpus, load_manifest

    if not (Path(corpus) / "manifest.json").is_file():
        raise CliError(f"{corpus}: no manifest.json", EXIT_NOINPUT)
    try:
        if not load_manifest(corpus)["records"]:
            raise CliError(f"{corpus}: corpus is empty", EXIT_DATAERR)
        records = load_corpus(corpus)
    except RecordError as exc:
        raise CliError(str(exc), EXIT_DATAERR) from exc
    return records, [(r.target, r.powers) for r in records]


def cmd_train(args) -> int:
    from .estimator.model import load_checkpoint, save_checkpoint
    from .estimator.train import TrainingConfig, train
    from .plotting import plot_training

    cfg = resolve_config(args, {
        "epochs": "train.epochs", "lr_start": "train.lr_start", "lr_end": "train.lr_end",
        "batch_size": "train.batch_size", "seed": "seed", "val_fraction": "train.val_fraction",
    })
    cfg["paths.corpus"] = str(args.corpus)
    cfg["paths.out"] = str(args.out)
    if args.resume:
        cfg["paths.resume"] = str(args.resume)
    tcfg = _checked(TrainingConfig, epochs=int(cfg["train.epochs"]),
                    lr_start=float(cfg["train.lr_start"]), lr_end=float(cfg["train.lr_end"]),
                    batch_size=int(cfg["train.batch_size"]), seed=int(cfg["seed"]),
                    val_fraction=float(cfg["train.val_fraction"]))
    records, pairs = _training_pairs(args.corpus)
    model, adam, start, prior_log = None, None, 0, []
    if args.resume:
        if not (Path(args.resume) / "manifest.json").is_file():
            raise CliError(f"{args.resume}: checkpoint not found", EXIT_NOINPUT)
        model, manifest, adam = load_checkpoint(args.resume)
        start = int(manifest["epoch"])
        log_path = Path(args.resume) / "training_log.json"
        if log_path.is_file():
            prior_log = json.loads(log_path.read_text())
    result = train(pairs, tcfg, model=model, adam=adam, start_epoch=start)
    full_log = prior_log + result.log
    try:
        echo_config(cfg, args.out)
        save_checkpoint(result.model, args.out, epoch=result.epoch, seed=tcfg.seed,
                        hyperparameters=tcfg.to_dict(), adam=result.adam,
                        extra={"initial_val_loss": result.initial_val_loss,
                               "val_ids": [records[i].id for i in result.val_indices]})
        (Path(args.out) / "training_log.json").write_text(json.dumps(full_log, indent=2) + "\n")
        if full_log:
            plot_training(full_log, Path(args.out) / "training.png", result.initial_val_loss)
    except OSError as exc:
        raise CliError(f"I/O error: {exc}", EXIT_IOERR) from exc
    last = full_log[-1] if full_log else {"train_loss": None, "val_loss": None}
    print(json.dumps({"epochs": tcfg.epochs, "final_train_loss": last["train_loss"],
                      "final_val_loss": last["val_loss"],
                      "initial_val_loss": result.initial_val_loss}))
    return EXIT_OK


def _load_target(path, depth, cfg):
    from .dataset import import_rgbd, load_record, make_scene

    path = Path(path)
    try:
        if path.is_dir():
            rec = load_record(path)
            return rec.scene(cfg["optics.plane_distances"], cfg["optics.pitch"])
        rgb, dmap = import_rgbd(path, depth)
        return make_scene(rgb, dmap, cfg["optics.plane_distances"], cfg["optics.pitch"])
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read target {path}: {exc}", EXIT_NOINPUT) from exc


def _load_model(path):
    from .estimator.model import load_checkpoint

    if not (Path(path) / "manifest.json").is_file():
        raise CliError(f"{path}: checkpoint not found", EXIT_NOINPUT)
    try:
        return load_checkpoint(path)[0]
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"{path}: unreadable checkpoint ({exc})", EXIT_NOINPUT) from exc


def cmd_optimize(args) -> int:
    from .estimator.train import estimate_powers
    from .holo_opt import HologramProblem, optimize_multicolor, optimize_single_color, save_result
    from .optics import apply_linear_grating
    from .plotting import plot_loss_history, save_rgb
    from .rawio import save_blob

    cfg = resolve_config(args, {"steps": "opt.steps", "seed": "seed", "scale": "opt.scale",
                                "lr_start": "opt.lr_start", "lr_end": "opt.lr_end"})
    cfg["paths.target"] = str(args.target)
    cfg["paths.out"] = str(args.out)
    if args.warm_start:
        cfg["paths.warm_start"] = str(args.warm_start)
    opt = _checked(_opt_config, cfg)
    scene = _load_target(args.target, args.depth, cfg)
    wavelengths = cfg["optics.wavelengths"]
    anchor = cfg["optics.anchor_wavelength"]
    if args.single_color:
        if args.warm_start:
            raise UsageError("--single-color and --warm-start are mutually exclusive")
        result = optimize_single_color(scene, wavelengths, opt, anchor_wavelength=anchor)
    else:
        init = "uniform"
        if args.warm_start:
            init = estimate_powers(_load_model(args.warm_start), scene.intensity)
        result = optimize_multicolor(scene, wavelengths, opt, init, anchor_wavelength=anchor)
    out = Path(args.out)
    try:
        echo_config(cfg, out)
        save_result(result, opt, out, pitch=scene.pitch)
        (out / "init.json").write_text(json.dumps({
            "powers": result.initial_powers.values.tolist(),
            "phase_hash": result.initial_phase_hash,
        }, indent=2) + "\n")
        if args.export_grating:
            save_blob(out / "phases_grating", apply_linear_grating(result.holograms.phases),
                      kind="phase", pitch=scene.pitch,
                      extra={"transform": "odd rows + pi; display exp(-1j * phase)"})
        problem = HologramProblem(scene, wavelengths, opt.scale, anchor)
        phases, powers = result.holograms.phases, result.powers.values
        save_rgb(problem.composite(phases, powers) / opt.scale, out / "reconstruction.png")
        for k, plane in enumerate(problem.reconstruction(phases, powers)):
            save_rgb(plane / opt.scale, out / f"reconstruction_plane{k}.png")
        save_rgb(scene.intensity, out / "target.png")
        plot_loss_history(result.history, out / "history.png")
    except OSError as exc:
        raise CliError(f"I/O error: {exc}", EXIT_IOERR) from exc
    print(json.dumps({"final_loss": result.final_loss,
                      "powers": result.powers.values.tolist(),
                      "primary_sums": result.powers.primary_sums().tolist()}))
    return EXIT_OK


def cmd_estimate(args) -> int:
    from .estimator.train import estimate_powers

    cfg = resolve_config(args, {})
    model = _load_model(args.model)
    scene = _load_target(args.target, None, cfg)
    powers = estimate_powers(model, scene.intensity)
    text = powers.to_json()
    if args.out:
        try:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            Path(args.out).write_text(text)
        except OSError as exc:
            raise CliError(f"I/O error: {exc}", EXIT_IOERR) from exc
    print(text, end="")
    return EXIT_OK


def _eval_targets(args, cfg):
    from .dataset import generate_procedural_target, make_scene

    if args.targets:
        root = Path(args.targets)
        if not root.is_dir():
            raise CliError(f"{root}: target directory not found", EXIT_NOINPUT)
        manifest = root / "manifest.json"
        if manifest.is_file():
            dirs = [root / r["id"] for r in json.loads(manifest.read_text())["records"]]
        else:
            dirs = sorted(p for p in root.iterdir() if (p / "target.png").is_file())
        if not dirs:
            raise CliError(f"{root}: no target records", EXIT_DATAERR)
        scenes, ids = [], []
        for d in dirs:
            scenes.append(_load_target(d, None, cfg))
            ids.append(d.name)
        return scenes, ids
    res = int(cfg["optics.resolution"])
    base = int(cfg["eval.base_seed"])
    scenes, ids = [], []
    for i in range(int(cfg["eval.count"])):
        rgb, depth = generate_procedural_target(base + i, res, res)
        scenes.append(make_scene(rgb, depth, cfg["optics.plane_distances"], cfg["optics.pitch"]))
        ids.append(f"seed{base + i}")
    return scenes, ids


def cmd_eval(args) -> int:
    from .evaluate import run_convergence_experiment, save_report

    cfg = resolve_config(args, {
        "steps": "opt.steps", "seed": "seed", "scale": "opt.scale", "count": "eval.count",
        "base_seed": "eval.base_seed", "resolution": "optics.resolution",
        "checkpoints": "eval.checkpoints", "jobs": "jobs",
    })
    cfg["paths.model"] = str(args.model)
    cfg["paths.out"] = str(args.out)
    if args.targets:
        cfg["paths.targets"] = str(args.targets)
    checkpoints = [int(c) for c in cfg["eval.checkpoints"]]
    if not checkpoints or min(checkpoints) < 0 or max(checkpoints) > int(cfg["opt.steps"]):
        raise UsageError(f"checkpoints {checkpoints} must lie within [0, steps]")
    opt = _checked(_opt_config, cfg)
    model = _load_model(args.model)
    scenes, ids = _eval_targets(args, cfg)
    report = run_convergence_experiment(
        scenes, model, opt, ids=ids, checkpoints=checkpoints,
        wavelengths=cfg["optics.wavelengths"], anchor_wavelength=cfg["optics.anchor_wavelength"],
        jobs=int(cfg["jobs"]),
    )
    try:
        echo_config(cfg, args.out)
        save_report(report, args.out)
    except OSError as exc:
        raise CliError(f"I/O error: {exc}", EXIT_IOERR) from exc
    print(json.dumps(report.aggregates, indent=2))
    return EXIT_OK if len(report.completed) == len(report.targets) else EXIT_PARTIAL


def cmd_render(args) -> int:
    from .plotting import render_array
    from .rawio import BlobFormatError, load_blob

    try:
        array, meta = load_blob(args.input)
    except FileNotFoundError as exc:
        raise CliError(f"{args.input}: not found", EXIT_NOINPUT) from exc
    except BlobFormatError as exc:
        raise CliError(str(exc), EXIT_DATAERR) from exc
    try:
        render_array(array, meta["kind"], args.out, title=Path(args.input).stem)
    except OSError as exc:
        raise CliError(f"I/O error: {exc}", EXIT_IOERR) from exc
    print(args.out)
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="holopower", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="INFO")
    parser.add_argument("--log-format", choices=("text", "json"), default="text")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON file of dotted keys")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("dataset-gen", help="build the multi-color hologram corpus")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=_positive_int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--steps", type=_positive_int)
    p.add_argument("--scale", type=float)
    p.add_argument("--lr-start", type=float)
    p.add_argument("--lr-end", type=float)
    p.add_argument("--jobs", type=_positive_int)
    p.set_defaults(func=cmd_dataset_gen)

    p = sub.add_parser("train", help="train the power estimator on a corpus")
    common(p)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--lr-start", type=float)
    p.add_argument("--lr-end", type=float)
    p.add_argument("--val-fraction", type=float)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("optimize", help="optimize a multi-color hologram for one target")
    common(p)
    p.add_argument("--target", required=True, help="RGB image or record directory")
    p.add_argument("--depth", help="depth image (default: single plane)")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=_positive_int)
    p.add_argument("--scale", type=float)
    p.add_argument("--lr-start", type=float)
    p.add_argument("--lr-end", type=float)
    p.add_argument("--warm-start", help="estimator checkpoint for initial powers")
    p.add_argument("--single-color", action="store_true", help="identity-power baseline")
    p.add_argument("--export-grating", action="store_true")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("estimate", help="predict a power matrix for one target")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("eval", help="cold vs warm-start convergence experiment")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--targets", help="directory of held-out records")
    p.add_argument("--count", type=_positive_int)
    p.add_argument("--base-seed", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--steps", type=_positive_int)
    p.add_argument("--scale", type=float)
    p.add_argument("--checkpoints", type=lambda s: _parse_list(s, int))
    p.add_argument("--jobs", type=_positive_int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render a stored field or phase blob to PNG")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    if args.log_format == "json":
        handler.setFormatter(_JsonFormatter())
    else:
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(args.log_level.upper())
    np.seterr(over="raise", invalid="ignore")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"holopower: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CliError as exc:
        print(f"holopower: error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
