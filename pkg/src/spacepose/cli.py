"""Command-line entry point: ``spacepose <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric error (non-finite values, failed self-test).
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import (DataError, PoseDataset, SceneConfig, calibrate_k_object, generate_synthetic,
                   ingest_speed_format, load_image, load_manifest, resize_image, save_manifest,
                   split_manifest)
from .evaluation import format_ablation, format_report, metrics_from_arrays, render_overlay, write_report
from .geometry import CameraIntrinsics, GeometryError, PixelCoord
from .network import ModelConfig, PretrainedWeightsUnavailable, build_model, forward_pose
from .roi import BoundingBox
from .training import (TrainConfig, TrainingError, ablation_suite, model_from_checkpoint,
                       predict_dataset, train)

log = logging.getLogger("spacepose")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULT_CONFIG = {
    "model": ModelConfig().to_dict(),
    "train": TrainConfig().to_dict(),
    "scene": SceneConfig().to_dict(),
    "camera": {"fx": None, "fy": None, "cx": None, "cy": None, "width": None, "height": None},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# --------------------------------------------------------------------------- configuration


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are parsed as JSON when possible."""
    config = copy.deepcopy(config)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"override {item!r} is not of the form key=value")
        node, parts = config, key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise UsageError(f"unknown config key {key!r}")
            node = node[part]
        if parts[-1] not in node:
            raise UsageError(f"unknown config key {key!r}")
        node[parts[-1]] = _parse_value(value)
    return config


def load_config(path, overrides: list[str]) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            user = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {path}: {e}") from e
        for section, values in user.items():
            if section not in config or not isinstance(values, dict):
                raise UsageError(f"unknown config section {section!r}")
            unknown = set(values) - set(config[section])
            if unknown:
                raise UsageError(f"unknown keys in section {section!r}: {sorted(unknown)}")
            config[section].update(values)
    return apply_overrides(config, overrides)


def _model_config(config: dict) -> ModelConfig:
    return ModelConfig.from_dict(config["model"])


def _train_config(config: dict, seed: int) -> TrainConfig:
    return TrainConfig(**{**config["train"], "seed": seed})


def _scene_config(config: dict) -> SceneConfig:
    return SceneConfig(**config["scene"])


def _camera(config: dict) -> CameraIntrinsics:
    cam = config["camera"]
    missing = [k for k, v in cam.items() if v is None]
    if missing:
        raise UsageError(f"camera intrinsics required: set {', '.join('camera.' + k for k in missing)}")
    return CameraIntrinsics(**cam)


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} requires --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_json(data):
    print(json.dumps(data, indent=2, sort_keys=True))


# --------------------------------------------------------------------------- subcommands


def cmd_gen_data(args, config):
    manifest = generate_synthetic(args.n, _out_dir(args), _scene_config(config), args.seed)
    print(f"wrote {len(manifest)} images and manifest.jsonl to {args.out}")


def cmd_ingest(args, config):
    out = _out_dir(args)
    key_map = json.loads(args.key_map) if args.key_map else None
    manifest, rejected = ingest_speed_format(args.root, args.labels, args.quat_order, _camera(config), key_map)
    save_manifest(manifest, out / "manifest.jsonl")
    (out / "rejected.txt").write_text("".join(r + "\n" for r in rejected))
    print(f"ingested {len(manifest)} samples, rejected {len(rejected)}")


def cmd_split(args, config):
    out = _out_dir(args)
    train_m, val_m = split_manifest(load_manifest(args.manifest), args.n_train, args.n_val, args.seed)
    save_manifest(train_m, out / "train.jsonl")
    save_manifest(val_m, out / "val.jsonl")
    print(f"wrote {len(train_m)} train and {len(val_m)} val samples to {out}")


def cmd_calibrate_ko(args, config):
    result = calibrate_k_object(load_manifest(args.manifest), args.fill, seed=args.seed)
    if args.out:
        out = _out_dir(args)
        (out / "k_object.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    _print_json(result)


def _write_eval_outputs(report, out: Path, stem: str, style: str = "table2", labels=None):
    from .plotting import plot_error_histograms

    text, data = format_report(report, style, labels)
    (out / f"{stem}.txt").write_text(text)
    (out / f"{stem}_table.json").write_text(json.dumps(data, indent=2) + "\n")
    write_report(report, out / f"{stem}.json")
    plot_error_histograms(report, out / f"{stem}_errors.png")
    return text


def cmd_train(args, config):
    from .plotting import plot_training_curves

    out = _out_dir(args)
    mcfg, tcfg = _model_config(config), _train_config(config, args.seed)
    train_m, val_m = load_manifest(args.train), load_manifest(args.val)
    torch.manual_seed(args.seed)
    model = build_model(mcfg, args.seed)
    datasets = (PoseDataset(train_m, mcfg.input_size), PoseDataset(val_m, mcfg.input_size))
    best, history = train(model, train_m, val_m, tcfg, out, resume=args.resume, datasets=datasets)
    plot_training_curves(history, out / "training_curves.png")
    best_model, _ = model_from_checkpoint(best)
    with_rotation = tcfg.regime != "translation_only"
    t, q, _ = predict_dataset(best_model, datasets[1], with_rotation=with_rotation)
    report = metrics_from_arrays(t, datasets[1].t, q, datasets[1].q if with_rotation else None)
    style = "table2" if not with_rotation else "table5"
    print(_write_eval_outputs(report, out, "val_report", style), end="")
    print(f"best checkpoint: {best}")


def cmd_ablate(args, config):
    from .plotting import plot_ablation

    out = _out_dir(args)
    table = ablation_suite(_model_config(config), _train_config(config, args.seed),
                           load_manifest(args.train), load_manifest(args.val), out,
                           args.translation_epochs, args.pose_epochs, args.warm_start_hc)
    plot_ablation(table["rows"], out / "ablation.png")
    print(format_ablation(table["rows"]), end="")


def cmd_eval(args, config):
    model, _ = model_from_checkpoint(args.ckpt)
    manifest = load_manifest(args.manifest)
    ds = PoseDataset(manifest, model.cfg.input_size)
    t, q, _ = predict_dataset(model, ds)
    report = metrics_from_arrays(t, ds.t, q, ds.q)
    labels = {"init": args.init_label, "HC": model.cfg.hc_enabled, "CDA": args.cda_label}
    if args.out:
        text = _write_eval_outputs(report, _out_dir(args), "report", args.style, labels)
    else:
        text, _ = format_report(report, args.style, labels)
    print(text, end="")


def predict_image(model, image_path) -> dict:
    original = load_image(image_path)
    resized = resize_image(original, model.cfg.input_size)
    same = tuple(original.shape[-2:]) == tuple(model.cfg.input_size)
    with torch.no_grad():
        t, q, _, boxes = forward_pose(model, resized[None], None if same else original[None], mode="eval")
    u, v, side = boxes[0].tolist()
    return {"t": t[0].tolist(), "q": q[0].tolist(), "quat_order": "wxyz",
            "bbox": {"u": u, "v": v, "side": side}}


def cmd_predict(args, config):
    model, _ = model_from_checkpoint(args.ckpt)
    result = predict_image(model, args.image)
    if args.out:
        out = _out_dir(args)
        (out / "prediction.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    _print_json(result)


def cmd_overlay(args, config):
    model, _ = model_from_checkpoint(args.ckpt)
    result = predict_image(model, args.image)
    box = result["bbox"]
    out = _out_dir(args)
    path = out / (Path(args.image).stem + "_overlay.png")
    render_overlay(args.image, BoundingBox(PixelCoord(box["u"], box["v"]), box["side"]),
                   PixelCoord(box["u"], box["v"]), path)
    (out / (Path(args.image).stem + "_prediction.json")).write_text(json.dumps(result, indent=2) + "\n")
    print(path)


def cmd_selftest(args, config):
    from .checks import run_selftest

    results = run_selftest(args.seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if args.out:
        out = _out_dir(args)
        (out / "selftest.json").write_text(json.dumps(
            [{"name": r.name, "passed": r.passed, "detail": r.detail} for r in results], indent=2) + "\n")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file with model/train/scene/camera sections")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key config override, e.g. train.lr=1e-3 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="spacepose", description="Monocular spacecraft pose estimation pipeline.")
    parser.add_argument("--version", action="version", version=f"spacepose {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="render a synthetic labeled dataset")
    p.add_argument("--n", type=int, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("ingest", parents=[common], help="convert SPEED-style labels to a manifest")
    p.add_argument("--root", required=True, help="image directory")
    p.add_argument("--labels", required=True, help="JSON label file")
    p.add_argument("--quat-order", required=True, choices=["wxyz", "xyzw"])
    p.add_argument("--key-map", help='JSON, e.g. {"q_key": "q_vbs2tango"}')
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("split", parents=[common], help="random train/val split of a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--n-train", type=int, required=True)
    p.add_argument("--n-val", type=int, required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("calibrate-ko", parents=[common], help="estimate the box-size constant K_O")
    p.add_argument("--manifest", required=True)
    p.add_argument("--fill", type=float, default=0.8, help="fraction of the box side the target spans")
    p.set_defaults(func=cmd_calibrate_ko)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--train", required=True, help="training manifest")
    p.add_argument("--val", required=True, help="validation manifest")
    p.add_argument("--resume", help="last.ckpt to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", parents=[common], help="run the init x HC x CDA ablation")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--translation-epochs", type=int)
    p.add_argument("--pose-epochs", type=int)
    p.add_argument("--warm-start-hc", action="store_true",
                   help="initialize end-to-end runs from the shared translation checkpoint")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--style", choices=["table2", "table4", "table5"], default="table2")
    p.add_argument("--init-label", default="Random", help="init column for table4")
    p.add_argument("--cda-label", action="store_true", help="mark the CDA column for table4")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="predict the pose of one image")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("overlay", parents=[common], help="draw the predicted ROI onto an image")
    p.add_argument("--image", required=True)
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("selftest", parents=[common], help="run gradient and invariant checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        np.random.seed(args.seed)
        torch.manual_seed(args.seed)
        config = load_config(args.config, args.overrides)
        code = args.func(args, config)
        return EXIT_OK if code is None else code
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GeometryError, PretrainedWeightsUnavailable, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:  # invalid configuration values, including ConfigError
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FloatingPointError, TrainingError) as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
