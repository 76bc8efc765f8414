"""Command-line interface: ``dunet <command> [flags]``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

from .data import AugmentSpec, SyntheticSpec, checksum, generate, load_dir, read_cloud, write_cloud
from .diffusion_lab import (
    constant,
    contrast_ratio,
    diffuse,
    edge_response,
    perona_malik,
    step_edge_profile,
    two_region_cloud,
)
from .errors import ParseError, SpecError, StabilityError, TrainingDiverged
from .model import ModelConfig, build_model, smoothness_probe
from .train import (
    TrainConfig,
    evaluate,
    evaluate_with_voting,
    fit,
    load_checkpoint,
    save_checkpoint,
    voting_spec,
)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
TASK_NAMES = {"cls": "classification", "seg": "segmentation"}


class UsageError(Exception):
    """Bad flags, config values or inputs; reported with exit code 2."""


# --- value parsers shared by flags and config files ----------------------------

def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _non_negative_float(s):
    v = float(s)
    if not math.isfinite(v) or v < 0:
        raise argparse.ArgumentTypeError(f"expected a finite non-negative number, got {s}")
    return v


def _positive_float(s):
    v = float(s)
    if not math.isfinite(v) or v <= 0:
        raise argparse.ArgumentTypeError(f"expected a finite positive number, got {s}")
    return v


def _int_list(s):
    try:
        return tuple(int(x) for x in str(s).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s}") from None


def _float_list(s):
    try:
        vals = tuple(float(x) for x in str(s).split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s}") from None
    if not all(math.isfinite(v) for v in vals):
        raise argparse.ArgumentTypeError(f"values must be finite, got {s}")
    return vals


def _bool(s):
    low = str(s).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s}")


def _choice(*options):
    def parse(s):
        if s not in options:
            raise argparse.ArgumentTypeError(f"expected one of {', '.join(options)}, got {s}")
        return s
    return parse


# key -> (parser, default); defaults of None are filled from the task recipe
TRAIN_KEYS = {
    "task": (_choice("cls", "seg"), None),
    "widths": (_int_list, (64, 128, 256, 512)),
    "lift_width": (_positive_int, 64),
    "ratios": (_float_list, (0.25, 0.25, 0.25, 0.25)),
    "k": (_positive_int, 16),
    "enable_phi": (_bool, True),
    "enable_varphi": (_bool, True),
    "repeat": (_positive_int, 1),
    "num_classes": (_positive_int, None),
    "num_parts": (_positive_int, None),
    "head_widths": (_int_list, (512, 256)),
    "dropout": (_non_negative_float, 0.5),
    "optimizer": (_choice("adam", "sgd-momentum"), None),
    "lr": (_non_negative_float, None),
    "lr_decay": (_positive_float, None),
    "lr_step": (int, None),
    "epochs": (_positive_int, None),
    "batch_size": (_positive_int, 8),
    "augment": (_choice("recipe", "none"), "recipe"),
    "seed": (int, 0),
}


def read_config_file(path, keys):
    """Parse ``key = value`` lines (``#`` comments allowed) into typed values."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in keys:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}; known keys: {', '.join(sorted(keys))}")
        try:
            out[key] = keys[key][0](value)
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return out


def print_config(command, cfg):
    print(f"# dunet {command}")
    for key, value in cfg.items():
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        print(f"{key} = {value}")
    sys.stdout.flush()


def _require_dir(path, what):
    if not Path(path).is_dir():
        raise UsageError(f"{what} directory {path} does not exist")
    clouds = load_dir(path)
    if not clouds:
        raise UsageError(f"{what} directory {path} contains no .duc files")
    return clouds


def _require_file(path, what):
    if not Path(path).is_file():
        raise UsageError(f"{what} {path} does not exist")
    return Path(path)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(x):
    return repr(float(x))


# --- commands -----------------------------------------------------------------

def cmd_gen_data(args):
    spec = SyntheticSpec(args.family, args.n, args.per_class, args.noise, args.seed)
    print_config("gen-data", vars(spec) | {"out": args.out})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clouds = generate(spec)
    for c in clouds:
        write_cloud(c, out / f"{c.name}.duc")
    print(f"wrote {len(clouds)} clouds to {out} (sha256 {checksum(clouds)[:16]})")


def resolve_train_config(args):
    cfg = {key: default for key, (_, default) in TRAIN_KEYS.items()}
    if args.config:
        cfg.update(read_config_file(args.config, TRAIN_KEYS))
    cfg.update({k: v for k, v in vars(args).items() if k in TRAIN_KEYS and v is not None})
    if cfg["task"] is None:
        raise UsageError("--task is required (cls or seg), on the command line or in the config file")
    recipe = TrainConfig.for_task(TASK_NAMES[cfg["task"]])
    for key in ("optimizer", "lr", "lr_decay", "lr_step", "epochs"):
        if cfg[key] is None:
            cfg[key] = getattr(recipe, key)
    cfg["_augment"] = recipe.augment if cfg["augment"] == "recipe" else AugmentSpec()
    return cfg


def _build_configs(cfg):
    try:
        model_cfg = ModelConfig(
            task=TASK_NAMES[cfg["task"]], widths=cfg["widths"], ratios=cfg["ratios"], k=cfg["k"],
            enable_phi=cfg["enable_phi"], enable_varphi=cfg["enable_varphi"], repeat=cfg["repeat"],
            num_classes=cfg["num_classes"] or 5, num_parts=cfg["num_parts"] or 2,
            lift_width=cfg["lift_width"], head_widths=cfg["head_widths"], dropout=cfg["dropout"],
        )
        train_cfg = TrainConfig(
            optimizer=cfg["optimizer"], lr=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch_size"],
            seed=cfg["seed"], lr_decay=cfg["lr_decay"], lr_step=cfg["lr_step"], augment=cfg["_augment"],
        )
    except (SpecError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return model_cfg, train_cfg


def _infer_label_count(cfg, clouds):
    key = "num_classes" if cfg["task"] == "cls" else "num_parts"
    for c in clouds:
        if c.labels is None:
            raise UsageError(f"cloud {c.name!r} has no labels")
    top = max(int(c.labels.max()) for c in clouds) + 1
    if cfg[key] is None:
        cfg[key] = max(top, 2)
    elif top > cfg[key]:
        raise UsageError(f"data has label {top - 1} but {key} = {cfg[key]}")


def cmd_train(args):
    cfg = resolve_train_config(args)
    _build_configs(cfg)  # surface config errors before any data is read
    train_clouds = _require_dir(args.data, "data")
    val_clouds = _require_dir(args.val, "validation") if args.val else None
    _infer_label_count(cfg, train_clouds + (val_clouds or []))
    model_cfg, train_cfg = _build_configs(cfg)
    unused = "num_parts" if cfg["task"] == "cls" else "num_classes"
    print_config("train", {k: v for k, v in cfg.items() if not k.startswith("_") and k != unused}
                 | {"data": args.data, "val": args.val, "out": args.out})
    model = build_model(model_cfg, seed=cfg["seed"])
    result = fit(model, train_clouds, train_cfg, val_clouds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ckpt", model, result.optimizer, train_cfg, result.epoch)
    (out / "metrics.csv").write_text(result.log_csv())
    last = result.log[-1]
    print(f"epoch {last[0]} {last[1]} loss {last[2]:.4f} {last[3]} {last[4]:.4f}")
    print(f"wrote {out / 'model.ckpt'} and {out / 'metrics.csv'}")


def cmd_eval(args):
    ckpt_path = _require_file(args.ckpt, "checkpoint")
    clouds = _require_dir(args.data, "data")
    ckpt = _load_ckpt(ckpt_path)
    model = ckpt.model
    print_config("eval", {"ckpt": args.ckpt, "data": args.data, "votes": args.votes, "seed": args.seed,
                          "task": model.cfg.task, "epoch": ckpt.epoch})
    loss, name, value = evaluate(model, clouds)
    rows = [("loss", _fmt(loss)), (name, _fmt(value))]
    if args.votes > 1 and model.cfg.task == "classification":
        train_aug = AugmentSpec(**ckpt.train_config["augment"]) if ckpt.train_config else AugmentSpec()
        spec = voting_spec(train_aug)
        preds = [int(np.argmax(evaluate_with_voting(model, c, args.votes, spec, args.seed + i)))
                 for i, c in enumerate(clouds)]
        acc = float(np.mean([p == int(c.labels[0]) for p, c in zip(preds, clouds)]))
        rows.append((f"{name}_vote{args.votes}", _fmt(acc)))
    for metric, value in rows:
        print(f"{metric} = {value}")
    if args.out:
        _write_csv(args.out, ["metric", "value"], rows)


def cmd_diffuse(args):
    g = perona_malik(args.lam) if args.diffusivity == "pm" else constant(1.0)
    if args.tau * g.bound > 1.0:
        raise StabilityError(f"tau * max|g| = {args.tau * g.bound} exceeds 1")
    if args.cloud:
        cloud = read_cloud(_require_file(args.cloud, "cloud file"))
        if cloud.labels is None or cloud.features is None:
            raise UsageError(f"{args.cloud} needs per-point features and two-region labels")
    else:
        cloud = two_region_cloud(args.points, args.contrast, args.seed)
    print_config("diffuse", {"diffusivity": args.diffusivity, "lambda": args.lam, "steps": args.steps,
                             "tau": args.tau, "k": args.k, "cloud": args.cloud or f"two-region({args.points})",
                             "contrast": args.contrast, "seed": args.seed, "out": args.out})
    try:
        run = diffuse(cloud, g, args.steps, args.tau, k=args.k)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    series = contrast_ratio(run)
    if not all(math.isfinite(r) for _, r in series):
        raise FloatingPointError("contrast ratio became non-finite")
    _write_csv(args.out, ["step", "ratio"], [(t, _fmt(r)) for t, r in series])
    print(f"final ratio after {args.steps} steps: {series[-1][1]:.6f}")


def cmd_edge_experiment(args):
    print_config("edge-experiment", {"weights": args.weights, "points": args.points,
                                     "sharpness": args.sharpness, "out": args.out})
    cloud = step_edge_profile(args.points, args.sharpness)
    rows = []
    for w in args.weights:
        delta = edge_response(w, cloud)
        rows.append((_fmt(w), _fmt(delta), int(np.sign(delta))))
        print(f"w={w:+g}: delta|u_x| = {delta:+.6e}")
    _write_csv(args.out, ["w", "delta_grad", "sign"], rows)


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except (ParseError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {path}: {exc}") from None


def cmd_smoothness(args):
    ckpt_path = _require_file(args.ckpt, "checkpoint")
    cloud_path = _require_file(args.cloud, "cloud file")
    model = _load_ckpt(ckpt_path).model
    cloud = read_cloud(cloud_path)
    print_config("smoothness", {"ckpt": args.ckpt, "cloud": args.cloud, "layer": args.layer, "out": args.out})
    try:
        report = smoothness_probe(model, cloud, args.layer)
    except LookupError as exc:
        raise UsageError(exc.args[0]) from None
    lo = float(min(report.before.min(), report.after.min()))
    hi = float(max(report.before.max(), report.after.max()))
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    labels = cloud.labels if cloud.labels is not None and len(cloud.labels) == len(report.before) else None
    for which, values in (("before", report.before), ("after", report.after)):
        header = ["x", "y", "z", "smoothness"] + (["label"] if labels is not None else [])
        rows = []
        for i, (p, s) in enumerate(zip(report.positions, values)):
            row = [_fmt(p[0]), _fmt(p[1]), _fmt(p[2]), _fmt(s)]
            if labels is not None:
                row.append(int(labels[i]))
            rows.append(row)
        _write_csv(f"{prefix}_{which}.csv", header, rows)
        write_scatter_svg(f"{prefix}_{which}.svg", report.positions, values, lo, hi,
                          f"{args.layer} {which}")
        print(f"{which}: mean smoothness {values.mean():.6g}")
    print(f"wrote {prefix}_before.csv/.svg and {prefix}_after.csv/.svg")


# --- SVG -----------------------------------------------------------------------

_PALETTE = np.array([[68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37]], dtype=float)


def color_for(t):
    """Map ``t`` in [0, 1] onto a five-stop dark-to-bright ramp."""
    t = min(max(float(t), 0.0), 1.0) * (len(_PALETTE) - 1)
    i = min(int(t), len(_PALETTE) - 2)
    rgb = _PALETTE[i] + (t - i) * (_PALETTE[i + 1] - _PALETTE[i])
    return "#%02x%02x%02x" % tuple(int(round(c)) for c in rgb)


def write_scatter_svg(path, positions, values, lo, hi, title, size=420, margin=30):
    """Side view (x right, z up) of the points colored on the shared ``[lo, hi]`` scale."""
    pos = np.asarray(positions, dtype=float)
    x, z = pos[:, 0], pos[:, 2]
    span = max(np.ptp(x), np.ptp(z), 1e-12)
    inner = size - 2 * margin
    sx = margin + (x - x.min()) / span * inner
    sy = size - margin - (z - z.min()) / span * inner
    scale = hi - lo if hi > lo else 1.0
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(size), height=str(size + 40),
                     viewBox=f"0 0 {size} {size + 40}")
    ET.SubElement(svg, "rect", width="100%", height="100%", fill="white")
    ET.SubElement(svg, "text", x=str(margin), y="18", **{"font-size": "13", "font-family": "sans-serif"}).text = title
    order = np.argsort(values, kind="stable")
    for i in order:
        ET.SubElement(svg, "circle", cx=f"{sx[i]:.2f}", cy=f"{sy[i]:.2f}", r="2.2",
                      fill=color_for((values[i] - lo) / scale))
    bar_y = size + 8
    steps = 50
    for j in range(steps):
        ET.SubElement(svg, "rect", x=f"{margin + j * inner / steps:.2f}", y=str(bar_y),
                      width=f"{inner / steps + 0.5:.2f}", height="10", fill=color_for(j / (steps - 1)))
    for value, anchor, xpos in ((lo, "start", margin), (hi, "end", margin + inner)):
        ET.SubElement(svg, "text", x=str(xpos), y=str(bar_y + 24), **{"font-size": "11", "font-family": "sans-serif",
                                                                     "text-anchor": anchor}).text = f"{value:.4g}"
    ET.ElementTree(svg).write(path, encoding="utf-8", xml_declaration=True)


# --- argument parsing ------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="dunet", description="Diffusion-unit point-cloud networks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset as .duc files")
    p.add_argument("--family", type=_choice("cls-primitives", "seg-composites"), required=True)
    p.add_argument("--n", type=_positive_int, default=512, help="points per cloud")
    p.add_argument("--per-class", type=_positive_int, default=20)
    p.add_argument("--noise", type=_non_negative_float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a directory of .duc files")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    for key, (parse, _) in TRAIN_KEYS.items():
        if parse is _bool:
            p.add_argument(f"--{key.replace('_', '-').removeprefix('enable-')}", dest=key,
                           action=argparse.BooleanOptionalAction, default=None)
        else:
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, type=parse, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--votes", type=_positive_int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="optional metrics CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diffuse", help="classical explicit diffusion on a two-region cloud")
    p.add_argument("--diffusivity", type=_choice("const", "pm"), required=True)
    p.add_argument("--lambda", dest="lam", type=_positive_float, default=0.1)
    p.add_argument("--steps", type=_positive_int, default=50)
    p.add_argument("--tau", type=_positive_float, default=1.0)
    p.add_argument("--k", type=_positive_int, default=16)
    p.add_argument("--cloud", help=".duc file with features and two region labels")
    p.add_argument("--points", type=_positive_int, default=512, help="size of the built-in cloud")
    p.add_argument("--contrast", type=_positive_float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diffuse)

    p = sub.add_parser("edge-experiment", help="edge sharpening or smoothing by a linear diffusion unit")
    p.add_argument("--weights", type=_float_list, default=(-0.5, -0.1, 0.0, 0.1, 0.5))
    p.add_argument("--points", type=_positive_int, default=64)
    p.add_argument("--sharpness", type=_positive_float, default=4.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_edge_experiment)

    p = sub.add_parser("smoothness", help="feature smoothness before and after a diffusion unit")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--layer", default="decoder/stage4/du")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_smoothness)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    try:
        args.func(args)
    except (UsageError, ParseError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (StabilityError, TrainingDiverged, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
