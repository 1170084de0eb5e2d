"""
Command-line front end.

    advdepth gen        synthetic dataset
    advdepth verify     invariant scan of a dataset directory
    advdepth train      fit a depth or segmentation net
    advdepth attack     per-image FGSM / I-FGSM / MI-FGSM, non-targeted or targeted
    advdepth universal  universal perturbations, single- vs multi-task
    advdepth report     aggregate CSV reports into markdown tables

Every subcommand takes ``--config FILE.json``; keys are option names with
dashes replaced by underscores, and explicit flags win over file values.
Exit codes: 0 ok, 1 usage, 2 data, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import attacks, data, metrics, models, universal
from .errors import DataFormatError, NumericalError

log = logging.getLogger("advdepth")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _csv_floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _weights(text):
    vals = _csv_floats(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"weights take the form wd,ws; got {text!r}")
    return tuple(vals)


def _size(text):
    parts = str(text).lower().split("x")
    try:
        dims = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must be N or HxW, got {text!r}") from None
    if len(dims) == 1:
        dims = dims * 2
    if len(dims) != 2 or min(dims) < 8 or dims[0] % 4 or dims[1] % 4:
        raise argparse.ArgumentTypeError("size must be at least 8 and a multiple of 4")
    return tuple(dims)


# options that must come from a flag or the config file
REQUIRED = {
    "gen": ("out",),
    "verify": ("data",),
    "train": ("data", "out"),
    "attack": ("model", "data", "out"),
    "universal": ("depth_model", "data", "out"),
    "report": ("out",),
}


def build_parser():
    p = _Parser(prog="advdepth", description="Adversarial attacks on toy monocular depth networks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def cmd(name, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="JSON file of option defaults")
        return sp

    sp = cmd("gen", "generate a synthetic dataset")
    sp.add_argument("--count", type=int, default=100)
    sp.add_argument("--size", type=_size, default=(64, 64))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--sparsity", type=float, default=0.3)
    sp.add_argument("--val-fraction", type=float, default=0.2)
    sp.add_argument("--out")

    sp = cmd("verify", "check dataset invariants")
    sp.add_argument("--data")

    sp = cmd("train", "train a network")
    sp.add_argument("--arch", choices=sorted(models.ARCHS), default="arch-A")
    sp.add_argument("--task", choices=("depth", "seg"), default="depth")
    sp.add_argument("--epochs", type=int, default=20)
    sp.add_argument("--lr", type=float, default=None, help="default 0.01 (depth) / 0.05 (seg)")
    sp.add_argument("--batch-size", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--data")
    sp.add_argument("--out")

    sp = cmd("attack", "run per-image attacks and write a CSV report")
    sp.add_argument("--method", choices=attacks.METHODS, default="ifgsm")
    sp.add_argument("--mode", choices=attacks.MODES, default="non-targeted")
    sp.add_argument("--epsilon", type=float, default=16.0)
    sp.add_argument("--alpha", type=float, default=1.0)
    sp.add_argument("--iterations", type=int, default=None)
    sp.add_argument("--momentum", type=float, default=1.0)
    sp.add_argument("--target-depth", type=_csv_floats, default=[100.0])
    sp.add_argument("--instance", type=int, default=0, help="index among each image's selected targets")
    sp.add_argument("--threshold", type=float, default=50.0, help="target selection depth bound (m)")
    sp.add_argument("--model")
    sp.add_argument("--eval-model", default=None)
    sp.add_argument("--data")
    sp.add_argument("--split", default="validation")
    sp.add_argument("--limit", type=int, default=None)
    sp.add_argument("--save-images", action="store_true")
    sp.add_argument("--out")

    sp = cmd("universal", "train universal perturbations and compare task weightings")
    sp.add_argument("--weights", type=_weights, action="append", default=None, help="wd,ws; repeatable")
    sp.add_argument("--gamma", type=float, default=1.0)
    sp.add_argument("--epochs", type=int, default=2)
    sp.add_argument("--epsilon", type=float, default=16.0)
    sp.add_argument("--momentum", type=float, default=1.0)
    sp.add_argument("--iterations", type=int, default=None)
    sp.add_argument("--batch-size", type=int, default=10)
    sp.add_argument("--method", choices=universal.INNER_METHODS, default="mifgsm")
    sp.add_argument("--clean-start", action="store_true", help="start each minibatch from clean images")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--depth-model")
    sp.add_argument("--seg-model", default=None)
    sp.add_argument("--data")
    sp.add_argument("--train-split", default="train")
    sp.add_argument("--eval-split", default="validation")
    sp.add_argument("--train-limit", type=int, default=None)
    sp.add_argument("--eval-limit", type=int, default=None)
    sp.add_argument("--out")

    sp = cmd("report", "aggregate CSV reports into markdown")
    sp.add_argument("--in", dest="inputs", nargs="*", default=[])
    sp.add_argument("--out")
    return p


def parse_args(argv):
    """Parse twice: once to find --config, then with file values as defaults."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        converted = {}
        for key, value in cfg.items():
            dest = key.replace("-", "_")
            if dest not in known or dest in ("config", "help"):
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            action = known[dest]
            if action.type is not None and isinstance(value, (str, int, float)):
                try:
                    value = action.type(value)
                except (argparse.ArgumentTypeError, ValueError) as e:
                    raise UsageError(f"config key {key!r}: {e}") from None
            if dest == "weights" and value and isinstance(value[0], (list, tuple)):
                value = [tuple(v) for v in value]
            converted[dest] = value
        sub.set_defaults(**converted)
        args = parser.parse_args(argv)
    missing = [f"--{d.replace('_', '-')}" for d in REQUIRED[args.command] if getattr(args, d) is None]
    if missing:
        raise UsageError(f"the following arguments are required: {', '.join(missing)}")
    return args


def effective_config(args) -> dict:
    out = OrderedDict()
    for k in sorted(vars(args)):
        if k in ("config", "verbose"):
            continue
        v = getattr(args, k)
        out[k] = list(v) if isinstance(v, tuple) else v
    return out


def _write_json(path, obj):
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def _mkdir(path):
    try:
        Path(path).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataFormatError(f"cannot create {path}: {e.strerror}") from None


def _load_model(path, kind):
    net = models.load_net(path)
    want = models.DepthNet if kind == "depth" else models.SegNet
    if not isinstance(net, want):
        raise DataFormatError(f"{path} is not a {kind} checkpoint")
    return net


# --------------------------------------------------------------------------


def cmd_gen(args):
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    if not 0 <= args.val_fraction <= 1:
        raise UsageError("--val-fraction must lie in [0, 1]")
    try:
        base = data.SceneConfig(height=args.size[0], width=args.size[1], sparsity=args.sparsity)
    except ValueError as e:
        raise UsageError(str(e)) from None
    _mkdir(args.out)
    samples = data.generate_dataset(args.count, args.seed, base)
    splits = data.split_indices(args.count, args.seed, args.val_fraction)
    try:
        data.write_dataset(args.out, samples, splits)
    except OSError as e:
        raise DataFormatError(f"cannot write dataset to {args.out}: {e.strerror}") from None
    _write_json(Path(args.out) / "config.json", effective_config(args))
    print(f"wrote {args.count} scenes to {args.out}")
    return EXIT_OK


def cmd_verify(args):
    bad = 0
    total = 0
    for sid, sample in data.load_dataset(args.data):
        total += 1
        for problem in data.check_sample(sample):
            print(f"{sid}: {problem}")
            bad += 1
    print(f"checked {total} samples, {bad} problems")
    return EXIT_OK if bad == 0 else EXIT_DATA


def cmd_train(args):
    if args.epochs < 0:
        raise UsageError("--epochs must be non-negative")
    lr = args.lr if args.lr is not None else (0.01 if args.task == "depth" else 0.05)
    train = [s for _, s in data.load_dataset(args.data, "train")]
    heldout = [s for _, s in data.load_dataset(args.data, "validation")]
    if not train:
        raise DataFormatError(f"no training samples in {args.data}")
    if args.task == "depth":
        net = models.new_depth_net(args.arch, args.seed)
    else:
        net = models.new_seg_net(args.arch, args.seed, data.NUM_CLASSES)
    report = models.train(net, train, args.epochs, lr, args.seed, batch_size=args.batch_size, heldout=heldout or None)
    out = Path(args.out)
    _mkdir(out.parent)
    net.save(out)
    cfg = effective_config(args)
    cfg["lr"] = lr
    _write_json(out.with_name(out.name + ".report.json"), {"config": cfg, "report": report.as_dict(), "param_count": net.param_count})
    metric = f"held-out RMSE {report.heldout_rmse:.3f} m" if args.task == "depth" else f"held-out pixel accuracy {report.heldout_accuracy}"
    print(f"{args.task} {args.arch}: final loss {report.final_loss:.4f}, {metric if heldout else 'no held-out split'}")
    return EXIT_OK


def _batches(items, size=32):
    for i in range(0, len(items), size):
        yield items[i : i + size]


def cmd_attack(args):
    if args.epsilon < 0:
        raise UsageError("--epsilon must be non-negative")
    try:
        cfg = attacks.AttackConfig(args.epsilon, args.alpha, args.iterations, args.momentum, args.mode)
    except ValueError as e:
        raise UsageError(str(e)) from None
    net = _load_model(args.model, "depth")
    eval_net = _load_model(args.eval_model, "depth") if args.eval_model else net
    items = data.load_dataset(args.data, args.split, args.limit)
    out = Path(args.out)
    _mkdir(out)
    if args.save_images:
        _mkdir(out / "adv")

    rows = []
    max_quant = 0.0
    max_linf = 0.0

    def record(ids, x, res, target):
        nonlocal max_quant, max_linf
        for i, sid in enumerate(ids):
            rows.append((sid, args.method, args.mode, res.metrics[i], target))
            q = np.clip(np.rint(res.x_adv[i]), 0, 255)
            max_quant = max(max_quant, float(np.abs(q - res.x_adv[i]).max()))
            max_linf = max(max_linf, float(np.abs(q - x[i]).max()))
            if args.save_images:
                suffix = "" if target is None else f".C{target:g}"
                from .netpbm import write_ppm

                write_ppm(out / "adv" / f"{sid}{suffix}.rgb.ppm", q)

    if args.mode == "non-targeted":
        for chunk in _batches(items):
            ids = [sid for sid, _ in chunk]
            b = data.stack([s for _, s in chunk])
            res = attacks.non_targeted(args.method, net, b["rgb"], b["depth"], b["valid"], cfg, eval_net=eval_net)
            record(ids, b["rgb"], res, None)
    else:
        picked = []
        for sid, s in items:
            targets = metrics.select_targets(s.instances, s.depth, s.valid, args.threshold)
            if len(targets) > args.instance:
                picked.append((sid, s, targets[args.instance]))
        if not picked:
            log.warning("no image has a selectable target instance %d", args.instance)
        for c in args.target_depth:
            for chunk in _batches(picked):
                ids = [sid for sid, _, _ in chunk]
                b = data.stack([s for _, s, _ in chunk])
                masks = np.stack([m for _, _, m in chunk])
                res = attacks.targeted(
                    args.method, net, b["rgb"], masks, c, b["depth"], b["valid"], cfg, eval_net=eval_net
                )
                record(ids, b["rgb"], res, c)

    metrics.write_csv(out / "report.csv", rows)
    cfg_out = effective_config(args)
    cfg_out["quantization"] = {"max_rounding_gap": max_quant, "max_quantized_linf": max_linf}
    _write_json(out / "config.json", cfg_out)
    summary = attacks.summarize([r[3] for r in rows]) if rows else None
    if summary is not None:
        line = f"{args.method} {args.mode}: RMSE {summary.clean_rmse:.3f} -> {summary.adv_rmse:.3f} ({metrics.format_ratio(summary.rmse_ratio)})"
        if summary.clean_mmd is not None:
            line += f", MMD {summary.clean_mmd:.2f} -> {summary.adv_mmd:.2f}"
        print(line)
    print(f"wrote {len(rows)} rows to {out / 'report.csv'}")
    return EXIT_OK


def cmd_universal(args):
    weights = args.weights or [(0.5, 0.5), (1.0, 0.0)]
    try:
        settings = [universal.MultiTaskWeights(*w) for w in weights]
        ucfg = universal.UniversalTrainConfig(
            epsilon=args.epsilon,
            gamma=args.gamma,
            momentum=args.momentum,
            epochs=args.epochs,
            iterations=args.iterations,
            batch_size=args.batch_size,
            method=args.method,
            apply_delta=not args.clean_start,
            seed=args.seed,
        )
    except ValueError as e:
        raise UsageError(str(e)) from None
    needs_seg = any(w.semantic > 0 for w in settings)
    if needs_seg and not args.seg_model:
        raise UsageError("--seg-model is required when a semantic weight is positive")

    log.info("loading depth model %s", args.depth_model)
    depth_net = _load_model(args.depth_model, "depth")
    seg_net = None
    if needs_seg:
        log.info("loading segmentation model %s", args.seg_model)
        seg_net = _load_model(args.seg_model, "seg")
    train = [s for _, s in data.load_dataset(args.data, args.train_split, args.train_limit)]
    evals = data.load_dataset(args.data, args.eval_split, args.eval_limit)
    if not train:
        raise DataFormatError(f"no samples in split {args.train_split!r}")
    out = Path(args.out)
    _mkdir(out)

    rows, comparison = [], []
    for w in settings:
        setting = "single-task" if w.semantic == 0 else "multi-task"
        tag = f"{w.depth:g}_{w.semantic:g}"
        pert = universal.train_universal(depth_net, seg_net if w.semantic > 0 else None, train, ucfg, w)
        pert.save(out / f"delta_{tag}.bin")
        reports = universal.evaluate_universal(depth_net, [s for _, s in evals], pert)
        method = f"universal-{args.method}"
        for (sid, _), r in zip(evals, reports):
            rows.append((sid, method, f"{setting}:{tag}", r, None))
        s = attacks.summarize(reports) if reports else metrics.ratio_report()
        comparison.append((setting, w.depth, w.semantic, method, s))
        print(f"{setting} ({tag}): RMSE {_num(s.clean_rmse)} -> {_num(s.adv_rmse)} ({metrics.format_ratio(s.rmse_ratio)})")

    metrics.write_csv(out / "universal.csv", rows)
    with open(out / "comparison.csv", "w", newline="") as f:
        import csv

        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["setting", "w-depth", "w-semantic", "method", "clean-rmse", "adv-rmse", "rmse-ratio"])
        for setting, wd, ws, method, s in comparison:
            wr.writerow([setting, repr(wd), repr(ws), method, metrics._fmt(s.clean_rmse), metrics._fmt(s.adv_rmse), metrics._fmt(s.rmse_ratio)])
    cfg = effective_config(args)
    cfg["weights"] = [list(w) for w in weights]
    _write_json(out / "config.json", cfg)
    return EXIT_OK


REPORT_HEADER = (
    "| source | method | mode | target (m) | images | clean RMSE | adv RMSE | RMSE ratio | clean MMD | adv MMD | MMD ratio |",
    "|---|---|---|---|---|---|---|---|---|---|---|",
)


def aggregate(rows):
    """Group ``(source, image_id, method, mode, report, target)`` rows; means per group."""
    groups = OrderedDict()
    for source, _, method, mode, rep, target in rows:
        groups.setdefault((source, method, mode, target), []).append(rep)
    return [(key, len(reps), attacks.summarize(reps)) for key, reps in groups.items()]


def _num(v, fmt="{:.3f}"):
    return "" if v is None else fmt.format(v)


def render_report(rows) -> str:
    lines = ["# Attack report", "", *REPORT_HEADER]
    for (source, method, mode, target), n, s in aggregate(rows):
        lines.append(
            "| "
            + " | ".join(
                [
                    source,
                    method,
                    mode,
                    _num(target, "{:g}"),
                    str(n),
                    _num(s.clean_rmse),
                    _num(s.adv_rmse),
                    metrics.format_ratio(s.rmse_ratio),
                    _num(s.clean_mmd, "{:.2f}"),
                    _num(s.adv_mmd, "{:.2f}"),
                    metrics.format_ratio(s.mmd_ratio),
                ]
            )
            + " |"
        )
    return "\n".join(lines) + "\n"


def cmd_report(args):
    rows = []
    for path in args.inputs:
        p = Path(path)
        if not p.exists():
            raise DataFormatError(f"no such report {path}")
        source = p.parent.name or p.stem
        if p.name not in ("report.csv", "universal.csv"):
            source = p.stem
        try:
            for image_id, method, mode, rep, target in metrics.read_csv(p):
                rows.append((source, image_id, method, mode, rep, target))
        except ValueError as e:
            raise DataFormatError(str(e)) from None
    text = render_report(rows)
    text += "\nInputs: " + (", ".join(str(Path(p)) for p in args.inputs) or "none") + "\n"
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    with open(args.out, "w") as f:
        f.write(text)
    print(f"wrote {args.out}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "verify": cmd_verify,
    "train": cmd_train,
    "attack": cmd_attack,
    "universal": cmd_universal,
    "report": cmd_report,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as e:
        print(f"advdepth: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"advdepth: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, FileNotFoundError) as e:
        print(f"advdepth: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"advdepth: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
