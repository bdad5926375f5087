"""Command line interface.

Subcommands: dither, train-nn, extract-dcdl, extract-blackbox, evaluate,
visualize, run-experiment.  Exit codes: 0 success, 1 usage error, 2 data
error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import binarize, bnn, datasets, extraction, metrics
from .boolcore import DnfFormula, eval_formula_batch, format_formula, parse_formula
from .convrules import (
    ConvRule,
    reduce_visualization_channels,
    term_to_images,
    write_pgm,
    write_png,
)
from .errors import ConfigError, ContractError, DataFormatError, RuleParseError, TrainingFailure
from .experiment import (
    ExperimentConfig,
    load_config,
    load_experiment_data,
    run_experiment,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _ensure_out_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


# --- dither -------------------------------------------------------------------

def cmd_dither(args) -> int:
    if args.cifar:
        dataset = datasets.load_cifar10(args.cifar)
    elif args.images and args.labels:
        dataset = datasets.load_idx(args.images, args.labels)
    else:
        raise ConfigError("dither needs --images plus --labels, or --cifar")
    planes = [binarize.dither_floyd_steinberg(img) for img in dataset.images]
    datasets.save_bitplanes(args.out, planes, dataset.labels, dataset.class_count)
    print(f"dithered {len(planes)} images "
          f"({planes[0].height}x{planes[0].width}x{planes[0].channels}) -> {args.out}")
    return EXIT_OK


# --- train-nn ------------------------------------------------------------------

def _config_from_args(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    for name in ("seed", "k", "jobs", "data_dir", "out"):
        value = getattr(args, name, None)
        if value is None:
            continue
        if name == "seed":
            cfg.seeds = [value]
        elif name == "out":
            cfg.out_dir = value
        else:
            setattr(cfg, name if name != "data_dir" else "data_dir", value)
    return cfg


def _load_split(path, holdout_size, seed):
    planes, labels, class_count = datasets.load_bitplanes(path)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(planes))
    hold = order[:holdout_size]
    rest = order[holdout_size:]
    return ([planes[i] for i in rest], labels[rest],
            [planes[i] for i in hold], labels[hold], class_count)


def cmd_train_nn(args) -> int:
    cfg = _config_from_args(args)
    train_p, train_l, hold_p, hold_l, _ = _load_split(args.data, args.holdout_size,
                                                      cfg.seeds[0])
    y_train = train_l == args.target_class
    y_hold = hold_l == args.target_class
    sample = train_p[0]
    arch = bnn.default_architecture((sample.channels, sample.height, sample.width),
                                    filters1=cfg.nn_filters1, filters2=cfg.nn_filters2,
                                    filter_size=cfg.nn_filter_size, pool=cfg.nn_pool,
                                    dropout=cfg.nn_dropout)
    model = bnn.build_model(arch, cfg.nn_params(), seed=cfg.seeds[0])
    model = bnn.train(model, train_p, y_train, hold_p, y_hold, verbose=args.verbose)
    bnn.save_model(model, args.out)
    acc = float((bnn.predict_classes(model, hold_p) == y_hold.astype(int)).mean())
    print(f"trained network (holdout accuracy {acc:.4f}) -> {args.out}")
    return EXIT_OK


# --- extract -------------------------------------------------------------------

def cmd_extract_dcdl(args) -> int:
    cfg = _config_from_args(args)
    train_p, _, hold_p, _, _ = _load_split(args.data, args.holdout_size, cfg.seeds[0])
    model = bnn.load_model(args.model)
    dcdl_model = extraction.dcdl_train(model, train_p, hold_p,
                                       cfg.sls_params(cfg.seeds[0]),
                                       max_windows=cfg.max_windows, verbose=args.verbose)
    extraction.save_dcdl(dcdl_model, args.out)
    print(f"layerwise rule model -> {args.out}")
    return EXIT_OK


def cmd_extract_blackbox(args) -> int:
    cfg = _config_from_args(args)
    train_p, train_l, hold_p, hold_l, _ = _load_split(args.data, args.holdout_size,
                                                      cfg.seeds[0])
    if args.mode == "nn_prediction":
        if not args.model:
            raise ConfigError("--mode nn_prediction needs --model")
        model = bnn.load_model(args.model)
        labels = bnn.predict_classes(model, train_p) == 1
        val_labels = bnn.predict_classes(model, hold_p) == 1
    else:
        labels = train_l == args.target_class
        val_labels = hold_l == args.target_class
    formula = extraction.blackbox_train(train_p, labels, args.mode,
                                        cfg.sls_params(cfg.seeds[0]),
                                        validation_images=hold_p,
                                        validation_labels=val_labels)
    with open(args.out, "w") as fh:
        fh.write(f"dnf {formula.n}\n{format_formula(formula)}\n")
    print(f"black-box formula ({args.mode}) -> {args.out}")
    return EXIT_OK


# --- evaluate -------------------------------------------------------------------

def _load_dnf_file(path) -> DnfFormula:
    with open(path) as fh:
        lines = [l for l in fh.read().splitlines() if l.strip()]
    if len(lines) != 2 or not lines[0].startswith("dnf "):
        raise RuleParseError(f"{path}: expected a 'dnf <n>' header plus one formula line")
    return parse_formula(lines[1], int(lines[0].split()[1]))


def cmd_evaluate(args) -> int:
    planes, labels, _ = datasets.load_bitplanes(args.test)
    truth = labels == args.target_class
    model = bnn.load_model(args.model)
    nn_pred = bnn.predict_classes(model, planes) == 1
    rows = [("neural_network", nn_pred)]
    if args.dcdl:
        rows.append(("dcdl", extraction.dcdl_predict_batch(extraction.load_dcdl(args.dcdl), planes)))
    flat = np.stack([p.as_instance().bits for p in planes])
    if args.bb_prediction:
        rows.append(("bb_prediction", eval_formula_batch(_load_dnf_file(args.bb_prediction), flat)))
    if args.bb_label:
        rows.append(("bb_label", eval_formula_batch(_load_dnf_file(args.bb_label), flat)))
    print(metrics.CSV_HEADER)
    for method, pred in rows:
        sim = metrics.similarity(pred, nn_pred)
        acc = metrics.accuracy(pred, truth)
        print(metrics.format_csv_row("evaluate", args.target_class, 0, method, sim, acc))
    return EXIT_OK


# --- visualize ------------------------------------------------------------------

def _render_rule(rule: ConvRule, out_dir, stem: str, fmt: str) -> int:
    writer = write_png if fmt == "png" else write_pgm
    count = 0
    for ti, term in enumerate(rule.formula.terms):
        for ch, img in enumerate(term_to_images(term, rule.fh, rule.fw, rule.fc)):
            suffix = f"_ch{ch}" if rule.fc > 1 else ""
            writer(img, os.path.join(out_dir, f"{stem}_term{ti}{suffix}.{fmt}"))
            count += 1
    for ch, img in enumerate(reduce_visualization_channels(rule)):
        suffix = f"_ch{ch}" if rule.fc > 1 else ""
        writer(img, os.path.join(out_dir, f"{stem}_reduced{suffix}.{fmt}"))
        count += 1
    return count


def _rules_from_path(path):
    """Yield (stem, ConvRule) from a rule file or a layerwise model file."""
    with open(path) as fh:
        text = fh.read()
    base = os.path.splitext(os.path.basename(path))[0]
    if text.lstrip().startswith("conv "):
        from .convrules import parse_rule

        yield base, parse_rule(text)
        return
    model = extraction.parse_dcdl(text)
    li = 0
    for layer in model.layers:
        if isinstance(layer, extraction.ConvLayerApprox):
            for fi, rule in enumerate(layer.rules):
                yield f"{base}_layer{li}_filter{fi}", rule
            li += 1


def cmd_visualize(args) -> int:
    out_dir = _ensure_out_dir(args.out)
    total = 0
    paths = []
    for path in args.inputs:
        if os.path.isdir(path):
            for root, _, names in os.walk(path):
                paths.extend(os.path.join(root, n) for n in sorted(names)
                             if n.endswith((".rule", ".txt")))
        else:
            paths.append(path)
    if not paths:
        raise DataFormatError("no rule files found to visualize")
    for path in paths:
        for stem, rule in _rules_from_path(path):
            total += _render_rule(rule, out_dir, stem, args.format)
    print(f"wrote {total} images -> {out_dir}")
    return EXIT_OK


# --- run-experiment ---------------------------------------------------------------

def cmd_run_experiment(args) -> int:
    cfg = _config_from_args(args)
    if args.seeds:
        cfg.seeds = [int(s) for s in args.seeds.split(",")]
    if args.classes:
        cfg.target_classes = [int(c) for c in args.classes.split(",")]
    cfg.validate()
    report = run_experiment(cfg, verbose=args.verbose)
    print(f"report -> {report.out_dir}")
    print(report.table_text)
    for method in ("dcdl", "bb_prediction", "bb_label"):
        if report.results:
            print(f"mean similarity {method}: {report.mean_similarity(method):.4f}")
    if report.failures:
        print(f"{len(report.failures)} run(s) failed; see failures.txt", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dcdl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dither", help="dither an image dataset to packed bit planes")
    p.add_argument("--images", help="IDX image file")
    p.add_argument("--labels", help="IDX label file")
    p.add_argument("--cifar", nargs="*", help="CIFAR-10 binary batch files")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dither)

    p = sub.add_parser("train-nn", help="train the binary-activation network")
    p.add_argument("--data", required=True, help="dithered bit-plane container")
    p.add_argument("--target-class", type=int, required=True)
    p.add_argument("--holdout-size", type=int, default=2000)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train_nn)

    p = sub.add_parser("extract-dcdl", help="extract layerwise rules from a trained network")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--holdout-size", type=int, default=2000)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_extract_dcdl)

    p = sub.add_parser("extract-blackbox", help="fit one DNF to whole images")
    p.add_argument("--model", help="needed for --mode nn_prediction")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=extraction.BLACKBOX_MODES, default="nn_prediction")
    p.add_argument("--target-class", type=int, default=0)
    p.add_argument("--holdout-size", type=int, default=2000)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_blackbox)

    p = sub.add_parser("evaluate", help="score extracted artifacts on a test container")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--target-class", type=int, required=True)
    p.add_argument("--dcdl")
    p.add_argument("--bb-prediction")
    p.add_argument("--bb-label")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("visualize", help="render rule files as images")
    p.add_argument("inputs", nargs="+", help="rule files, model files or directories")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("png", "pgm"), default="png")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("run-experiment", help="full pipeline across classes and seeds")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--classes", help="comma-separated target classes")
    p.add_argument("--k", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--out")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_run_experiment)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ContractError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingFailure, ArithmeticError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
