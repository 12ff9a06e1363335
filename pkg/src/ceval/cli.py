"""Command-line entry point: ``ceval <command> [options]``.

Every run writes its outputs plus ``manifest.json`` (the resolved options and
the argv needed to rerun it) into ``--out``. Options can also come from a
config file with one ``[command]`` section of ``key = value`` lines; flags on
the command line win over the file.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import os
import re
import sys

import numpy as np

from . import __version__
from .attacks import AttackConfig, Mask
from .datasets import Dataset, load_mnist, make_gaussian_blobs, sample
from .explainers import (budget, parse_explainer, read_importance_csv,
                         write_explanation_json)
from .metric import (MetricUnavailable, c_values, ceval_plot, compute_normalized, json_float,
                     near_affine_check, pearson, rank_explainers, write_plot_csv,
                     write_ranking_csv)
from .models import (ARCHITECTURES, AdversarialConfig, TrainConfig, accuracy,
                     adversarial_accuracy, load_model, make_classifier, save_model, train,
                     train_adversarial)
from .parallel import default_workers, parallel_map
from .svg import box_plot, line_chart, scatter_plot

EXIT_USAGE = 2
EXIT_FAILURE = 1
MNIST_ENV = "CEVAL_MNIST_DIR"


class UsageError(Exception):
    """Bad arguments or missing inputs; exits with status 2."""


# ----------------------------------------------------------------- parsing
def _common(p):
    p.add_argument("--config", help="config file with [command] sections")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--backend", choices=["gsa", "iga", "cw", "oracle"], default="iga")
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: available cores)")


def _data_args(p, default="mnist"):
    p.add_argument("--data", choices=["mnist", "blobs"], default=default)
    p.add_argument("--data-dir", default=None,
                   help=f"directory with the MNIST IDX files (default: ${MNIST_ENV})")
    p.add_argument("--blobs-dims", type=int, default=20)
    p.add_argument("--blobs-classes", type=int, default=2)
    p.add_argument("--blobs-per-class", type=int, default=200)
    p.add_argument("--blobs-separation", type=float, default=8.0)


def _image_args(p):
    p.add_argument("--index", type=int, default=0, help="test-set image index")
    p.add_argument("--image", default=None, help=".npy file holding one input")


def _list_of_ints(text):
    try:
        return [int(v) for v in re.split(r"[,\s]+", text.strip()) if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated int list, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ceval", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"ceval {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a classifier")
    _common(p)
    _data_args(p)
    p.add_argument("--arch", choices=sorted(ARCHITECTURES), default="mlp")
    p.add_argument("--hidden", type=_list_of_ints, default=[128], help="MLP hidden sizes")
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--adversarial-eps", type=float, default=None,
                   help="normalized L2 bound for adversarial training")
    p.add_argument("--adversarial-eval", type=int, default=1000,
                   help="test images for the adversarial accuracy")

    p = sub.add_parser("ceval", help="c-Eval of one explanation")
    _common(p)
    _data_args(p)
    _image_args(p)
    p.add_argument("--model")
    p.add_argument("--explainer", default="gradient")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--k-fraction", type=float, default=0.1)
    p.add_argument("--save-delta", action="store_true")

    p = sub.add_parser("plot", help="c-Eval plot over explanation sizes")
    _common(p)
    _data_args(p)
    _image_args(p)
    p.add_argument("--model")
    p.add_argument("--explainer", nargs="+", default=["gradient"])
    p.add_argument("--k-list", type=_list_of_ints, default=[0, 16, 32, 48, 64, 80])

    p = sub.add_parser("rank", help="rank explainers by normalized c-Eval")
    _common(p)
    _data_args(p)
    p.add_argument("--model")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--explainer", nargs="+",
                   default=["gradient", "gradxinput", "ig:5", "ig:10", "lime", "dummy-random"])
    p.add_argument("--k-fraction", type=float, default=0.1)

    p = sub.add_parser("affine-check", help="near-affine diagnostic")
    _common(p)
    _data_args(p)
    _image_args(p)
    p.add_argument("--model")
    p.add_argument("--explainer", default="gradient")
    p.add_argument("--importance", default=None, help="CSV feature_index,weight")
    p.add_argument("--k-list", type=_list_of_ints, default=[16, 32, 48, 64, 80])

    p = sub.add_parser("correlate", help="correlate c-Eval across two models")
    _common(p)
    _data_args(p)
    p.add_argument("--model-a")
    p.add_argument("--model-b")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--explainer", default="gradient")
    p.add_argument("--k-fraction", type=float, default=0.1)
    return parser


def _subparser(parser, command):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)  # pragma: no cover


def _config_defaults(sub: argparse.ArgumentParser, path: str, command: str) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None)
    cp.read(path)
    if not cp.has_section(command):
        return {}
    actions = {a.dest: a for a in sub._actions}
    out = {}
    for key, raw in cp.items(command):
        dest = key.replace("-", "_")
        action = actions.get(dest)
        if action is None or dest == "config":
            raise UsageError(f"{path}: unknown option {key!r} in [{command}]")
        if isinstance(action, argparse._StoreTrueAction):
            out[dest] = cp.getboolean(command, key)
        elif action.nargs == "+":
            out[dest] = raw.split()
        else:
            value = action.type(raw) if action.type else raw
            if action.choices and value not in action.choices:
                raise UsageError(f"{path}: {key} must be one of {list(action.choices)}")
            out[dest] = value
    return out


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        sub = _subparser(parser, args.command)
        sub.set_defaults(**_config_defaults(sub, args.config, args.command))
        args = parser.parse_args(argv)
    for dest in ("model", "model_a", "model_b"):
        if hasattr(args, dest) and getattr(args, dest) is None:
            raise UsageError(f"--{dest.replace('_', '-')} is required")
    if args.workers is None:
        args.workers = default_workers()
    return args


# ----------------------------------------------------------------- helpers
def _load_dataset(args, split: str) -> Dataset:
    if args.data == "blobs":
        # the test split comes from the next seed so it is disjoint from training draws
        seed = args.seed + (1 if split == "test" else 0)
        return make_gaussian_blobs(args.blobs_dims, args.blobs_classes, args.blobs_per_class,
                                   args.blobs_separation, seed, split=split)
    directory = args.data_dir or os.environ.get(MNIST_ENV)
    if not directory or not os.path.isdir(directory):
        raise UsageError(f"MNIST directory not found: {directory!r} (pass --data-dir or set "
                         f"${MNIST_ENV})")
    try:
        return load_mnist(directory, split)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc


def _load_model(path):
    if not os.path.exists(path):
        raise UsageError(f"model file not found: {path}")
    return load_model(path)


def _load_image(args, model):
    if args.image:
        if not os.path.exists(args.image):
            raise UsageError(f"image file not found: {args.image}")
        x = np.load(args.image).astype(np.float64)
        ident = os.path.basename(args.image)
    else:
        data = _load_dataset(args, "test")
        if not 0 <= args.index < len(data):
            raise UsageError(f"--index {args.index} outside [0, {len(data)})")
        x = data.images[args.index]
        ident = f"{data.name}-test-{args.index}"
    if x.size != model.n_features:
        raise UsageError(f"image has {x.size} features, model expects {model.n_features}")
    return x.reshape(model._shape()), ident


def _explainers(texts):
    specs = []
    for text in texts:
        try:
            specs.extend(parse_explainer(text))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    return specs


def _attack_config(args, model) -> AttackConfig:
    if args.backend == "oracle" and model.architecture != "affine":
        raise UsageError("the oracle backend needs an affine model")
    return AttackConfig(args.backend)


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)


def _manifest(args, argv, outputs, **results):
    resolved = {k: v for k, v in vars(args).items() if k not in ("workers",)}
    doc = {
        "command": args.command,
        "argv": list(argv),
        "resolved": resolved,
        "version": __version__,
        "outputs": sorted(outputs),
        "results": results,
    }
    _write_json(os.path.join(args.out, "manifest.json"), doc)


# ---------------------------------------------------------------- commands
def cmd_train(args, argv):
    if args.epochs < 1:
        raise UsageError("--epochs must be >= 1")
    train_set = _load_dataset(args, "train")
    test_set = _load_dataset(args, "test")
    adversarial = AdversarialConfig(args.adversarial_eps) if args.adversarial_eps else None
    cfg = TrainConfig(optimizer=args.optimizer, lr=args.lr, epochs=args.epochs,
                      batch_size=args.batch_size, seed=args.seed, adversarial=adversarial)
    model = make_classifier(args.arch, train_set.input_shape, train_set.num_classes,
                            hidden=tuple(args.hidden))
    (train_adversarial if adversarial else train)(model, train_set, cfg)
    save_model(model, os.path.join(args.out, "model.json"))
    with open(os.path.join(args.out, "history.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "loss", "accuracy"])
        writer.writeheader()
        writer.writerows(model.history_)
    results = {"test_accuracy": accuracy(model, test_set)}
    if adversarial:
        subset = test_set.subset(range(min(args.adversarial_eval, len(test_set))))
        results["adversarial_accuracy"] = adversarial_accuracy(model, subset, adversarial.epsilon)
    _manifest(args, argv, ["model.json", "history.csv"], **results)
    print(json.dumps(results))


def cmd_ceval(args, argv):
    model = _load_model(args.model)
    x, ident = _load_image(args, model)
    spec, = _explainers([args.explainer])[:1]
    cfg = _attack_config(args, model)
    k = args.k if args.k is not None else budget(x.size, args.k_fraction)
    if not 0 <= k <= x.size:
        raise UsageError(f"--k must lie in [0, {x.size}]")
    explanation = spec.explanation(model, x, k, seed=args.seed)
    result = compute_normalized(model, x, explanation, cfg)
    doc = result.to_dict(include_delta=args.save_delta)
    doc.update({"input": ident, "explainer": spec.name, "k_requested": k})
    name = f"ceval-{_safe(spec.name)}"
    _write_json(os.path.join(args.out, name + ".json"), doc)
    write_explanation_json(explanation, os.path.join(args.out, name + "-explanation.json"))
    _manifest(args, argv, [name + ".json", name + "-explanation.json"], c=json_float(result.c_value))
    print(json.dumps({"c": doc["c"], "normalized": doc["normalized"]}))


def _plot_one(task):
    model, x, spec, k_list, cfg, seed, ident = task
    imp = spec.importance(model, x, seed=seed)
    return ceval_plot(model, x, imp, k_list, cfg, input_id=ident)


def cmd_plot(args, argv):
    model = _load_model(args.model)
    x, ident = _load_image(args, model)
    specs = _explainers(args.explainer)
    cfg = _attack_config(args, model)
    k_list = args.k_list
    if any(b <= a for a, b in zip(k_list, k_list[1:])) or k_list[0] < 0 or k_list[-1] > x.size:
        raise UsageError(f"--k-list must be strictly increasing within [0, {x.size}]")
    plots = parallel_map(_plot_one, [(model, x, s, k_list, cfg, args.seed, ident) for s in specs],
                         args.workers)
    outputs, series = [], {}
    for spec, plot in zip(specs, plots):
        name = f"plot-{_safe(spec.name)}.csv"
        write_plot_csv(plot, os.path.join(args.out, name))
        outputs.append(name)
        series[spec.name] = plot.points
    _write_text(os.path.join(args.out, "plot.svg"),
                line_chart(series, title=f"c-Eval plot ({ident}, {cfg.backend})"))
    _manifest(args, argv, outputs + ["plot.svg"],
              gaps={s.name: p.gaps for s, p in zip(specs, plots)},
              violations={s.name: p.violations for s, p in zip(specs, plots)})


def cmd_rank(args, argv):
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    model = _load_model(args.model)
    data = _load_dataset(args, "test")
    if args.count > len(data):
        raise UsageError(f"--count {args.count} exceeds the {len(data)} test images")
    specs = _explainers(args.explainer)
    cfg = _attack_config(args, model)
    subset = sample(data, args.count, args.seed)
    rows = rank_explainers(model, subset.images, specs, args.k_fraction, cfg, seed=args.seed,
                           workers=args.workers)
    write_ranking_csv(rows, os.path.join(args.out, "ranking.csv"))
    _write_text(os.path.join(args.out, "ranking.svg"),
                box_plot({r.explainer: r.values for r in rows},
                         title=f"normalized c-Eval over {args.count} images ({cfg.backend})"))
    _manifest(args, argv, ["ranking.csv", "ranking.svg"])
    for r in rows:
        print(json.dumps({k: json_float(v) if isinstance(v, float) else v
                          for k, v in r.summary().items()}))


def cmd_affine_check(args, argv):
    model = _load_model(args.model)
    x, ident = _load_image(args, model)
    cfg = _attack_config(args, model)
    if args.importance:
        if not os.path.exists(args.importance):
            raise UsageError(f"importance file not found: {args.importance}")
        imp = read_importance_csv(args.importance, x.shape)
    else:
        imp = _explainers([args.explainer])[0].importance(model, x, seed=args.seed)
    report = near_affine_check(model, x, imp, args.k_list, cfg)
    fields = ["k", "c1", "c2", "c0", "c_est", "deviation", "note"]
    with open(os.path.join(args.out, "near_affine.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for row in report.rows:
            writer.writerow(["" if getattr(row, f) is None else
                             (json_float(getattr(row, f)) if f not in ("k", "note")
                              else getattr(row, f)) for f in fields])
    usable = [r for r in report.rows if r.c_est is not None]
    series = {name: [(r.k, getattr(r, attr)) for r in usable]
              for name, attr in (("c1", "c1"), ("c2", "c2"), ("c_est", "c_est"), ("c0", "c0"))}
    _write_text(os.path.join(args.out, "near_affine.svg"),
                line_chart(series, title=f"near-affine check ({ident})"))
    _manifest(args, argv, ["near_affine.csv", "near_affine.svg"],
              max_deviation=json_float(report.max_deviation))
    print(json.dumps({"max_deviation": json_float(report.max_deviation)}))


def _correlate_one(task):
    model_a, model_b, x, spec, k, cfg, seed = task
    out = []
    for model in (model_a, model_b):
        expl = spec.explanation(model, x, k, seed=seed)
        (c, _), = c_values(model, x, [Mask.from_explanation(expl, x.size)], cfg)
        out.append(c)
    return out


def cmd_correlate(args, argv):
    if args.count < 2:
        raise UsageError("--count must be >= 2")
    model_a, model_b = _load_model(args.model_a), _load_model(args.model_b)
    if model_a._shape() != model_b._shape():
        raise UsageError(f"input shapes differ: {model_a._shape()} vs {model_b._shape()}")
    spec = _explainers([args.explainer])[0]
    cfg = _attack_config(args, model_a)
    _attack_config(args, model_b)
    data = _load_dataset(args, "test")
    if args.count > len(data):
        raise UsageError(f"--count {args.count} exceeds the {len(data)} test images")
    subset = sample(data, args.count, args.seed)
    k = budget(model_a.n_features, args.k_fraction)
    tasks = [(model_a, model_b, x.reshape(model_a._shape()), spec, k, cfg, args.seed + i)
             for i, x in enumerate(subset.images)]
    pairs = parallel_map(_correlate_one, tasks, args.workers)
    with open(os.path.join(args.out, "scatter.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item", "c_a", "c_b"])
        for i, (a, b) in enumerate(pairs):
            writer.writerow([i, "" if a is None else json_float(a), "" if b is None else json_float(b)])
    kept = [(a, b) for a, b in pairs
            if a is not None and b is not None and math.isfinite(a) and math.isfinite(b)]
    r = pearson([a for a, _ in kept], [b for _, b in kept]) if len(kept) >= 2 else math.nan
    _write_text(os.path.join(args.out, "scatter.svg"),
                scatter_plot([a for a, _ in kept], [b for _, b in kept],
                             title=f"c-Eval, r = {r:.3f}", xlabel="model A", ylabel="model B"))
    _write_json(os.path.join(args.out, "correlation.json"),
                {"pearson_r": json_float(r), "n": len(kept), "skipped": len(pairs) - len(kept)})
    _manifest(args, argv, ["scatter.csv", "scatter.svg", "correlation.json"], pearson_r=json_float(r))
    print(json.dumps({"pearson_r": json_float(r), "n": len(kept)}))


COMMANDS = {
    "train": cmd_train,
    "ceval": cmd_ceval,
    "plot": cmd_plot,
    "rank": cmd_rank,
    "affine-check": cmd_affine_check,
    "correlate": cmd_correlate,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        os.makedirs(args.out, exist_ok=True)
        COMMANDS[args.command](args, argv)
    except UsageError as exc:
        print(f"ceval: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MetricUnavailable, ValueError, OSError) as exc:
        print(f"ceval: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
