"""``bimodal-gan`` command line.

Exit codes: 0 success, 2 config/schema, 3 missing or corrupt input,
4 numerical failure, 5 checkpoint descriptor mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, RunConfig, load_config
from .dataset import DatasetError, load_paired_dataset
from .features import FrechetError
from .metrics import MetricReport
from .networks import CorruptCheckpoint, DescriptorMismatch
from .trainer import STRATEGIES, NumericalError, latest_checkpoint

log = logging.getLogger("bimodal_gan")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_NUMERICAL, EXIT_DESCRIPTOR = 0, 2, 3, 4, 5


class InputError(Exception):
    pass


def _out(rc: RunConfig, *parts) -> Path:
    return Path(rc.paths.out_dir).joinpath(*parts)


def _prepare(rc: RunConfig, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rc.dump(directory / "resolved_config.yaml")
    return directory


def _require_dir(path, what):
    if not Path(path, "manifest.csv").is_file():
        raise InputError(f"{what} not found at {path} (missing manifest.csv)")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_toy_data(rc: RunConfig, args):
    root = _prepare(rc, args.out or rc.paths.data_dir)
    written = pipeline.write_toy_data(rc, root)
    for name, path in written.items():
        print(f"{name}: {path}")


def _complexity(rc: RunConfig):
    data = Path(rc.paths.data_dir) / "train"
    _require_dir(data, "training data")
    real = pipeline.load_split(rc, "train")
    out = _prepare(rc, _out(rc, "complexity"))
    return pipeline.measure_complexity(rc, real, out)


def cmd_measure_complexity(rc: RunConfig, args):
    scores, order = _complexity(rc)
    for s in scores.values():
        print(f"{s.modality}: complexity {s.total:.4f}")
    print(f"order: {order[0]} → {order[1]}")


def _resolve_order(rc: RunConfig):
    if rc.train.order != "auto":
        return tuple(rc.train.order)
    order = pipeline.read_order(rc.paths.out_dir)
    if order is None:
        log.info("no stored synthesis order; measuring complexity first")
        _, order = _complexity(rc)
    return order


def cmd_train(rc: RunConfig, args):
    strategy = args.strategy or rc.train.strategy
    _require_dir(Path(rc.paths.data_dir) / "train", "training data")
    paired = pipeline.load_split(rc, "train")
    order = _resolve_order(rc)
    out = _prepare(rc, _out(rc, "train", strategy))
    trainer = pipeline.train_strategy(rc, paired, order, out, strategy)
    print(f"{strategy}: {trainer.iteration} iterations, order {order[0]} → {order[1]}, checkpoints in {out}")


def _checkpoint_for(rc: RunConfig, args) -> Path:
    if args.checkpoint:
        path = Path(args.checkpoint)
    else:
        d = _out(rc, "train", args.strategy or rc.train.strategy)
        path = latest_checkpoint(d) if d.exists() else None
        if path is None:
            raise InputError(f"no checkpoint in {d}")
    if not path.is_file():
        raise InputError(f"checkpoint not found: {path}")
    return path


def cmd_synthesize(rc: RunConfig, args):
    ckpt = _checkpoint_for(rc, args)
    name = args.name or args.strategy or rc.train.strategy
    out = _prepare(rc, args.out or _out(rc, "synth", name))
    syn = pipeline.synthesize_checkpoint(ckpt, rc, args.n, args.seed, out)
    print(f"wrote {len(syn)} pairs to {out}")


def cmd_evaluate(rc: RunConfig, args):
    syn_dir = Path(args.syn or _out(rc, "synth", args.name))
    real_dir = Path(args.real or Path(rc.paths.data_dir) / "train")
    _require_dir(syn_dir, "synthetic set")
    _require_dir(real_dir, "real set")
    names = tuple(rc.data.modality_names)
    syn = pipeline.load_synthetic(syn_dir, rc.data.image_size, names)
    real = load_paired_dataset(real_dir, image_size=rc.data.image_size,
                               normalization=rc.data.normalization, modality_names=names)
    models = None
    neg_dir = Path(rc.paths.data_dir) / "negatives"
    if neg_dir.joinpath("manifest.csv").is_file():
        models = pipeline.label_models(rc, pipeline.load_split(rc, "train"), pipeline.load_split(rc, "negatives"),
                                       _out(rc, "label_models"))
    else:
        log.warning("no negatives split; IS rows omitted")
    out = _prepare(rc, _out(rc, "eval", args.name))
    rep = pipeline.evaluate(rc, syn, real, args.name, models)
    rep.to_csv(out / "metrics.csv")
    (out / "metrics.txt").write_text(rep.to_table())
    print(rep.to_table(), end="")


def cmd_train_classifier(rc: RunConfig, args):
    data = Path(rc.paths.data_dir)
    for split in ("negatives", "test"):
        _require_dir(data / split, f"{split} split")
    if args.source == "real":
        _require_dir(data / "train", "training data")
        positives = pipeline.load_split(rc, "train")
    else:
        syn_dir = _out(rc, "synth", args.source)
        _require_dir(syn_dir, "synthetic set")
        positives = pipeline.load_synthetic(syn_dir, rc.data.image_size, tuple(rc.data.modality_names))
    negatives = pipeline.load_split(rc, "negatives")
    test = pipeline.load_split(rc, "test")
    out = _prepare(rc, _out(rc, "classifier", args.source))
    score = pipeline.classifier_protocol(rc, positives, negatives, test, "accuracy", out / "logs")
    rep = MetricReport(args.source)
    rep.add(score)
    rep.to_csv(out / "accuracy.csv")
    print(f"{args.source}: {score}")


def _collect_reports(rc: RunConfig, paths) -> list[MetricReport]:
    if paths:
        reports = []
        for p in paths:
            if not Path(p).is_file():
                raise InputError(f"report not found: {p}")
            reports.append(MetricReport.from_csv(p))
        return reports
    by_label: dict[str, MetricReport] = {}
    for kind, fname in (("eval", "metrics.csv"), ("classifier", "accuracy.csv")):
        for p in sorted(_out(rc, kind).glob(f"*/{fname}")):
            rep = MetricReport.from_csv(p)
            by_label.setdefault(rep.label, MetricReport(rep.label)).scores.update(rep.scores)
    if not by_label:
        raise InputError(f"no reports under {rc.paths.out_dir}")
    return list(by_label.values())


def comparison_table(reports: list[MetricReport]) -> str:
    metrics = []
    for r in reports:
        metrics += [m for m in r.scores if m not in metrics]
    width = max([len(m) for m in metrics] + [6])
    col = max([len(r.label) for r in reports] + [19])
    lines = [f"{'metric':<{width}}  " + "  ".join(f"{r.label:>{col}}" for r in reports)]
    for m in metrics:
        cells = []
        for r in reports:
            s = r.scores.get(m)
            cells.append(f"{'-' if s is None else f'{s.mean:.4f} +/- {s.std:.4f}':>{col}}")
        lines.append(f"{m:<{width}}  " + "  ".join(cells))
    return "\n".join(lines) + "\n"


def plot_reports(reports: list[MetricReport], out_dir) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    metrics = []
    for r in reports:
        metrics += [m for m in r.scores if m not in metrics]
    written = []
    for m in metrics:
        rows = [(r.label, r.scores[m]) for r in reports if m in r.scores]
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(rows), 3.2))
        ax.bar(range(len(rows)), [s.mean for _, s in rows], yerr=[s.std for _, s in rows], capsize=4,
               color="0.6", edgecolor="k")
        ax.set_xticks(range(len(rows)), [lab for lab, _ in rows], rotation=20, ha="right")
        ax.set_title(m)
        fig.tight_layout()
        path = Path(out_dir) / f"{m}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written


def cmd_report(rc: RunConfig, args):
    reports = _collect_reports(rc, args.reports)
    out = _prepare(rc, args.out or _out(rc, "report"))
    table = comparison_table(reports)
    (out / "comparison.txt").write_text(table)
    summary = {r.label: {k: {"mean": s.mean, "std": s.std} for k, s in r.scores.items()} for r in reports}
    (out / "comparison.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    plots = plot_reports(reports, out)
    print(table, end="")
    print(f"{len(plots)} plot(s) in {out}")


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="bimodal-gan", description="Bi-modality sequential GAN pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-toy-data", parents=[common], help="write the toy train/negatives/test splits")
    s.add_argument("--out", help="dataset root (default: paths.data_dir)")
    s.set_defaults(func=cmd_gen_toy_data)

    s = sub.add_parser("measure-complexity", parents=[common], help="train the parallel baseline and pick the order")
    s.set_defaults(func=cmd_measure_complexity)

    s = sub.add_parser("train", parents=[common], help="train (or resume) the sequential generator")
    s.add_argument("--strategy", choices=STRATEGIES)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("synthesize", parents=[common], help="sample image pairs from a checkpoint")
    s.add_argument("--checkpoint")
    s.add_argument("--strategy", choices=STRATEGIES, help="use the latest checkpoint of this arm")
    s.add_argument("--name", help="output name under out_dir/synth (default: the strategy)")
    s.add_argument("--out")
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("evaluate", parents=[common], help="IS / FID / joint-FID / MID of a synthetic set")
    s.add_argument("--name", required=True, help="report label (and default synthetic set under out_dir/synth)")
    s.add_argument("--syn")
    s.add_argument("--real")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("train-classifier", parents=[common], help="classifier protocol on synthetic or real positives")
    s.add_argument("--source", required=True, help="synthetic set name under out_dir/synth, or 'real'")
    s.set_defaults(func=cmd_train_classifier)

    s = sub.add_parser("report", parents=[common], help="comparison table and bar charts")
    s.add_argument("reports", nargs="*", help="metric CSVs (default: everything under out_dir)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        args.func(rc, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DescriptorMismatch as exc:
        print(f"descriptor mismatch: {exc}", file=sys.stderr)
        return EXIT_DESCRIPTOR
    except (NumericalError, FrechetError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, DatasetError, CorruptCheckpoint, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
