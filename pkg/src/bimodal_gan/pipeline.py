"""End-to-end steps shared by the command line and the acceptance suite.

Directory layout under ``paths.data_dir``::

    train/       positives (label 1) used to fit the synthesizers
    negatives/   real label-0 pairs for the classifier protocol
    test/        balanced held-out pairs

and under ``paths.out_dir``::

    complexity/  baseline checkpoint, per-modality scores, order.json
    train/<strategy>/, synth/<name>/, eval/<name>/, classifier/<name>/, report/
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch

from .classifier import PairClassifier, pair_inputs, run_protocol, train_label_model
from .config import RunConfig
from .dataset import (PairedDataset, ToyParams, generate_toy_bimodal, load_paired_dataset, write_dataset)
from .features import ComplexityScore, decide_order, random_conv_extractor, synthesis_complexity
from .metrics import MetricReport, evaluate_pairs
from .trainer import Trainer, generate_arrays, latest_checkpoint, load_generator, synthesize, train

log = logging.getLogger(__name__)

SPLITS = ("train", "negatives", "test")


# ---------------------------------------------------------------------------
# data


def toy_splits(rc: RunConfig) -> dict[str, PairedDataset]:
    d = rc.data
    common = dict(image_size=d.image_size, texture_frequency=d.texture_frequency, blur_sigma=d.blur_sigma,
                  modality_names=tuple(d.modality_names))
    train_set = generate_toy_bimodal(ToyParams(d.n_train, seed=rc.seed, class_balance=1.0, id_prefix="pos", **common))
    negatives = generate_toy_bimodal(ToyParams(d.n_negatives, seed=rc.seed + 1, class_balance=0.0, id_prefix="neg",
                                               **common))
    half = d.n_test // 2
    tp = generate_toy_bimodal(ToyParams(d.n_test - half, seed=rc.seed + 2, class_balance=1.0, id_prefix="tpos", **common))
    tn = generate_toy_bimodal(ToyParams(half, seed=rc.seed + 3, class_balance=0.0, id_prefix="tneg", **common))
    test = PairedDataset(tp.pairs + tn.pairs, tp.modality_names, "test")
    return {"train": train_set, "negatives": negatives, "test": test}


def write_toy_data(rc: RunConfig, root=None) -> dict[str, Path]:
    root = Path(root or rc.paths.data_dir)
    return {name: write_dataset(ds, root / name, write_labels=True) for name, ds in toy_splits(rc).items()}


def load_split(rc: RunConfig, name: str, root=None) -> PairedDataset:
    root = Path(root or rc.paths.data_dir)
    return load_paired_dataset(root / name, image_size=rc.data.image_size, normalization=rc.data.normalization,
                               split="test" if name == "test" else "train",
                               modality_names=tuple(rc.data.modality_names))


def load_synthetic(path, image_size: int, modality_names=None) -> PairedDataset:
    return load_paired_dataset(path, image_size=image_size, normalization="fixed_range", split="test",
                               modality_names=modality_names)


# ---------------------------------------------------------------------------
# complexity / order


def measure_complexity(rc: RunConfig, real: PairedDataset, out_dir=None):
    """Train the parallel baseline, score each modality; returns (scores, order)."""
    cfg = rc.train_config(strategy="unsupervised", total_iterations=rc.complexity.iterations)
    ckpt_dir = None if out_dir is None else Path(out_dir) / "baseline"
    trainer = Trainer(cfg, None, real, "parallel", ckpt_dir)
    ck = latest_checkpoint(ckpt_dir) if ckpt_dir is not None and ckpt_dir.exists() else None
    if ck is not None:
        trainer.resume(ck)
    trainer.run()
    n = rc.complexity.n_generated
    g1, g2 = generate_arrays(trainer.G, n, rc.seed + 101, cfg.latent_dim)
    ra, rb = real.arrays()
    ext = random_conv_extractor(1, rc.complexity.extractor_seed)
    ma, mb = real.modality_names
    scores = {ma: synthesis_complexity(ext, g1, ra, ma), mb: synthesis_complexity(ext, g2, rb, mb)}
    order = decide_order(scores[ma], scores[mb])
    if out_dir is not None:
        out_dir = Path(out_dir)
        for m, s in scores.items():
            (out_dir / f"{m}.json").write_text(s.to_json())
            (out_dir / f"{m}.txt").write_text(s.to_text())
        (out_dir / "order.json").write_text(json.dumps({"order": list(order)}) + "\n")
    return scores, order


def read_order(out_dir) -> tuple[str, str] | None:
    path = Path(out_dir) / "complexity" / "order.json"
    if not path.is_file():
        return None
    return tuple(json.loads(path.read_text())["order"])


def read_complexity(out_dir, modality: str) -> ComplexityScore:
    return ComplexityScore.from_json((Path(out_dir) / "complexity" / f"{modality}.json").read_text())


# ---------------------------------------------------------------------------
# training / synthesis


def train_strategy(rc: RunConfig, paired: PairedDataset, order, out_dir=None, strategy=None) -> Trainer:
    """Train (or resume) one arm. Existing complete runs are returned as-is."""
    cfg = rc.train_config(**({"strategy": strategy} if strategy else {}))
    resume = latest_checkpoint(out_dir) if out_dir is not None and Path(out_dir).exists() else None
    return train(cfg, paired, out_dir=out_dir, resume=resume, order=order)


def synthesize_pairs(model, rc: RunConfig, order, n=None, seed=None) -> PairedDataset:
    """Sample pairs and return them in the dataset's modality orientation."""
    n = rc.evaluate.n_synthetic if n is None else n
    seed = rc.evaluate.synth_seed if seed is None else seed
    syn = synthesize(model, n, seed, tuple(order))
    names = tuple(rc.data.modality_names)
    return syn if syn.modality_names == names else syn.swapped()


def synthesize_checkpoint(path, rc: RunConfig, n=None, seed=None, out=None) -> PairedDataset:
    model, ck = load_generator(path)
    order = ck["extra"]["config"].get("order")
    if order == "auto" or order is None:
        order = tuple(rc.data.modality_names)
    syn = synthesize_pairs(model, rc, tuple(order), n, seed)
    if out is not None:
        out = Path(out)
        write_dataset(syn, out, write_labels=False)
        meta = {"checkpoint": str(path), "descriptor": ck["descriptor"], "iteration": ck["iteration"],
                "n": len(syn), "seed": rc.evaluate.synth_seed if seed is None else seed, "order": list(order)}
        (out / "synthesis.json").write_text(json.dumps(meta, indent=2) + "\n")
    return syn


# ---------------------------------------------------------------------------
# evaluation


def label_models(rc: RunConfig, positives: PairedDataset, negatives: PairedDataset, cache_dir=None) -> dict:
    """One frozen single-channel classifier per modality (the IS label model)."""
    cfg = rc.classifier_config()
    pa, pb = positives.arrays()
    na, nb = negatives.arrays()
    y = np.concatenate([np.ones(len(pa)), np.zeros(len(na))])
    models = {}
    for name, pos, neg in ((positives.modality_names[0], pa, na), (positives.modality_names[1], pb, nb)):
        path = None if cache_dir is None else Path(cache_dir) / f"{name}.pt"
        if path is not None and path.is_file():
            m = PairClassifier(1, cfg.channels)
            m.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
            m.eval()
        else:
            m = train_label_model(cfg, np.concatenate([pos, neg]), y)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                torch.save(m.state_dict(), path)
        models[name] = m.label_distribution
    return models


def evaluate(rc: RunConfig, syn: PairedDataset, real: PairedDataset, label="synthetic", models=None) -> MetricReport:
    ext1 = random_conv_extractor(1, rc.evaluate.extractor_seed)
    ext2 = random_conv_extractor(2, rc.evaluate.extractor_seed)
    return evaluate_pairs(syn, real, ext1, ext2, models, rc.evaluate.bins, rc.evaluate.groups, label)


# ---------------------------------------------------------------------------
# classifier protocol


def classifier_protocol(rc: RunConfig, positives, negatives: PairedDataset, test: PairedDataset, name: str,
                        log_dir=None):
    """Train ``runs`` classifiers on positives + real negatives; accuracy on the real test set."""
    k = rc.classifier.n_synthetic_positives
    pos = pair_inputs(positives)[:k]
    if log_dir is not None:
        Path(log_dir).mkdir(parents=True, exist_ok=True)
    return run_protocol(rc.classifier_config(), pos, negatives, test, test.labels, name, log_dir)

