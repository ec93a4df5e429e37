"""Downstream binary classifier on channel-concatenated pairs, used to
measure how useful synthetic positives are for training (and, single-channel,
as the frozen label model behind the inception score)."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .dataset import PairedDataset
from .metrics import GroupedScore


@dataclass
class ClassifierConfig:
    learning_rate: float = 0.01
    lr_decay_factor: float = 0.99
    lr_decay_every: int = 30
    batch_size: int = 64
    weight_decay: float = 1e-4
    momentum: float = 0.9
    iterations: int = 10000  # desk scale: 2000
    seed: int = 0
    runs: int = 5
    channels: int = 16

    def __post_init__(self):
        for name in ("learning_rate", "lr_decay_factor", "lr_decay_every", "batch_size", "iterations", "runs", "channels"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("weight_decay must be >= 0 and momentum in [0, 1)")

    def lr_at(self, step: int) -> float:
        return self.learning_rate * self.lr_decay_factor ** (step // self.lr_decay_every)


class PairClassifier(nn.Module):
    """Four conv layers, global average pool, linear logit."""

    def __init__(self, in_channels: int = 2, channels: int = 16):
        super().__init__()
        c = channels
        chans = [in_channels, c, 2 * c, 4 * c, 4 * c]
        layers = []
        for i in range(4):
            layers += [nn.Conv2d(chans[i], chans[i + 1], 3, stride=2 if i else 1, padding=1), nn.ReLU()]
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(chans[-1], 1)

    def forward(self, x):
        return self.head(self.features(x).mean((2, 3))).squeeze(1)

    @torch.no_grad()
    def predict_proba(self, x) -> np.ndarray:
        """P(label = 1) for a batch of (N, C, H, W) or single-channel (N, H, W) inputs."""
        self.eval()
        x = torch.as_tensor(np.asarray(x, dtype=np.float32))
        if x.dim() == 3:
            x = x[:, None]
        return torch.sigmoid(self(x)).numpy().astype(np.float64)

    def label_distribution(self, x) -> np.ndarray:
        """N x 2 conditional label distribution (for the inception score)."""
        p = self.predict_proba(x)
        return np.stack([1 - p, p], 1)

    def digest(self) -> str:
        h = hashlib.sha256()
        for t in self.state_dict().values():
            h.update(t.numpy().tobytes())
        return h.hexdigest()[:16]


def pair_inputs(data) -> np.ndarray:
    """(N, 2, H, W) stacks from a dataset, or pass arrays through."""
    if isinstance(data, PairedDataset):
        a, b = data.arrays()
        return np.stack([a, b], 1)
    return np.asarray(data, dtype=np.float32)


def train_classifier(config: ClassifierConfig, inputs, labels, log_path=None) -> PairClassifier:
    """SGD + momentum + weight decay with step-decayed learning rate.

    ``inputs`` is (N, C, H, W) (C=2 for concatenated pairs) or a
    :class:`PairedDataset`; ``labels`` holds 0/1.
    """
    x = torch.as_tensor(pair_inputs(inputs), dtype=torch.float32)
    if x.dim() == 3:
        x = x[:, None]
    y = torch.as_tensor(np.asarray(labels), dtype=torch.float32)
    if len(x) != len(y):
        raise ValueError(f"{len(x)} inputs but {len(y)} labels")
    if set(np.unique(y.numpy())) != {0.0, 1.0}:
        raise ValueError("training set must contain both labels 0 and 1")

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = PairClassifier(x.shape[1], config.channels)
    opt = torch.optim.SGD(model.parameters(), lr=config.learning_rate, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    loss_fn = nn.BCEWithLogitsLoss()
    rng = np.random.default_rng(config.seed)
    bs = min(config.batch_size, len(x))
    perm, pos = rng.permutation(len(x)), 0
    rows = []
    model.train()
    for step in range(config.iterations):
        if pos + bs > len(perm):
            perm, pos = rng.permutation(len(x)), 0
        idx = perm[pos:pos + bs]
        pos += bs
        lr = config.lr_at(step)
        for g in opt.param_groups:
            g["lr"] = lr
        loss = loss_fn(model(x[idx]), y[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if log_path is not None:
            rows.append((step, lr, float(loss.detach())))
    if log_path is not None:
        with open(log_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "lr", "loss"])
            w.writerows(rows)
    return model.eval()


def evaluate_accuracy(classifier, inputs, labels) -> float:
    """Fraction correct at a 0.5 threshold. ``classifier`` may be any
    callable returning P(label=1) per input."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty test set")
    predict = classifier.predict_proba if hasattr(classifier, "predict_proba") else classifier
    p = np.asarray(predict(pair_inputs(inputs)))
    return float(np.mean((p >= 0.5).astype(int) == labels))


def run_protocol(config: ClassifierConfig, positives, negatives, test_inputs, test_labels, name="accuracy",
                 log_dir=None) -> GroupedScore:
    """Train ``config.runs`` classifiers (derived seeds) on positives (label 1)
    + negatives (label 0); report mean/std test accuracy."""
    pos, neg = pair_inputs(positives), pair_inputs(negatives)
    x = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    seeds = np.random.SeedSequence(config.seed).generate_state(config.runs)
    accs = []
    for r, s in enumerate(seeds):
        cfg = ClassifierConfig(**{**config.__dict__, "seed": int(s)})
        log_path = None if log_dir is None else Path(log_dir) / f"{name}_run{r}.csv"
        model = train_classifier(cfg, x, y, log_path)
        accs.append(evaluate_accuracy(model, test_inputs, test_labels))
    return GroupedScore.from_values(name, accs)


def train_label_model(config: ClassifierConfig, images, labels) -> PairClassifier:
    """Single-channel classifier used as the frozen IS label model for one modality."""
    x = np.asarray(images, dtype=np.float32)
    return train_classifier(config, x[:, None] if x.ndim == 3 else x, labels)
