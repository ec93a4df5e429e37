"""IS, FID, joint-FID, histogram mutual information, MID and the 10-group
mean/std protocol.

Natural logarithms throughout (nats). Pair sets are accepted as a
:class:`PairedDataset`, a list of :class:`ImagePair`, or an ``(a, b)`` tuple
of (N, H, W) arrays.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import ImagePair, PairedDataset
from .features import FeatureExtractor, GaussianStats, fit_gaussian, frechet_distance

EPS = 1e-12
DEFAULT_BINS = 32
N_GROUPS = 10


@dataclass
class GroupedScore:
    metric_name: str
    mean: float
    std: float
    group_values: list[float]

    @classmethod
    def from_values(cls, name, values) -> GroupedScore:
        v = np.asarray(values, dtype=np.float64)
        return cls(name, float(v.mean()), float(v.std()), [float(x) for x in v])

    def __str__(self):
        return f"{self.metric_name}: {self.mean:.4f} +/- {self.std:.4f}"


# ---------------------------------------------------------------------------
# input helpers


def pair_arrays(pairs) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pairs, PairedDataset):
        return pairs.arrays()
    if isinstance(pairs, tuple) and len(pairs) == 2 and not isinstance(pairs[0], ImagePair):
        a, b = (np.asarray(x, dtype=np.float32) for x in pairs)
        if a.ndim == 4:
            a, b = a[:, 0], b[:, 0]
        return a, b
    pairs = list(pairs)
    return (np.stack([p.first.pixels for p in pairs]).astype(np.float32),
            np.stack([p.second.pixels for p in pairs]).astype(np.float32))


def image_array(images) -> np.ndarray:
    if isinstance(images, (list, tuple)):
        return np.stack([getattr(im, "pixels", im) for im in images]).astype(np.float32)
    x = np.asarray(images, dtype=np.float32)
    return x[:, 0] if x.ndim == 4 else x


# ---------------------------------------------------------------------------
# Inception score


def inception_score(conditionals) -> float:
    """exp(mean_i KL(p(y|x_i) || p(y))) with p(y) the mean conditional."""
    p = np.asarray(conditionals, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ValueError("conditionals must be a non-empty N x K matrix")
    if np.any(p < -1e-12) or not np.allclose(p.sum(1), 1.0, atol=1e-6):
        raise ValueError("each conditional must lie on the probability simplex")
    p = np.clip(p, 0, None)
    marginal = p.mean(0)
    kl = (p * (np.log(np.maximum(p, EPS)) - np.log(np.maximum(marginal, EPS)))).sum(1)
    return float(np.exp(kl.mean()))


# ---------------------------------------------------------------------------
# Frechet distances


def feature_stats(images, extractor: FeatureExtractor, layer: int = -1) -> GaussianStats:
    return fit_gaussian(extractor.extract(images)[layer])


def fid(syn, real, extractor: FeatureExtractor, layer: int = -1) -> float:
    """Frechet distance of one tap (default: the deepest). ``real`` may be
    precomputed :class:`GaussianStats`."""
    s = feature_stats(image_array(syn), extractor, layer)
    r = real if isinstance(real, GaussianStats) else feature_stats(image_array(real), extractor, layer)
    return frechet_distance(s, r)


def stack_pairs(pairs) -> np.ndarray:
    a, b = pair_arrays(pairs)
    return np.stack([a, b], axis=1)


def joint_fid(syn_pairs, real_pairs, extractor: FeatureExtractor, layer: int = -1) -> float:
    """FID on two-channel (first, second) stacks; sensitive to the pairing."""
    s = feature_stats(stack_pairs(syn_pairs), extractor, layer)
    r = real_pairs if isinstance(real_pairs, GaussianStats) else feature_stats(stack_pairs(real_pairs), extractor, layer)
    return frechet_distance(s, r)


# ---------------------------------------------------------------------------
# mutual information


def joint_histogram(a, b, bins: int = DEFAULT_BINS) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if bins < 2:
        raise ValueError("bins must be >= 2")
    h, _, _ = np.histogram2d(a.ravel(), b.ravel(), bins=bins, range=[[-1, 1], [-1, 1]])
    return h


def mutual_information(a, b, bins: int = DEFAULT_BINS) -> float:
    a = getattr(a, "pixels", a)
    b = getattr(b, "pixels", b)
    pxy = joint_histogram(a, b, bins)
    pxy /= pxy.sum()
    px = pxy.sum(1, keepdims=True)
    py = pxy.sum(0, keepdims=True)
    nz = pxy > 0
    mi = float(np.sum(pxy[nz] * np.log(pxy[nz] / (px @ py)[nz])))
    return max(mi, 0.0)


def binned_entropy(x, bins: int = DEFAULT_BINS) -> float:
    h, _ = np.histogram(np.asarray(getattr(x, "pixels", x)).ravel(), bins=bins, range=(-1, 1))
    p = h[h > 0] / h.sum()
    return float(-(p * np.log(p)).sum())


def mi_bias_bound(bins: int, n_pixels: int) -> float:
    """First-order plug-in bias of the histogram MI estimator for independent inputs."""
    return (bins - 1) ** 2 / (2.0 * n_pixels)


def pair_mutual_information(pairs, bins: int = DEFAULT_BINS) -> np.ndarray:
    a, b = pair_arrays(pairs)
    return np.array([mutual_information(x, y, bins) for x, y in zip(a, b)])


def mid(syn_pairs, real_pairs, bins: int = DEFAULT_BINS) -> float:
    """|mean MI(syn pairs) - mean MI(real pairs)|; ``real_pairs`` may be a precomputed mean."""
    syn_mi = pair_mutual_information(syn_pairs, bins)
    if len(syn_mi) == 0:
        raise ValueError("empty synthetic pair set")
    if isinstance(real_pairs, (float, np.floating)):
        real_mean = float(real_pairs)
    else:
        real_mi = pair_mutual_information(real_pairs, bins)
        if len(real_mi) == 0:
            raise ValueError("empty real pair set")
        real_mean = float(real_mi.mean())
    return abs(float(syn_mi.mean()) - real_mean)


# ---------------------------------------------------------------------------
# grouped protocol


def split_groups(n: int, n_groups: int = N_GROUPS) -> list[slice]:
    if n % n_groups:
        raise ValueError(f"{n} items cannot be split into {n_groups} equal groups; pad or trim to a multiple of {n_groups}")
    size = n // n_groups
    return [slice(i * size, (i + 1) * size) for i in range(n_groups)]


def _take(items, sl):
    if isinstance(items, PairedDataset):
        return items[sl]
    if isinstance(items, tuple) and len(items) == 2 and not isinstance(items[0], ImagePair):
        return items[0][sl], items[1][sl]
    return items[sl]


def _length(items) -> int:
    if isinstance(items, tuple) and len(items) == 2 and not isinstance(items[0], ImagePair):
        return len(items[0])
    return len(items)


def grouped_evaluation(items, metric, name: str = "metric", n_groups: int = N_GROUPS) -> GroupedScore:
    """Split ``items`` in order into equal groups, score each, report mean and population std."""
    groups = split_groups(_length(items), n_groups)
    return GroupedScore.from_values(name, [metric(_take(items, g)) for g in groups])


# ---------------------------------------------------------------------------
# report


@dataclass
class MetricReport:
    label: str
    scores: dict[str, GroupedScore] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)

    def add(self, score: GroupedScore):
        self.scores[score.metric_name] = score

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            n = max((len(s.group_values) for s in self.scores.values()), default=0)
            w.writerow(["metric", "mean", "std"] + [f"g{i}" for i in range(n)])
            for s in self.scores.values():
                w.writerow([s.metric_name, repr(s.mean), repr(s.std)] + [repr(v) for v in s.group_values])
        return Path(path)

    @classmethod
    def from_csv(cls, path, label: str | None = None) -> MetricReport:
        rep = cls(label or Path(path).parent.name)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                vals = [float(v) for k, v in row.items() if k.startswith("g") and v not in ("", None)]
                rep.add(GroupedScore(row["metric"], float(row["mean"]), float(row["std"]), vals))
        return rep

    def to_table(self) -> str:
        width = max([len(k) for k in self.scores] + [6])
        lines = [f"# {self.label}", f"{'metric':<{width}}  {'mean':>12}  {'std':>10}"]
        for s in self.scores.values():
            lines.append(f"{s.metric_name:<{width}}  {s.mean:>12.4f}  {s.std:>10.4f}")
        lines += [f"{k}: {v}" for k, v in self.notes.items()]
        return "\n".join(lines) + "\n"


def evaluate_pairs(syn: PairedDataset, real: PairedDataset, extractor1: FeatureExtractor, extractor2: FeatureExtractor,
                   label_models: dict | None = None, bins: int = DEFAULT_BINS, n_groups: int = N_GROUPS,
                   label: str = "synthetic") -> MetricReport:
    """Full grouped evaluation of a synthetic pair set against a real one.

    ``extractor1`` consumes single-modality images, ``extractor2`` two-channel
    stacks. ``label_models`` maps modality name -> callable returning an N x K
    probability matrix (for IS); modalities without a model get no IS row.
    """
    ma, mb = syn.modality_names
    if real.modality_names == (mb, ma):
        real = real.swapped()
    elif real.modality_names != (ma, mb):
        raise ValueError(f"modalities differ: synthetic {syn.modality_names} vs real {real.modality_names}")
    sa, sb = syn.arrays()
    ra, rb = real.arrays()
    rep = MetricReport(label)
    label_models = label_models or {}
    for name, s_img, r_img in ((ma, sa, ra), (mb, sb, rb)):
        if name in label_models:
            model = label_models[name]
            rep.add(grouped_evaluation(s_img, lambda g, m=model: inception_score(m(g)), f"IS_{name}", n_groups))
        ref = feature_stats(r_img, extractor1)
        rep.add(grouped_evaluation(s_img, lambda g, r=ref: fid(g, r, extractor1), f"FID_{name}", n_groups))
    joint_ref = feature_stats(np.stack([ra, rb], 1), extractor2)
    rep.add(grouped_evaluation((sa, sb), lambda g: joint_fid(g, joint_ref, extractor2), "joint_FID", n_groups))
    real_mi = float(pair_mutual_information((ra, rb), bins).mean())
    rep.add(grouped_evaluation((sa, sb), lambda g: mid(g, real_mi, bins), "MID", n_groups))
    rep.notes["mi_bias_bound"] = f"{mi_bias_bound(bins, sa.shape[1] * sa.shape[2]):.4g}"
    rep.notes["real_mean_MI"] = f"{real_mi:.6f}"
    rep.notes["extractor"] = extractor1.descriptor
    rep.notes["joint_extractor"] = extractor2.descriptor
    return rep


def separation(a: GroupedScore, b: GroupedScore) -> float:
    """Mean gap in units of the larger grouped std (inf when both stds vanish)."""
    s = max(a.std, b.std)
    gap = abs(b.mean - a.mean)
    return math.inf if s == 0 else gap / s
