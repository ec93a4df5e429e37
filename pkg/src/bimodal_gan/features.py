"""Feature extraction, Gaussian statistics, Frechet distance and the
hierarchical synthesis-complexity score used to pick the generation order."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

log = logging.getLogger(__name__)

RIDGE = 1e-6
NEG_CLAMP = 1e-6


class FrechetError(ArithmeticError):
    pass


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    n_samples: int

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_gaussian(features, ridge: float = RIDGE) -> GaussianStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be an n x d matrix, got shape {x.shape}")
    n, d = x.shape
    if n < 2:
        raise ValueError(f"need at least 2 samples to estimate a covariance, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (n - 1)
    cov = 0.5 * (cov + cov.T) + ridge * np.eye(d)
    return GaussianStats(mu, cov, n)


def _psd_sqrt(a):
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def matrix_sqrt_product_trace(a, b) -> float:
    """Tr((a b)^{1/2}) for symmetric PSD a, b.

    Equal to the nuclear norm of b^{1/2} a^{1/2}; singular values avoid the
    squared spectrum of a^{1/2} b a^{1/2}, which loses small eigenvalues.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"need two square matrices of equal size, got {a.shape} and {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise FrechetError("covariance contains non-finite entries")
    try:
        sv = np.linalg.svd(_psd_sqrt(b) @ _psd_sqrt(a), compute_uv=False)
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(a) * np.linalg.cond(b)
        raise FrechetError(f"decomposition failed (condition estimate {cond:.3g}): {exc}") from exc
    return float(sv.sum())


def frechet_distance(g: GaussianStats, r: GaussianStats) -> float:
    if g.dim != r.dim:
        raise ValueError(f"dimension mismatch: {g.dim} vs {r.dim}")
    diff = g.mean - r.mean
    value = float(diff @ diff) + float(np.trace(g.covariance) + np.trace(r.covariance)) \
        - 2.0 * matrix_sqrt_product_trace(g.covariance, r.covariance)
    if not np.isfinite(value):
        raise FrechetError(f"non-finite Frechet distance ({value}); check the input statistics")
    if value < 0:
        if value < -NEG_CLAMP:
            raise FrechetError(f"negative Frechet distance {value:.3g}; matrix square root is inaccurate")
        value = 0.0
    return value


# ---------------------------------------------------------------------------
# extractor


class FeatureExtractor:
    """Fixed-weight feature network with named tap points.

    ``extract`` maps a batch (N, C, H, W) or (N, H, W) to one (N, d_i) matrix
    per tap. Any callable returning such a list can stand in for the default
    random-convolution network (e.g. a pretrained model adapter).
    """

    def __init__(self, net: nn.Module, layer_ids, descriptor: str, batch_size: int = 256):
        self.net = net.eval()
        self.layer_ids = list(layer_ids)
        self.descriptor = descriptor
        self.batch_size = batch_size

    @torch.no_grad()
    def extract(self, images) -> list[np.ndarray]:
        x = _to_batch(images)
        outs = [[] for _ in self.layer_ids]
        for start in range(0, len(x), self.batch_size):
            feats = self.net(x[start:start + self.batch_size])
            for i, f in enumerate(feats):
                outs[i].append(f.flatten(1).double().numpy())
        return [np.concatenate(o) for o in outs]

    def __call__(self, images):
        return self.extract(images)


def _to_batch(images) -> torch.Tensor:
    if isinstance(images, (list, tuple)):
        images = np.stack([getattr(im, "pixels", im) for im in images])
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    return x


class RandomConvNet(nn.Module):
    """Four strided conv layers with fixed random weights; each tap is
    average-pooled to a ``pool`` x ``pool`` grid before flattening."""

    def __init__(self, in_channels=1, channels=(16, 32, 64, 64), pool=2):
        super().__init__()
        chans = [in_channels, *channels]
        self.layers = nn.ModuleList(
            nn.Sequential(nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1), nn.ReLU())
            for i in range(len(channels)))
        self.pool_size = pool
        self.pool = nn.AdaptiveAvgPool2d(pool)

    def forward(self, x):
        taps = []
        for layer in self.layers:
            x = layer(x)
            taps.append(self.pool(x) if x.shape[-1] > self.pool_size else x)
        return taps


def random_conv_extractor(in_channels: int = 1, seed: int = 1234, channels=(16, 32, 64, 64), pool: int = 2) -> FeatureExtractor:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = RandomConvNet(in_channels, channels, pool)
        for m in net.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                nn.init.normal_(m.bias, std=0.1)
    for p in net.parameters():
        p.requires_grad_(False)
    h = hashlib.sha256()
    for p in net.parameters():
        h.update(p.numpy().tobytes())
    desc = f"randconv4-in{in_channels}-c{'x'.join(map(str, channels))}-p{pool}-s{seed}-{h.hexdigest()[:12]}"
    return FeatureExtractor(net, [f"conv{i + 1}" for i in range(len(channels))], desc)


# ---------------------------------------------------------------------------
# complexity


@dataclass
class ComplexityScore:
    total: float
    per_layer: list[float]
    modality: str
    n_generated: int
    n_real: int
    layer_ids: list[str] = field(default_factory=list)
    extractor: str = ""

    def to_text(self) -> str:
        lines = [f"modality: {self.modality}", f"total: {self.total:.6f}",
                 f"extractor: {self.extractor}", f"n_generated: {self.n_generated}", f"n_real: {self.n_real}"]
        lines += [f"layer {lid}: {v:.6f}" for lid, v in zip(self.layer_ids, self.per_layer)]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> ComplexityScore:
        return cls(**json.loads(text))


def _modality_of(images, default="?"):
    mods = {getattr(im, "modality", None) for im in images} if isinstance(images, (list, tuple)) else {None}
    mods.discard(None)
    if len(mods) > 1:
        raise ValueError(f"mixed modalities in one image set: {sorted(mods)}")
    return mods.pop() if mods else default


def synthesis_complexity(extractor: FeatureExtractor, generated, real, modality: str | None = None) -> ComplexityScore:
    """Sum over every tap of the Frechet distance between Gaussian fits of
    generated and real features."""
    if len(generated) < 2 or len(real) < 2:
        raise ValueError("need at least 2 generated and 2 real images")
    mod_g, mod_r = _modality_of(generated), _modality_of(real)
    if modality is None:
        modality = mod_r if mod_r != "?" else mod_g
    if "?" not in (mod_g, mod_r) and mod_g != mod_r:
        raise ValueError(f"generated ({mod_g}) and real ({mod_r}) modalities differ")
    fg, fr = extractor.extract(generated), extractor.extract(real)
    per_layer = [frechet_distance(fit_gaussian(a), fit_gaussian(b)) for a, b in zip(fg, fr)]
    return ComplexityScore(float(sum(per_layer)), per_layer, modality, len(generated), len(real),
                           list(extractor.layer_ids), extractor.descriptor)


def decide_order(c_a: ComplexityScore, c_b: ComplexityScore) -> tuple[str, str]:
    """(easier modality, harder modality); ties go to the lexicographically first name."""
    if c_a.modality == c_b.modality:
        raise ValueError(f"both scores are for modality {c_a.modality!r}")
    if c_a.total == c_b.total:
        first, second = sorted([c_a.modality, c_b.modality])
        log.warning("equal synthesis complexity %.6g for %s and %s; ordering lexicographically",
                    c_a.total, c_a.modality, c_b.modality)
        return first, second
    lo, hi = sorted([c_a, c_b], key=lambda c: c.total)
    return lo.modality, hi.modality
