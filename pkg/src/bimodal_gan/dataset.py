"""Paired bi-modality image datasets: ingestion, unpaired views and a
procedural toy generator (smooth modality ``a`` / textured modality ``b``).

On-disk layout::

    <root>/manifest.csv          pair_id,path_a,path_b[,label]
    <root>/labels.csv            pair_id,label            (toy data only)
    <root>/<modality>/<pair_id>.png
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import gaussian_filter

log = logging.getLogger(__name__)

# fixed_range maps the file's full bit-depth range to [-1, 1] (used for
# synthetic sets written by this package, which are already in range)
NORMALIZATIONS = ("per_image", "per_dataset", "fixed_range")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Image:
    pixels: np.ndarray
    modality: str
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 2 or px.shape[0] != px.shape[1]:
            raise DatasetError(f"{self.source_id or 'image'}: expected a square 2-D array, got shape {px.shape}")
        px = px.copy() if px is self.pixels else px
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class ImagePair:
    first: Image
    second: Image
    pair_id: str
    label: int | None = None

    def __post_init__(self):
        if self.first.modality == self.second.modality:
            raise DatasetError(f"pair {self.pair_id}: both images are modality {self.first.modality!r}")
        if self.first.pixels.shape != self.second.pixels.shape:
            raise DatasetError(f"pair {self.pair_id}: shapes differ {self.first.pixels.shape} vs {self.second.pixels.shape}")


@dataclass(frozen=True)
class PairedDataset:
    pairs: tuple[ImagePair, ...]
    modality_names: tuple[str, str] = ("a", "b")
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        object.__setattr__(self, "modality_names", tuple(self.modality_names))
        if self.split not in ("train", "test"):
            raise DatasetError(f"split must be 'train' or 'test', got {self.split!r}")
        seen = set()
        for p in self.pairs:
            if p.pair_id in seen:
                raise DatasetError(f"duplicate pair_id {p.pair_id!r}")
            seen.add(p.pair_id)
            if (p.first.modality, p.second.modality) != self.modality_names:
                raise DatasetError(f"pair {p.pair_id}: modalities {(p.first.modality, p.second.modality)} "
                                   f"do not match dataset {self.modality_names}")

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return PairedDataset(self.pairs[idx], self.modality_names, self.split)
        return self.pairs[idx]

    @property
    def image_size(self) -> int:
        return self.pairs[0].first.size

    @property
    def pair_ids(self) -> list[str]:
        return [p.pair_id for p in self.pairs]

    @property
    def labels(self) -> np.ndarray:
        return np.array([-1 if p.label is None else p.label for p in self.pairs])

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """(N, H, W) float32 stacks of the first and second modality."""
        a = np.stack([p.first.pixels for p in self.pairs]).astype(np.float32)
        b = np.stack([p.second.pixels for p in self.pairs]).astype(np.float32)
        return a, b

    def swapped(self) -> PairedDataset:
        """Same pairs with the modality roles exchanged (for the reverse synthesis order)."""
        pairs = [ImagePair(p.second, p.first, p.pair_id, p.label) for p in self.pairs]
        return PairedDataset(pairs, self.modality_names[::-1], self.split)

    def select(self, indices) -> PairedDataset:
        return PairedDataset([self.pairs[i] for i in indices], self.modality_names, self.split)

    def with_label(self, label: int) -> PairedDataset:
        return self.select([i for i, p in enumerate(self.pairs) if p.label == label])


def dataset_from_arrays(a, b, modality_names=("a", "b"), labels=None, prefix="syn", split="test") -> PairedDataset:
    """Wrap (N, H, W) arrays already in [-1, 1] as a dataset (no renormalisation)."""
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim == 4:
        a, b = a[:, 0], b[:, 0]
    ma, mb = modality_names
    pairs = []
    for i in range(len(a)):
        pid = f"{prefix}{i:05d}"
        lab = None if labels is None else int(labels[i])
        pairs.append(ImagePair(Image(a[i], ma, pid), Image(b[i], mb, pid), pid, lab))
    return PairedDataset(pairs, modality_names, split)


# ---------------------------------------------------------------------------
# normalisation / IO


def normalize_intensity(raw, modality: str, source_id: str = "", lo=None, hi=None) -> Image:
    """Min-max map to [-1, 1]. ``lo``/``hi`` override the per-image range
    (dataset-wide normalisation). A constant image maps to all zeros."""
    x = np.asarray(raw, dtype=np.float64)
    if x.size == 0:
        raise DatasetError(f"{source_id or 'image'}: empty array")
    if not np.all(np.isfinite(x)):
        bad = int(np.count_nonzero(~np.isfinite(x)))
        raise DatasetError(f"{source_id or 'image'}: {bad} non-finite pixel value(s)")
    lo = x.min() if lo is None else lo
    hi = x.max() if hi is None else hi
    if hi > lo:
        y = 2.0 * (x - lo) / (hi - lo) - 1.0
        y = np.clip(y, -1.0, 1.0)
    else:
        y = np.zeros_like(x)
    return Image(y.astype(np.float32), modality, source_id)


def read_image(path, image_size: int | None = None, with_range: bool = False):
    """Decode a grayscale image to float64, optionally resized (bilinear, antialiased).

    With ``with_range`` also return the full-scale value of the file's bit depth.
    """
    with PILImage.open(path) as im:
        im.load()
        if im.mode not in ("L", "I;16", "I;16B", "I", "F"):
            im = im.convert("L")
        full_scale = 255.0 if im.mode == "L" else 65535.0
        arr = np.asarray(im, dtype=np.float64)
        if image_size is not None and arr.shape != (image_size, image_size):
            # PIL scales the filter support when reducing, which antialiases
            resized = PILImage.fromarray(arr.astype(np.float32), mode="F").resize(
                (image_size, image_size), PILImage.BILINEAR)
            arr = np.asarray(resized, dtype=np.float64)
    return (arr, full_scale) if with_range else arr


def write_png16(path, pixels):
    q = np.round((np.clip(pixels, -1, 1) + 1.0) / 2.0 * 65535).astype(np.uint16)
    PILImage.fromarray(q).save(path)


def load_paired_dataset(root, manifest=None, image_size: int = 64, normalization: str = "per_image",
                        split: str = "train", modality_names=None) -> PairedDataset:
    root = Path(root)
    manifest = Path(manifest) if manifest is not None else root / "manifest.csv"
    if normalization not in NORMALIZATIONS:
        raise DatasetError(f"normalization must be one of {NORMALIZATIONS}")
    if not manifest.is_file():
        raise DatasetError(f"manifest not found: {manifest}")
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and not {"pair_id", "path_a", "path_b"} <= set(rows[0]):
        raise DatasetError(f"{manifest}: header must contain pair_id,path_a,path_b")
    if modality_names is None:
        modality_names = _modalities_from_paths(rows) if rows else ("a", "b")

    raws, seen = [], set()
    for lineno, row in enumerate(rows, start=2):
        pid = row["pair_id"]
        where = f"{manifest}:{lineno} (pair_id={pid!r})"
        if pid in seen:
            raise DatasetError(f"{where}: duplicate pair_id")
        seen.add(pid)
        imgs = []
        for key in ("path_a", "path_b"):
            path = root / row[key]
            if not path.is_file():
                raise DatasetError(f"{where}: missing file {path}")
            try:
                imgs.append(read_image(path, image_size, with_range=True))
            except (OSError, ValueError) as exc:
                raise DatasetError(f"{where}: unreadable image {path}: {exc}") from exc
        label = row.get("label")
        label = int(label) if label not in (None, "") else None
        raws.append((pid, imgs[0], imgs[1], label))

    ranges = [(None, None), (None, None)]
    if normalization == "per_dataset" and raws:
        ranges = [(min(r[k][0].min() for r in raws), max(r[k][0].max() for r in raws)) for k in (1, 2)]
    ma, mb = modality_names
    pairs = []
    for pid, (ra, fa), (rb, fb), label in raws:
        if normalization == "fixed_range":
            ranges = [(0.0, fa), (0.0, fb)]
        ia = normalize_intensity(ra, ma, f"{pid}/{ma}", *ranges[0])
        ib = normalize_intensity(rb, mb, f"{pid}/{mb}", *ranges[1])
        pairs.append(ImagePair(ia, ib, pid, label))
    return PairedDataset(pairs, tuple(modality_names), split)


def _modalities_from_paths(rows):
    first = rows[0]
    names = tuple(Path(first[k]).parent.name or k[-1] for k in ("path_a", "path_b"))
    return names if names[0] != names[1] else ("a", "b")


def write_dataset(dataset: PairedDataset, root, write_labels: bool = False):
    """Write PNG16 images plus manifest.csv (and labels.csv) under ``root``."""
    root = Path(root)
    ma, mb = dataset.modality_names
    for m in (ma, mb):
        (root / m).mkdir(parents=True, exist_ok=True)
    has_labels = any(p.label is not None for p in dataset.pairs)
    with open(root / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pair_id", "path_a", "path_b"] + (["label"] if has_labels else []))
        for p in dataset.pairs:
            pa, pb = f"{ma}/{p.pair_id}.png", f"{mb}/{p.pair_id}.png"
            write_png16(root / pa, p.first.pixels)
            write_png16(root / pb, p.second.pixels)
            w.writerow([p.pair_id, pa, pb] + ([("" if p.label is None else p.label)] if has_labels else []))
    if write_labels:
        with open(root / "labels.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pair_id", "label"])
            for p in dataset.pairs:
                w.writerow([p.pair_id, "" if p.label is None else p.label])
    return root


# ---------------------------------------------------------------------------
# unpaired view


def derangement(n: int, seed: int) -> np.ndarray:
    """Uniform random permutation of range(n) without fixed points (rejection sampling)."""
    if n < 2:
        raise DatasetError("a derangement needs at least 2 elements")
    rng = np.random.default_rng(seed)
    idx = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == idx):
            return perm


def make_unpaired_view(dataset: PairedDataset, seed: int) -> PairedDataset:
    """Re-pair every first image with a different pair's second image."""
    if len(dataset) < 2:
        raise DatasetError(f"need >= 2 pairs to unpair, got {len(dataset)}")
    perm = derangement(len(dataset), seed)
    pairs = []
    for i, j in enumerate(perm):
        src, partner = dataset.pairs[i], dataset.pairs[j]
        pairs.append(ImagePair(src.first, partner.second, f"{src.pair_id}~{partner.pair_id}"))
    return PairedDataset(pairs, dataset.modality_names, dataset.split)


# ---------------------------------------------------------------------------
# toy generator


@dataclass(frozen=True)
class ToyParams:
    n_pairs: int = 500
    image_size: int = 64
    texture_frequency: float = 6.0  # stripe cycles per image width
    blur_sigma: float = 2.0  # in pixels at 64px; not rescaled
    seed: int = 0
    class_balance: float = 0.5  # fraction of elongated (label 1) ellipses
    modality_names: tuple = field(default=("smooth", "textured"))
    id_prefix: str = "toy"

    def __post_init__(self):
        if self.n_pairs < 1:
            raise DatasetError("n_pairs must be >= 1")
        if self.image_size < 8:
            raise DatasetError("image_size must be >= 8")
        if not self.texture_frequency > 0:
            raise DatasetError("texture_frequency must be > 0")
        if self.blur_sigma < 0:
            raise DatasetError("blur_sigma must be >= 0")
        if not 0 <= self.class_balance <= 1:
            raise DatasetError("class_balance must lie in [0, 1]")


# axis-ratio ranges per class; the gap keeps the toy attribute unambiguous
RATIO_RANGES = {0: (1.0, 1.3), 1: (1.8, 2.6)}
RATIO_THRESHOLD = 1.55


def _toy_geometry(rng, n: int, label: int):
    lo, hi = RATIO_RANGES[label]
    ratio = rng.uniform(lo, hi)
    minor = rng.uniform(0.13, 0.19) * n
    major = min(ratio * minor, 0.42 * n)
    cx, cy = rng.uniform(0.35, 0.65, size=2) * n
    theta = rng.uniform(0, np.pi)
    stripe_angle = rng.uniform(0, np.pi)
    return dict(cx=cx, cy=cy, major=major, minor=minor, theta=theta, stripe_angle=stripe_angle)


def ellipse_mask(n, cx, cy, major, minor, theta, **_):
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / major
    v = (-dx * s + dy * c) / minor
    return u * u + v * v <= 1.0


def render_toy_pair(n, geom, texture_frequency, blur_sigma):
    """Raw (unnormalised, background 0) smooth and textured renderings of one ellipse."""
    mask = ellipse_mask(n, **geom)
    m = mask.astype(np.float64)
    shade = gaussian_filter(m, blur_sigma, mode="constant") if blur_sigma > 0 else m
    smooth = np.where(mask, 0.4 + 0.6 * shade, 0.0)
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    along = (xx - geom["cx"]) * np.cos(geom["stripe_angle"]) + (yy - geom["cy"]) * np.sin(geom["stripe_angle"])
    stripes = 0.3 * np.sin(2 * np.pi * texture_frequency * along / n)
    textured = np.where(mask, 0.7 + stripes, 0.0)
    return smooth, textured, mask


def generate_toy_bimodal(params: ToyParams) -> PairedDataset:
    """Procedural pairs sharing one random ellipse.

    Modality ``a`` carries a Gaussian-shaded interior (low detail), modality
    ``b`` sinusoidal stripes inside the same sharp-edged region. Label 1 marks
    elongated ellipses (axis ratio above ``RATIO_THRESHOLD``).
    """
    rng = np.random.default_rng(params.seed)
    n = params.image_size
    ma, mb = params.modality_names
    pairs = []
    for i in range(params.n_pairs):
        label = int(rng.random() < params.class_balance)
        geom = _toy_geometry(rng, n, label)
        smooth, textured, _ = render_toy_pair(n, geom, params.texture_frequency, params.blur_sigma)
        pid = f"{params.id_prefix}{i:05d}"
        pairs.append(ImagePair(normalize_intensity(smooth, ma, pid), normalize_intensity(textured, mb, pid), pid, label))
    return PairedDataset(pairs, (ma, mb), "train")


def toy_mask(image: Image | np.ndarray) -> np.ndarray:
    """Foreground of a toy image: every pixel above the background floor."""
    px = image.pixels if isinstance(image, Image) else np.asarray(image)
    return px > px.min()


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
