"""Synthetic grating datasets, a parametric corruption suite and test-stream protocols."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

CORRUPTIONS = ("gaussian_noise", "impulse_noise", "box_blur", "contrast", "brightness", "pixelate")
PROTOCOLS = ("normal", "imbalanced", "bs1")

# Severity tables, index = severity 0..5. Frozen after tuning on the toy source model.
GAUSSIAN_STD = (0.0, 0.04, 0.08, 0.12, 0.18, 0.26)
IMPULSE_PROB = (0.0, 0.02, 0.05, 0.08, 0.11, 0.15)
BLUR_WIDTH = (1.0, 1.5, 2.0, 2.5, 3.0, 3.25)
CONTRAST_FACTOR = (1.0, 0.8, 0.7, 0.6, 0.5, 0.4)
BRIGHTNESS_OFFSET = (0.0, 0.1, 0.15, 0.2, 0.3, 0.35)
PIXELATE_FACTOR = (1.0, 1.07, 1.15, 1.23, 1.25, 1.34)  # 16px -> 15, 14, 13, 13, 12 cells


@dataclass
class SyntheticDataset:
    images: np.ndarray  # [m, H, W, 1] float32 in [0, 1]
    labels: np.ndarray  # [m] int64
    num_classes: int
    split: str

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "gaussian_noise"
    severity: int = 5

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption kind {self.kind!r}; expected one of {CORRUPTIONS}")
        if not isinstance(self.severity, (int, np.integer)) or not 0 <= self.severity <= 5:
            raise ValueError(f"corruption severity must be an integer in 0..5, got {self.severity!r}")


@dataclass(frozen=True)
class StreamProtocol:
    kind: str = "normal"
    batch_size: int = 64
    concentration: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in PROTOCOLS:
            raise ValueError(f"unknown stream protocol {self.kind!r}; expected one of {PROTOCOLS}")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.kind == "imbalanced" and not self.concentration > 0:
            raise ValueError("imbalance concentration must be > 0")

    @property
    def effective_batch_size(self) -> int:
        return 1 if self.kind == "bs1" else self.batch_size


@dataclass
class StreamBatch:
    index: int
    images: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    corruption: str
    severity: int


# ------------------------------------------------------------------ datasets

def _class_pattern(c: int, num_classes: int) -> tuple[float, float]:
    """Base (angle, spatial frequency in cycles/image) of class ``c``."""
    orientations = math.ceil(num_classes / 2)
    angle = math.pi * (c % orientations) / orientations
    freq = 2.0 if c < orientations else 4.0
    return angle, freq


def _render(rng: np.random.Generator, labels: np.ndarray, num_classes: int, size: int) -> np.ndarray:
    m = len(labels)
    coords = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    base = np.array([_class_pattern(int(c), num_classes) for c in labels])
    angle = base[:, 0] + rng.normal(0.0, 0.06, m)
    freq = base[:, 1] * rng.uniform(0.9, 1.1, m)
    phase = rng.uniform(0.0, 2 * math.pi, m)
    amp = rng.uniform(0.3, 0.45, m)
    mean = rng.uniform(0.4, 0.6, m)
    proj = (np.cos(angle)[:, None, None] * xx + np.sin(angle)[:, None, None] * yy)
    img = mean[:, None, None] + amp[:, None, None] * np.cos(
        2 * math.pi * freq[:, None, None] * proj + phase[:, None, None])
    img = img + rng.normal(0.0, 0.02, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)[..., None]


def gen_synthetic_dataset(num_classes: int, per_class: int, image_size: int, seed: int,
                          test_per_class: int | None = None) -> tuple[SyntheticDataset, SyntheticDataset]:
    """Oriented gratings, one (angle, frequency) pattern per class.

    Per-sample jitter covers angle, frequency, phase, amplitude and mean level.
    Train and test come from independent child generators of ``seed``.
    """
    if num_classes < 2:
        raise ValueError("need at least two classes")
    test_per_class = per_class if test_per_class is None else test_per_class
    train_rng, test_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    out = []
    for split, rng, k in (("train", train_rng, per_class), ("test", test_rng, test_per_class)):
        labels = np.repeat(np.arange(num_classes), k)
        labels = labels[rng.permutation(len(labels))]
        out.append(SyntheticDataset(_render(rng, labels, num_classes, image_size), labels.astype(np.int64),
                                    num_classes, split))
    return out[0], out[1]


# ---------------------------------------------------------------- corruption

def box_kernel(width: float) -> np.ndarray:
    """Centred 1-D box of (possibly fractional) width; edge taps get partial weight."""
    r = int(math.ceil((width - 1) / 2))
    t = np.abs(np.arange(-r, r + 1))
    k = np.clip(width / 2 + 0.5 - t, 0.0, 1.0)
    return k / k.sum()


def _box_blur(img: np.ndarray, width: float) -> np.ndarray:
    if width <= 1:
        return img
    k = box_kernel(width)
    r = len(k) // 2
    h, w = img.shape[:2]
    padded = np.pad(img, ((r, r), (r, r), (0, 0)), mode="edge")
    rows = sum(k[i] * padded[i:i + h] for i in range(len(k)))
    return sum(k[i] * rows[:, i:i + w] for i in range(len(k)))


def _area_matrix(n: int, m: int) -> np.ndarray:
    """[m, n] row-stochastic matrix averaging n cells into m equal bins (fractional overlap)."""
    edges = np.linspace(0.0, n, m + 1)
    lo = np.maximum(edges[:-1, None], np.arange(n)[None, :])
    hi = np.minimum(edges[1:, None], np.arange(n)[None, :] + 1)
    a = np.clip(hi - lo, 0.0, None)
    return a / a.sum(axis=1, keepdims=True)


def _pixelate(img: np.ndarray, factor: float) -> np.ndarray:
    """Area-downscale by ``factor`` (to round(size / factor) cells), nearest-upscale back."""
    if factor <= 1:
        return img
    h, w = img.shape[:2]
    sh, sw = max(1, round(h / factor)), max(1, round(w / factor))
    small = np.einsum("ij,jkc,lk->ilc", _area_matrix(h, sh), img, _area_matrix(w, sw))
    rows = np.floor((np.arange(h) + 0.5) * sh / h).astype(int)
    cols = np.floor((np.arange(w) + 0.5) * sw / w).astype(int)
    return small[rows][:, cols]


def corrupt(image: np.ndarray, spec: CorruptionSpec, seed: int | np.random.Generator = 0) -> np.ndarray:
    """Apply one corruption at one severity; output clamped to [0, 1].

    Severity tables (index 0..5):
      gaussian_noise  additive N(0, std), std = GAUSSIAN_STD
      impulse_noise   each pixel set to 0 or 1 with probability IMPULSE_PROB
      box_blur        separable box filter, edge padding, width = BLUR_WIDTH
      contrast        0.5 + factor * (x - 0.5), factor = CONTRAST_FACTOR
      brightness      x + offset, offset = BRIGHTNESS_OFFSET
      pixelate        block-average by PIXELATE_FACTOR then upsample
    Severity 0 returns the input unchanged.
    """
    if not isinstance(spec, CorruptionSpec):
        spec = CorruptionSpec(*spec)
    image = np.asarray(image)
    if spec.severity == 0:
        return image.copy()
    s = spec.severity
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = image.astype(np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[..., None]
    if spec.kind == "gaussian_noise":
        out = x + rng.normal(0.0, GAUSSIAN_STD[s], x.shape)
    elif spec.kind == "impulse_noise":
        u = rng.random(x.shape)
        p = IMPULSE_PROB[s]
        out = np.where(u < p / 2, 0.0, np.where(u < p, 1.0, x))
    elif spec.kind == "box_blur":
        out = _box_blur(x, BLUR_WIDTH[s])
    elif spec.kind == "contrast":
        out = 0.5 + CONTRAST_FACTOR[s] * (x - 0.5)
    elif spec.kind == "brightness":
        out = x + BRIGHTNESS_OFFSET[s]
    else:
        out = _pixelate(x, PIXELATE_FACTOR[s])
    out = np.clip(out, 0.0, 1.0)
    if squeeze:
        out = out[..., 0]
    return out.astype(image.dtype if image.dtype.kind == "f" else np.float32)


def corrupt_dataset(images: np.ndarray, spec: CorruptionSpec, seed: int) -> np.ndarray:
    """Corrupt every image with its own child generator so results do not depend on order."""
    seeds = np.random.SeedSequence(seed).spawn(len(images))
    return np.stack([corrupt(img, spec, np.random.default_rng(s)) for img, s in zip(images, seeds)]) \
        if len(images) else images.copy()


# ------------------------------------------------------------------- streams

def _dirichlet(rng: np.random.Generator, k: int, concentration: float) -> np.ndarray:
    g = rng.gamma(concentration, 1.0, k)
    total = g.sum()
    if not np.isfinite(total) or total <= 0:
        out = np.zeros(k)
        out[int(np.argmax(g))] = 1.0
        return out
    return g / total


def imbalanced_order(labels: np.ndarray, num_classes: int, segment: int, concentration: float,
                     rng: np.random.Generator) -> np.ndarray:
    """Sample order with Dirichlet-skewed label mix per contiguous segment.

    For each segment a Dirichlet(concentration) weight vector is drawn over the
    classes that still have samples; weights are sorted in decreasing order and
    handed to those classes in increasing class index. As concentration -> 0
    every segment draws from the lowest remaining class only, so the emitted
    labels come out sorted by class.
    """
    pools = [list(rng.permutation(np.flatnonzero(labels == c))) for c in range(num_classes)]
    order: list[int] = []
    total = len(labels)
    while len(order) < total:
        alive = [c for c in range(num_classes) if pools[c]]
        w = np.sort(_dirichlet(rng, len(alive), concentration))[::-1]
        weights = dict(zip(alive, w))
        for _ in range(min(segment, total - len(order))):
            live = [c for c in alive if pools[c]]
            p = np.array([weights[c] for c in live])
            if p.sum() <= 0:
                c = live[0]
            else:
                c = live[int(rng.choice(len(live), p=p / p.sum()))]
            order.append(int(pools[c].pop(0)))
    return np.asarray(order, dtype=np.int64)


def stream_order(labels: np.ndarray, num_classes: int, protocol: StreamProtocol) -> np.ndarray:
    rng = np.random.default_rng(protocol.seed)
    if protocol.kind == "imbalanced":
        return imbalanced_order(labels, num_classes, protocol.batch_size, protocol.concentration, rng)
    return rng.permutation(len(labels))


def make_stream(test: SyntheticDataset, spec: CorruptionSpec, protocol: StreamProtocol,
                corruption_seed: int = 0) -> list[StreamBatch]:
    """Corrupted, ordered, batched test stream; every test sample appears exactly once.

    Corruption noise is tied to the sample id, not its stream position, so the
    same image is corrupted identically under every protocol.
    """
    corrupted = corrupt_dataset(test.images, spec, corruption_seed)
    order = stream_order(test.labels, test.num_classes, protocol)
    bs = protocol.effective_batch_size
    batches = []
    for i, start in enumerate(range(0, len(order), bs)):
        ids = order[start:start + bs]
        batches.append(StreamBatch(i, corrupted[ids], test.labels[ids], ids, spec.kind, spec.severity))
    return batches


def iter_minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]
