"""Procedural per-patch segmentation task, linear probe, and metrics.

Images are a class-0 background with 1..k axis-aligned colored rectangles
composited in draw order (later rectangles occlude earlier ones); the class
of a rectangle is its palette index.  The ground truth lives at patch
resolution: each patch is labeled with the class owning the most pixels in
the clean (pre-noise) composite, ties going to the lower class id.  Additive
Gaussian noise keeps the probe from reading colors bit-exactly.

The linear probe trains a bias-free d_model x Cls head with cross-entropy on
frozen per-token features; mIoU over classes present in gt or pred plus pixel
accuracy are the downstream metrics (and the search objective).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DimensionError
from .rng import Rng, mix64
from .tensor import AdamState, GradTape, Tensor, adam_step

# Stream salt separating data draws from weight-init/sampling draws.
DATA_STREAM = 0xDA7A

DEFAULT_PALETTE = (
    (0.10, 0.10, 0.10),  # background
    (0.90, 0.20, 0.20),
    (0.20, 0.80, 0.30),
    (0.25, 0.35, 0.90),
    (0.85, 0.80, 0.20),
)


@dataclass(frozen=True)
class TaskSpec:
    image_hw: tuple[int, int] = (64, 64)
    n_classes: int = 5
    shapes_range: tuple[int, int] = (1, 4)
    palette: tuple = DEFAULT_PALETTE
    patch: int = 8
    noise_std: float = 0.02
    min_side: int = 6
    channels: int = 3

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")
        if len(self.palette) != self.n_classes:
            raise ConfigError(f"palette has {len(self.palette)} colors for {self.n_classes} classes")
        if len({tuple(c) for c in self.palette}) != self.n_classes:
            raise ConfigError("palette colors must be pairwise distinct")
        lo, hi = self.shapes_range
        if not 0 <= lo <= hi:
            raise ConfigError(f"invalid shapes_range {self.shapes_range}")
        h, w = self.image_hw
        if h % self.patch or w % self.patch:
            raise ConfigError(f"patch {self.patch} does not divide image {self.image_hw}")
        if not 1 <= self.min_side <= min(h, w):
            raise ConfigError(f"min_side {self.min_side} out of range")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be >= 0, got {self.noise_std}")

    @property
    def grid(self) -> tuple[int, int]:
        return (self.image_hw[0] // self.patch, self.image_hw[1] // self.patch)


@dataclass
class LabeledSample:
    image: Tensor  # (H, W, 3) float32 in [0, 1]
    patch_labels: np.ndarray  # (H/P, W/P) int
    pixel_classes: np.ndarray  # (H, W) int, clean composite (pre-noise)


def majority_patch_labels(pixel_classes: np.ndarray, patch: int, n_classes: int) -> np.ndarray:
    """Vectorized majority vote per patch; ties resolve to the lower class id."""
    h, w = pixel_classes.shape
    blocks = pixel_classes.reshape(h // patch, patch, w // patch, patch)
    counts = np.stack(
        [(blocks == c).sum(axis=(1, 3)) for c in range(n_classes)], axis=0
    )
    return counts.argmax(axis=0)  # argmax takes the first (lowest) max


def generate_sample(rng: Rng, spec: TaskSpec) -> LabeledSample:
    """One image + labels.  Per-shape draw order (class, position, size) is
    fixed, so a given rng state always produces the same sample."""
    h, w = spec.image_hw
    lo, hi = spec.shapes_range
    n_shapes = lo + (int(rng.integers(hi - lo + 1)) if hi > lo else 0)
    px = np.zeros((h, w), dtype=np.int64)
    for _ in range(n_shapes):
        cls = 1 + int(rng.integers(spec.n_classes - 1))
        y0, x0 = rng.integers(
            np.array([h - spec.min_side + 1, w - spec.min_side + 1])
        )
        hh, ww = rng.integers(
            np.array([h - y0 - spec.min_side + 1, w - x0 - spec.min_side + 1])
        )
        y1 = y0 + spec.min_side + int(hh)
        x1 = x0 + spec.min_side + int(ww)
        px[y0:y1, x0:x1] = cls
    labels = majority_patch_labels(px, spec.patch, spec.n_classes)
    palette = np.asarray(spec.palette, dtype=np.float64)
    clean = palette[px]
    noisy = clean + rng.normal((h, w, spec.channels), std=spec.noise_std)
    image = np.clip(noisy, 0.0, 1.0).astype(np.float32)
    return LabeledSample(Tensor._make(image), labels, px)


def generate_batch(rng: Rng, spec: TaskSpec, n: int) -> list[LabeledSample]:
    return [generate_sample(rng, spec) for _ in range(n)]


def sample_at(seed: int, index: int, spec: TaskSpec) -> LabeledSample:
    """Random-access generation: sample `index` of the seed's virtual dataset.
    Each sample owns a private stream, so parallel workers agree with the
    sequential order."""
    return generate_sample(Rng(seed, mix64(DATA_STREAM, index)), spec)


def make_stream(seed: int, batch_size: int, spec: TaskSpec):
    """step -> list of samples; pure function of (seed, step)."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")

    def stream(step: int) -> list[LabeledSample]:
        base = step * batch_size
        return [sample_at(seed, base + j, spec) for j in range(batch_size)]

    return stream


def stack_images(samples: list[LabeledSample]) -> Tensor:
    return Tensor._make(np.stack([s.image.data for s in samples]))


def stack_labels(samples: list[LabeledSample]) -> np.ndarray:
    return np.stack([s.patch_labels for s in samples])


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class ProbeConfig:
    n_classes: int = 5
    steps: int = 300
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0  # reserved for minibatch sampling; the full-batch path is seed-free

    def __post_init__(self):
        if self.steps < 0 or self.n_classes < 2:
            raise ConfigError(f"invalid probe config: steps={self.steps}, n_classes={self.n_classes}")


def linear_probe_train(features, labels, cfg: ProbeConfig) -> tuple[Tensor, list[float]]:
    """Train a zeros-initialized bias-free head on frozen features.

    features: (M, d_model) Tensor or array; labels: (M,) ints in [0, Cls).
    Full-batch Adam; deterministic (zeros init, no sampling).  Returns the
    head and the per-step loss history (entry 0 is the step-0 loss, which is
    ln(Cls) on any label distribution since zero logits are uniform).
    """
    feats = features if isinstance(features, Tensor) else Tensor(np.asarray(features))
    if feats.ndim != 2:
        raise DimensionError(f"features must be (M, d_model), got {feats.shape}")
    y = np.asarray(labels).reshape(-1)
    if y.shape[0] != feats.shape[0]:
        raise DimensionError(f"{y.shape[0]} labels for {feats.shape[0]} feature rows")
    if not np.issubdtype(y.dtype, np.integer):
        raise DataError("labels must be integers")
    if y.size and (y.min() < 0 or y.max() >= cfg.n_classes):
        raise DataError(f"labels outside [0, {cfg.n_classes})")
    head = Tensor.zeros((feats.shape[1], cfg.n_classes), dtype=feats.dtype)
    state = AdamState.for_params([head])
    history = []
    for _ in range(cfg.steps):
        with GradTape() as tape:
            tape.watch(head)
            loss = T.cross_entropy(T.matmul(feats, head), y)
            tape.backward(loss)
        history.append(loss.item())
        adam_step([head], [head.grad], state, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
        head.grad = None
    final = T.cross_entropy(T.matmul(feats, head), y)
    history.append(final.item())
    return head, history


def probe_predict(features, head: Tensor) -> np.ndarray:
    feats = features.data if isinstance(features, Tensor) else np.asarray(features)
    return (feats @ head.data).argmax(axis=1)


# ---------------------------------------------------------------------------
# metrics


def seg_metrics(pred, gt, n_classes: int) -> tuple[float, float]:
    """(mIoU, pAcc).  IoU per class = TP/(TP+FP+FN); the mean skips classes
    absent from both prediction and ground truth."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} vs gt {gt.shape}")
    p, g = pred.reshape(-1), gt.reshape(-1)
    if p.size == 0:
        raise DataError("empty label arrays")
    for name, a in (("pred", p), ("gt", g)):
        if a.min() < 0 or a.max() >= n_classes:
            raise DataError(f"{name} labels outside [0, {n_classes})")
    conf = np.bincount(g * n_classes + p, minlength=n_classes * n_classes).reshape(
        n_classes, n_classes
    )
    tp = np.diag(conf)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    miou = float((tp[present] / denom[present]).mean()) if present.any() else 0.0
    pacc = float(tp.sum() / conf.sum())
    return miou, pacc
