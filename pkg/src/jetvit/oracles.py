"""Brute-force reference implementations used only to check the real ones.

Everything here is deliberately naive -- explicit loops, materialized N x N
maps, per-coordinate Python arithmetic -- and shares no code with the tensor
engine or the kernels.  Tests and `jetvit verify` compare the two routes.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError


def matmul_triple_loop(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    m, kk = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.result_type(a, b))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for l in range(kk):
                acc += a[i, l] * b[l, j]
            out[i, j] = acc
    return out


def _head_slices(d_model: int, heads: int):
    d = d_model // heads
    return [(h * d, (h + 1) * d) for h in range(heads)]


def dense_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int, mask: np.ndarray | None = None
) -> np.ndarray:
    """Materialized softmax attention, one explicit head at a time.

    mask: optional (N, N) boolean, True where attention is allowed;
    disallowed logits become -inf before the softmax.
    """
    q, k, v = (np.asarray(t) for t in (q, k, v))
    n, d_model = q.shape
    out = np.zeros_like(v)
    for lo, hi in _head_slices(d_model, heads):
        qh, kh, vh = q[:, lo:hi], k[:, lo:hi], v[:, lo:hi]
        scores = (qh @ kh.T) / np.sqrt(hi - lo)
        if mask is not None:
            scores = np.where(mask, scores, -np.inf)
        scores = scores - scores.max(axis=1, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=1, keepdims=True)
        out[:, lo:hi] = weights @ vh
    return out


def window_mask(grid: tuple[int, int], w: int) -> np.ndarray:
    """(N, N) boolean: token pairs that share a w x w window."""
    hp, wp = grid
    if w < 1 or hp % w != 0 or wp % w != 0:
        raise ContractError(f"window {w} does not divide grid {grid}")
    ids = np.empty(hp * wp, dtype=np.int64)
    for y in range(hp):
        for x in range(wp):
            ids[y * wp + x] = (y // w) * (wp // w) + (x // w)
    return ids[:, None] == ids[None, :]


def quadratic_linear_attention(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, heads: int, eps: float
) -> np.ndarray:
    """Linear attention by materializing A = phi(Q) phi(K)^T and row-normalizing
    with the same eps -- the O(N^2) association order the kernel avoids."""
    q, k, v = (np.asarray(t) for t in (q, k, v))
    out = np.zeros_like(v)
    for lo, hi in _head_slices(q.shape[1], heads):
        fq = np.maximum(q[:, lo:hi], 0)
        fk = np.maximum(k[:, lo:hi], 0)
        amap = fq @ fk.T
        denom = amap.sum(axis=1) + eps
        out[:, lo:hi] = (amap @ v[:, lo:hi]) / denom[:, None]
    return out


def sliding_window_conv(
    v: np.ndarray, grid: tuple[int, int], kernels: np.ndarray
) -> np.ndarray:
    """Depthwise conv by looping every output position; zero padding.

    v: (N, C) tokens on grid (Hp, Wp); kernels: (C, k, k).
    """
    v = np.asarray(v)
    kernels = np.asarray(kernels)
    hp, wp = grid
    n, c = v.shape
    if hp * wp != n:
        raise DimensionError(f"grid {grid} does not tile {n} tokens")
    kk = kernels.shape[1]
    r = kk // 2
    vg = v.reshape(hp, wp, c)
    out = np.zeros_like(vg)
    for y in range(hp):
        for x in range(wp):
            for ch in range(c):
                acc = 0.0
                for u in range(kk):
                    for t in range(kk):
                        yy, xx = y + u - r, x + t - r
                        if 0 <= yy < hp and 0 <= xx < wp:
                            acc += vg[yy, xx, ch] * kernels[ch, u, t]
                out[y, x, ch] = acc
    return out.reshape(n, c)


def adam_scalar_reference(
    x0, grads, lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
):
    """Bias-corrected Adam on a flat vector, one Python float at a time.

    grads: sequence of per-step gradient vectors.  Returns the trajectory
    (list of numpy vectors, one per step, excluding x0).
    """
    x = [float(v) for v in np.asarray(x0).reshape(-1)]
    m = [0.0] * len(x)
    v = [0.0] * len(x)
    out = []
    for t, g_step in enumerate(grads, start=1):
        g = [float(v_) for v_ in np.asarray(g_step).reshape(-1)]
        for i in range(len(x)):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            mhat = m[i] / (1.0 - beta1**t)
            vhat = v[i] / (1.0 - beta2**t)
            x[i] = x[i] - lr * mhat / (vhat**0.5 + eps)
        out.append(np.array(x))
    return out


def mse_double_loop(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"shapes differ: {a.shape} vs {b.shape}")
    fa, fb = a.reshape(-1), b.reshape(-1)
    acc = 0.0
    for i in range(fa.size):
        d = float(fa[i]) - float(fb[i])
        acc += d * d
    return acc / fa.size


def unfold_patches(image: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, C) -> (N, P*P*C) by explicit loops, raster order both levels."""
    image = np.asarray(image)
    h, w, c = image.shape
    if h % patch or w % patch:
        raise DimensionError(f"patch {patch} does not divide image {(h, w)}")
    rows = []
    for gy in range(h // patch):
        for gx in range(w // patch):
            flat = []
            for py in range(patch):
                for px in range(patch):
                    for ch in range(c):
                        flat.append(image[gy * patch + py, gx * patch + px, ch])
            rows.append(flat)
    return np.array(rows, dtype=image.dtype)


def patch_majority_labels(
    pixel_classes: np.ndarray, patch: int, n_classes: int
) -> np.ndarray:
    """Per-patch majority class by explicit counting; ties -> lower class id."""
    px = np.asarray(pixel_classes)
    h, w = px.shape
    labels = np.zeros((h // patch, w // patch), dtype=np.int64)
    for gy in range(h // patch):
        for gx in range(w // patch):
            counts = [0] * n_classes
            for py in range(patch):
                for pxx in range(patch):
                    counts[int(px[gy * patch + py, gx * patch + pxx])] += 1
            best = 0
            for c in range(1, n_classes):
                if counts[c] > counts[best]:
                    best = c
            labels[gy, gx] = best
    return labels


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> np.ndarray:
    pred, gt = np.asarray(pred).reshape(-1), np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise DimensionError(f"shapes differ: {pred.shape} vs {gt.shape}")
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    for p, g in zip(pred, gt):
        conf[int(g), int(p)] += 1
    return conf


def metrics_from_confusion(conf: np.ndarray) -> tuple[float, float]:
    """(mIoU over classes present in gt or pred, pixel accuracy)."""
    conf = np.asarray(conf)
    n = conf.shape[0]
    ious = []
    for c in range(n):
        tp = conf[c, c]
        fp = conf[:, c].sum() - tp
        fn = conf[c, :].sum() - tp
        if tp + fp + fn == 0:
            continue  # class absent from both pred and gt
        ious.append(tp / (tp + fp + fn))
    miou = float(np.mean(ious)) if ious else 0.0
    pacc = float(np.trace(conf) / conf.sum()) if conf.sum() else 0.0
    return miou, pacc
