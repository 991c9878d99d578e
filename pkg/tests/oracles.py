"""Slow, obviously-correct reference implementations used as test oracles.

Everything here is written with explicit loops in float64 and shares no
code with the package under test.
"""

from __future__ import annotations

import math

import numpy as np


def conv2d_loop(x, w, b=None, stride=1, padding=0):
    """x (C, H, W), w (O, C, k, k) -> (O, H', W') by direct summation."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((c, h + 2 * padding, wd + 2 * padding))
    xp[:, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0 if b is None else float(b[oc])
                for ci in range(c):
                    for ky in range(k):
                        for kx in range(k):
                            acc += w[oc, ci, ky, kx] * xp[ci, i * stride + ky, j * stride + kx]
                out[oc, i, j] = acc
    return out


def matmul_loop(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            out[i, j] = sum(a[i, t] * b[t, j] for t in range(k))
    return out


def avg_pool_loop(x, kernel):
    """Mean over edge-truncated kernel x kernel windows of the last two axes."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    ho, wo = -(-h // kernel), -(-w // kernel)
    out = np.zeros(x.shape[:-2] + (ho, wo))
    for i in range(ho):
        for j in range(wo):
            window = x[..., i * kernel : min(h, (i + 1) * kernel), j * kernel : min(w, (j + 1) * kernel)]
            out[..., i, j] = window.reshape(window.shape[:-2] + (-1,)).mean(axis=-1)
    return out


def softmax_loop(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape[:-1]):
        row = x[idx]
        e = [math.exp(v - max(row)) for v in row]
        s = sum(e)
        out[idx] = [v / s for v in e]
    return out


def bilinear_point(img, x, y):
    """Sample a (C, H, W) image at one (x, y), clamping to the border."""
    img = np.asarray(img, dtype=np.float64)
    _, h, w = img.shape
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    ax, ay = x - x0, y - y0
    return (
        img[:, y0, x0] * (1 - ax) * (1 - ay)
        + img[:, y0, x1] * ax * (1 - ay)
        + img[:, y1, x0] * (1 - ax) * ay
        + img[:, y1, x1] * ax * ay
    )


def bilinear_loop(img, coords):
    """img (C, H, W), coords (H', W', 2) -> (C, H', W')."""
    coords = np.asarray(coords, dtype=np.float64)
    ho, wo = coords.shape[:2]
    out = np.zeros((img.shape[0], ho, wo))
    for i in range(ho):
        for j in range(wo):
            out[:, i, j] = bilinear_point(img, coords[i, j, 0], coords[i, j, 1])
    return out


def all_pair_loop(f1, f2, scale=True):
    """f (C, H, W) -> C[y1, x1, y2, x2]."""
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    c, h, w = f1.shape
    out = np.zeros((h, w, h, w))
    for y1 in range(h):
        for x1 in range(w):
            for y2 in range(h):
                for x2 in range(w):
                    out[y1, x1, y2, x2] = sum(f1[k, y1, x1] * f2[k, y2, x2] for k in range(c))
    return out / math.sqrt(c) if scale else out


def strip_keys_loop(k):
    """K (C', H, W) -> column means (C', W) and row means (C', H)."""
    k = np.asarray(k, dtype=np.float64)
    cp, h, w = k.shape
    cols = np.zeros((cp, w))
    rows = np.zeros((cp, h))
    for i in range(cp):
        for j in range(w):
            cols[i, j] = sum(k[i, r, j] for r in range(h)) / h
        for r in range(h):
            rows[i, r] = sum(k[i, r, j] for j in range(w)) / w
    return cols, rows


def strip_corr_loop(q, keys, scale=True):
    """q (C', H, W), keys (C', K) -> (H, W, K)."""
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    cp, h, w = q.shape
    n = keys.shape[1]
    out = np.zeros((h, w, n))
    for y in range(h):
        for x in range(w):
            for t in range(n):
                out[y, x, t] = sum(q[c, y, x] * keys[c, t] for c in range(cp))
    return out / math.sqrt(cp) if scale else out


def lookup_loop(levels, kernels, flow, radius):
    """levels[k]: (H, W, ch, h_k, w_k) arrays; flow (2, H, W) -> (L, H, W).

    Feature order: level, then channel, then tap (dy outer, dx inner).
    """
    _, h, w = flow.shape
    feats = []
    for level, kk in zip(levels, kernels):
        ch = level.shape[2]
        block = np.zeros((ch, (2 * radius + 1) ** 2, h, w))
        for y in range(h):
            for x in range(w):
                cx = (x + flow[0, y, x]) / kk
                cy = (y + flow[1, y, x]) / kk
                t = 0
                for dy in range(-radius, radius + 1):
                    for dx in range(-radius, radius + 1):
                        block[:, t, y, x] = bilinear_point(level[y, x], cx + dx, cy + dy)
                        t += 1
        feats.append(block.reshape(-1, h, w))
    return np.concatenate(feats, axis=0)


def convex_upsample_loop(flow, logits, d):
    """flow (2, H, W), logits (9*d*d, H, W) laid out (9, d, d) -> (2, H*d, W*d)."""
    flow = np.asarray(flow, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64).reshape(9, d, d, *flow.shape[1:])
    _, h, w = flow.shape
    out = np.zeros((2, h * d, w * d))
    for y in range(h):
        for x in range(w):
            for i in range(d):
                for j in range(d):
                    z = logits[:, i, j, y, x]
                    e = np.exp(z - z.max())
                    wts = e / e.sum()
                    acc = np.zeros(2)
                    for k in range(9):
                        ky, kx = divmod(k, 3)
                        yy = min(max(y + ky - 1, 0), h - 1)
                        xx = min(max(x + kx - 1, 0), w - 1)
                        acc += wts[k] * flow[:, yy, xx]
                    out[:, y * d + i, x * d + j] = d * acc
    return out


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))
