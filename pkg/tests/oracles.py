"""Slow, loop-based reference implementations used only as test oracles."""
import math

import numpy as np


def conv2d_loops(x, w, b, stride, padding):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(n):
        for f in range(o):
            for y in range(ho):
                for z in range(wo):
                    patch = xp[i, :, y * stride : y * stride + k, z * stride : z * stride + k]
                    out[i, f, y, z] = (patch * w[f]).sum() + (b[f] if b is not None else 0.0)
    return out


def deconv2d_scatter(x, w, b, stride):
    """Each input pixel stamps its kernel-weighted copy onto the output grid."""
    n, c, h, wd = x.shape
    _, o, k, _ = w.shape
    out = np.zeros((n, o, (h - 1) * stride + k, (wd - 1) * stride + k))
    for i in range(n):
        for ci in range(c):
            for y in range(h):
                for z in range(wd):
                    out[i, :, y * stride : y * stride + k, z * stride : z * stride + k] += x[i, ci, y, z] * w[ci]
    if b is not None:
        out += b[None, :, None, None]
    return out


def maxpool_loops(x, k, stride):
    n, c, h, w = x.shape
    ho = math.ceil((h - k) / stride) + 1
    wo = math.ceil((w - k) / stride) + 1
    # a window must start inside the input
    ho -= (ho - 1) * stride >= h
    wo -= (wo - 1) * stride >= w
    out = np.zeros((n, c, ho, wo))
    for y in range(ho):
        for z in range(wo):
            win = x[:, :, y * stride : min(y * stride + k, h), z * stride : min(z * stride + k, w)]
            out[:, :, y, z] = win.max(axis=(2, 3))
    return out


def entropy_brute(responses, labels, k, n, ids=None):
    ids = list(range(len(responses))) if ids is None else list(ids)
    ranked = sorted(range(len(responses)), key=lambda i: (-float(responses[i]), ids[i]))[:k]
    counts = [0] * n
    for i in ranked:
        counts[int(labels[i])] += 1
    h = 0.0
    for cnt in counts:
        if cnt:
            p = cnt / len(ranked)
            h -= p * math.log(p)
    return h, [ids[i] for i in ranked]


def les_brute(layer_entropies):
    means = [math.fsum(v) / len(v) for v in layer_entropies.values() if len(v)]
    threshold = min(means)
    return {name: sum(1 for e in v if e < threshold) for name, v in layer_entropies.items() if len(v)}, threshold


def even_partition_sizes(count, k):
    base, extra = divmod(count, k)
    return [base + 1 if i < extra else base for i in range(k)]


def tally(pairs, m):
    table = [[0] * m for _ in range(m)]
    for t, p in pairs:
        table[t][p] += 1
    return table


def squared_distance(a, b):
    return float(sum((float(x) - float(y)) ** 2 for x, y in zip(np.ravel(a), np.ravel(b))))
