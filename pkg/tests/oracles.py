"""Brute-force reference implementations, written with plain loops and the
math module so they share no code path with the package under test."""

import math


def rec_loss(conv, ref):
    """Per-frame sum of squared differences, averaged over frames."""
    total = 0.0
    for t in range(len(conv)):
        frame = 0.0
        for n in range(len(conv[t])):
            d = float(conv[t][n]) - float(ref[t][n])
            frame += d * d
        total += frame
    return total / len(conv)


def euclid(a, b):
    acc = 0.0
    for m in range(len(a)):
        d = float(a[m]) - float(b[m])
        acc += d * d
    return math.sqrt(acc)


def mcd(conv, ref, include_c0=False):
    start = 0 if include_c0 else 1
    const = 10.0 / math.log(10.0)
    total = 0.0
    for t in range(len(conv)):
        acc = 0.0
        for n in range(start, len(conv[t])):
            d = float(conv[t][n]) - float(ref[t][n])
            acc += d * d
        total += const * math.sqrt(2.0 * acc)
    return total / len(conv)


def dtw_cost(a, b):
    """Total cost of the optimal symmetric DTW path, by memoised recursion."""
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def d(i, j):
        c = euclid(a[i], b[j])
        if i == 0 and j == 0:
            return c
        best = math.inf
        if i > 0 and j > 0:
            best = min(best, d(i - 1, j - 1))
        if i > 0:
            best = min(best, d(i - 1, j))
        if j > 0:
            best = min(best, d(i, j - 1))
        return c + best

    return d(len(a) - 1, len(b) - 1)


def conversion_param_count(in_dim, emb_dim, hidden, layers, out_dim):
    """Feed-forward layer, LSTM stack (two bias vectors per layer, as in cuDNN-style cells), output layer."""
    n = (in_dim + emb_dim) * hidden + hidden
    for layer in range(layers):
        layer_in = hidden
        n += 4 * hidden * (layer_in + hidden) + 8 * hidden
    n += hidden * out_dim + out_dim
    return n


def embedder_param_count(in_dim, channels, blocks, emb_dim, n_speakers):
    n = in_dim * channels + channels  # stem
    n += blocks * 2 * (channels * channels + channels)
    n += channels * emb_dim + emb_dim
    n += emb_dim * n_speakers + n_speakers
    return n


def mean_std(values):
    n = len(values)
    mu = sum(values) / n
    var = sum((v - mu) ** 2 for v in values) / n
    return mu, math.sqrt(var)
