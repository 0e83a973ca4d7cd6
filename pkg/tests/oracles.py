"""Independent reference implementations used as test oracles."""
import math

import numpy as np


def naive_conv(x, w, stride=1, pad=(0, 0)):
    c_in, n = x.shape
    c_out, _, k = w.shape
    xp = np.zeros((c_in, n + pad[0] + pad[1]))
    xp[:, pad[0]:pad[0] + n] = x
    t_out = (xp.shape[1] - k) // stride + 1
    out = np.zeros((c_out, t_out))
    for o in range(c_out):
        for t in range(t_out):
            acc = 0.0
            for c in range(c_in):
                for j in range(k):
                    acc += w[o, c, j] * xp[c, t * stride + j]
            out[o, t] = acc
    return out


def naive_maxpool(x, window, stride):
    n_out = (x.shape[-1] - window) // stride + 1
    return np.array([[max(row[t * stride:t * stride + window]) for t in range(n_out)] for row in x])


def naive_sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def naive_cell(x, h, c, w):
    hs = len(h)
    z = [sum(w[r, k] * v for k, v in enumerate(list(x) + list(h))) for r in range(4 * hs)]
    z = np.array(z)
    i, f, g, o = naive_sigmoid(z[:hs]), naive_sigmoid(z[hs:2 * hs]), np.tanh(z[2 * hs:3 * hs]), naive_sigmoid(z[3 * hs:])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def naive_histogram(values, n_bins=2048):
    a = np.abs(np.asarray(values, dtype=np.float64)).ravel()
    max_abs = float(a.max())
    bins = [0] * n_bins
    for v in a:
        i = int(math.floor(v * n_bins / max_abs)) if max_abs > 0 else 0
        bins[min(i, n_bins - 1)] += 1
    return np.array(bins), max_abs


def kl_brute_force(bins, i, n_levels=128):
    """KL(P || Q) for a cut at bin ``i``, written group by group."""
    p = [float(b) for b in bins[:i]]
    p[-1] += float(sum(bins[i:]))
    width = i // n_levels
    q = [0.0] * i
    for g in range(n_levels):
        lo = g * width
        hi = i if g == n_levels - 1 else lo + width
        kept = [k for k in range(lo, hi) if p[k] != 0]
        if not kept:
            continue
        mass = float(sum(bins[lo:hi]))  # unfolded counts, as in the reference recipe
        for k in kept:
            q[k] = mass / len(kept)
    sp, sq = math.fsum(p), math.fsum(q)
    if sq == 0:
        return math.inf
    total = []
    for pk, qk in zip(p, q):
        if pk == 0:
            continue
        if qk == 0:
            return math.inf
        total.append(pk / sp * math.log((pk / sp) / (qk / sq)))
    return math.fsum(total)


def entropy_threshold_brute_force(bins, max_abs, n_levels=128):
    n = len(bins)
    kls = {i: kl_brute_force(bins, i, n_levels) for i in range(n_levels, n + 1)}
    lowest = min(kls.values())
    # the smallest cut within rounding of the minimum wins
    best_i = min(i for i, kl in kls.items() if kl <= lowest * (1 + 1e-12))
    return best_i * max_abs / n, best_i, kls[best_i]


def recount(cfg, n_samples):
    """Params and MACs per block recomputed from first principles."""
    fs_s = n_samples // cfg.sample_rate
    out = {"params": {}, "macs": {}}
    for block, path in (("cnn_shape", cfg.shape_path), ("cnn_detail", cfg.detail_path)):
        pool = path.pools[fs_s]
        length, params, macs = n_samples, 0, 0
        for li, layer in enumerate(path.layers, start=1):
            if layer.padding == "same":
                t = (length + layer.stride - 1) // layer.stride
            else:
                t = (length - layer.kernel_size) // layer.stride + 1
            w = layer.kernel_size * layer.in_channels * layer.out_channels
            params += w + (layer.out_channels if layer.has_bias else 0)
            macs += w * t
            if li == pool.after_layer:
                t = (t - pool.window) // pool.stride + 1
            length = t
        out["params"][block] = params
        out["macs"][block] = macs
    h, x = cfg.lstm.hidden_size, cfg.lstm.input_size
    lstm_params = 2 * (4 * h * (x + h) + (4 * h if cfg.lstm.bias else 0))
    steps = cfg.seq_len * cfg.frames_per_segment
    out["params"]["lstm"] = lstm_params
    out["macs"]["lstm"] = steps * lstm_params + steps * 2 * 3 * h
    d_in = cfg.dense.r_shape + cfg.dense.r_detail + 2 * h
    dense = d_in * cfg.dense.hidden + cfg.dense.hidden * cfg.dense.n_classes
    if cfg.dense.bias:
        dense += cfg.dense.hidden + cfg.dense.n_classes
    out["params"]["dense"] = dense
    out["macs"]["dense"] = dense
    return out


def heavy_tailed_histogram(seed, n=20000):
    rng = np.random.default_rng(seed)
    kind = seed % 3
    if kind == 0:
        v = rng.standard_t(3, n)
    elif kind == 1:
        v = rng.laplace(0, 1, n)
    else:
        v = np.maximum(rng.standard_normal(n), 0) * rng.lognormal(0, 0.7, n)
    return naive_histogram(v)
