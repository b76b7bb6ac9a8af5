"""Independent loop-based reference computations used by the tests.

Nothing here calls into accnn's numeric code paths.
"""

import math

import numpy as np


def affine_loop(x, W, b):
    m, n = len(W), len(W[0])
    out = []
    for i in range(m):
        acc = 0.0
        for j in range(n):
            acc += W[i][j] * x[j]
        out.append(acc + b[i])
    return out


def softmax_naive(v):
    e = [math.exp(t) for t in v]
    s = sum(e)
    return [t / s for t in e]


def conv1x1_loop(cube, W, b):
    H, Wd, _ = cube.shape
    out = np.zeros((H, Wd, len(W)))
    for y in range(H):
        for x in range(Wd):
            out[y, x] = affine_loop(list(cube[y, x]), W, b)
    return out


def bin_ranges(start, extent, n_bins, limit):
    out = []
    for p in range(n_bins):
        lo = start + math.floor(p * extent / n_bins)
        hi = start + math.ceil((p + 1) * extent / n_bins)
        out.append((min(max(lo, 0), limit), min(max(hi, 0), limit)))
    return out


def bin_max_loop(cube, y0, x0, y1, x1, P):
    """Brute-force bin max by enumerating bin membership cell by cell."""
    H, W, D = cube.shape
    ys = bin_ranges(y0, y1 - y0, P, H)
    xs = bin_ranges(x0, x1 - x0, P, W)
    out = np.full((P, P, D), -np.inf)
    for i, (ya, yb) in enumerate(ys):
        for j, (xa, xb) in enumerate(xs):
            for y in range(H):
                for x in range(W):
                    if ya <= y < yb and xa <= x < xb:
                        out[i, j] = np.maximum(out[i, j], cube[y, x])
    return out


def sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def lstm_layer_loop(W, b, h_prev, c_prev, x):
    """One LSTM layer with gate order (i, f, o, g), scalar arithmetic only."""
    d = len(h_prev)
    z_in = list(h_prev) + list(x)
    z = affine_loop(z_in, W, b)
    h, c = [], []
    for k in range(d):
        i = sig(z[k])
        f = sig(z[d + k])
        o = sig(z[2 * d + k])
        g = math.tanh(z[3 * d + k])
        ck = f * c_prev[k] + i * g
        c.append(ck)
        h.append(o * math.tanh(ck))
    return h, c


def ap_bruteforce(scores, is_tp_fn, n_gt):
    """AP by re-evaluating every score-threshold prefix from scratch.

    ``is_tp_fn(prefix_indices)`` returns the number of true positives among
    the detections whose indices are in the prefix.  The PR points are
    enumerated, then the precision envelope is integrated over recall steps.
    """
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    pts = []
    for k in range(1, len(order) + 1):
        tp = is_tp_fn(order[:k])
        pts.append((tp / n_gt, tp / k))
    ap, prev_r = 0.0, 0.0
    for k, (r, _) in enumerate(pts):
        if r > prev_r:
            best = max(p for (_, p) in pts[k:])
            ap += (r - prev_r) * best
            prev_r = r
    return ap


def greedy_tp_count(dets, gts, thr=0.5):
    """Number of TPs for detections given in processing order (one match per GT).

    Each detection looks at its highest-IoU GT; it is a TP only if that GT
    is still free and the IoU reaches the threshold.
    """
    used = [False] * len(gts)
    tp = 0
    for box in dets:
        best, bj = -1.0, -1
        for j, g in enumerate(gts):
            o = iou_corners(box, g)
            if o > best:
                best, bj = o, j
        if bj >= 0 and best >= thr and not used[bj]:
            used[bj] = True
            tp += 1
    return tp


def iou_corners(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def central_difference(f, x, eps=1e-5):
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        o = flat[k]
        flat[k] = o + eps
        up = f(x)
        flat[k] = o - eps
        dn = f(x)
        flat[k] = o
        gf[k] = (up - dn) / (2 * eps)
    return g
