"""Slow reference implementations used as test oracles."""
import itertools

import numpy as np


def conv3d_loops(x, w, b, stride, dilation, pads, groups):
    """Direct cross-correlation with explicit loops; ``pads`` is ((lo, hi),) * 3."""
    B, C, T, H, W = x.shape
    O, Cg, kt, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0)) + tuple(pads))
    st, sh, sw = stride
    dt, dh, dw = dilation
    To = (xp.shape[2] - dt * (kt - 1) - 1) // st + 1
    Ho = (xp.shape[3] - dh * (kh - 1) - 1) // sh + 1
    Wo = (xp.shape[4] - dw * (kw - 1) - 1) // sw + 1
    out = np.zeros((B, O, To, Ho, Wo))
    og = O // groups
    for n, o, t, i, j in itertools.product(range(B), range(O), range(To), range(Ho), range(Wo)):
        g = o // og
        acc = 0.0 if b is None else b[o]
        for c in range(Cg):
            for a in range(kt):
                for p in range(kh):
                    for q in range(kw):
                        acc += w[o, c, a, p, q] * xp[n, g * Cg + c, t * st + a * dt, i * sh + p * dh, j * sw + q * dw]
        out[n, o, t, i, j] = acc
    return out


def ap_bruteforce(scores, labels):
    """AP by enumerating ranks one at a time (stable order for ties)."""
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits, total = 0, 0.0
    for k, i in enumerate(ranked, start=1):
        if labels[i] == 1:
            hits += 1
            total += hits / k
    return total / sum(labels)


def loss_pred_loops(y, yh):
    B, C, T, H, W = y.shape
    acc = 0.0
    for idx in itertools.product(range(B), range(C), range(T), range(H), range(W)):
        d = float(y[idx]) - float(yh[idx])
        acc += d * d + abs(d)
    return acc / (H * W) / (B * C)
