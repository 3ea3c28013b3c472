"""Pure numpy/Python versions of the hot kernels.

Used when the compiled ``alcr._kernels`` extension is unavailable, and as
the reference the compiled versions are tested against.
"""
import numpy as np


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gru_scan_forward(xg, h0, w_h, b_h, mask):
    batch, steps, gates = xg.shape
    size = gates // 3
    hs = np.empty((batch, steps, size))
    r = np.empty_like(hs)
    z = np.empty_like(hs)
    n = np.empty_like(hs)
    hn = np.empty_like(hs)
    h = h0
    for t in range(steps):
        hg = h @ w_h + b_h
        x = xg[:, t]
        rt = _sigmoid(x[:, :size] + hg[:, :size])
        zt = _sigmoid(x[:, size:2 * size] + hg[:, size:2 * size])
        hnt = hg[:, 2 * size:]
        nt = np.tanh(x[:, 2 * size:] + rt * hnt)
        m = mask[:, t, None]
        h = m * ((1.0 - zt) * nt + zt * h) + (1.0 - m) * h
        hs[:, t], r[:, t], z[:, t], n[:, t], hn[:, t] = h, rt, zt, nt, hnt
    return hs, (r, z, n, hn)


def gru_scan_backward(dhs, xg, h0, w_h, mask, hs, cache):
    r, z, n, hn = cache
    batch, steps, size = hs.shape
    dxg = np.empty((batch, steps, 3 * size))
    dhg_all = np.empty_like(dxg)
    dh = np.zeros((batch, size))
    for t in range(steps - 1, -1, -1):
        h_prev = hs[:, t - 1] if t > 0 else h0
        dh = dh + dhs[:, t]
        m = mask[:, t, None]
        g = dh * m
        rt, zt, nt = r[:, t], z[:, t], n[:, t]
        dan = g * (1.0 - zt) * (1.0 - nt * nt)
        dar = dan * hn[:, t] * rt * (1.0 - rt)
        daz = g * (h_prev - nt) * zt * (1.0 - zt)
        dxg[:, t, :size] = dar
        dxg[:, t, size:2 * size] = daz
        dxg[:, t, 2 * size:] = dan
        dhg = dhg_all[:, t]
        dhg[:, :size] = dar
        dhg[:, size:2 * size] = daz
        dhg[:, 2 * size:] = dan * rt
        dh = dh * (1.0 - m) + g * zt + dhg @ w_h.T
    h_prev_all = np.concatenate([h0[:, None], hs[:, :-1]], axis=1)
    dw = h_prev_all.reshape(-1, size).T @ dhg_all.reshape(-1, 3 * size)
    db = dhg_all.sum(axis=(0, 1))
    return dxg, dh, dw, db


def edit_distance(a, b):
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]
