"""Independent reference implementations used as test oracles."""

import math

import numpy as np

from iqtcfm.config import NetworkConfig


def naive_psnr(a, b):
    se = 0.0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        se += (x - y) ** 2
    return 10 * math.log10(1.0 / (se / a.size))


def naive_ssim(a, b):
    a = a.astype(np.float64)
    b = b.astype(np.float64)
    g = [math.exp(-((i - 5) ** 2) / (2 * 1.5**2)) for i in range(11)]
    s = sum(g)
    w = [[g[i] * g[j] / (s * s) for j in range(11)] for i in range(11)]
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for r in range(a.shape[0] - 10):
        for c in range(a.shape[1] - 10):
            mx = my = sxx = syy = sxy = 0.0
            for i in range(11):
                for j in range(11):
                    x, y, k = a[r + i, c + j], b[r + i, c + j], w[i][j]
                    mx += k * x
                    my += k * y
                    sxx += k * x * x
                    syy += k * y * y
                    sxy += k * x * y
            vx, vy, cxy = sxx - mx * mx, syy - my * my, sxy - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return sum(vals) / len(vals)


def hand_count(cfg: NetworkConfig) -> int:
    """Independent layer-by-layer count written from the architecture description."""

    def conv(i, o, k):
        return o * i * k * k + o

    def dense(i, o):
        return o * i + o

    def norm(c):
        return 2 * c

    def res(i, o):
        hidden = max(1, o // cfg.se_reduction)
        n = conv(i, o, 3) + norm(o) + dense(cfg.time_embed_dim, o) + conv(o, o, 3) + norm(o)
        n += dense(o, hidden) + dense(hidden, o)
        return n + (conv(i, o, 1) if i != o else 0)

    td = cfg.time_embed_dim
    total = 2 * dense(td, td)
    total += sum(conv(2 * cfg.in_channels, cfg.branch_channels, k) for k in (1, 3, 7, 15))
    chans = [cfg.base_channels * m for m in cfg.channel_mult]
    prev = cfg.base_channels
    for lvl, ch in enumerate(chans):
        for i in range(cfg.res_blocks_per_level):
            total += res(prev if i == 0 else ch, ch)
        nxt = chans[lvl + 1] if lvl + 1 < len(chans) else ch
        total += conv(4 * ch, nxt, 1)
        prev = nxt
    d = prev
    total += 2 * res(d, d)
    total += norm(d) + dense(d, 3 * d) + dense(d, d) + norm(d) + dense(d, 4 * d) + dense(4 * d, d)
    for ch in reversed(chans):
        total += conv(prev, 4 * ch, 1)
        for i in range(cfg.res_blocks_per_level):
            total += res(2 * ch if i == 0 else ch, ch)
        prev = ch
    total += norm(prev) + conv(prev, cfg.in_channels, 3)
    return total
