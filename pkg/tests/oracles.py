"""Brute-force reference metrics written with plain loops.

Nothing here imports from ``hinet``; these exist to cross-check it.
"""
import math


def _flat(img):
    return [float(v) for row in img for v in row]


def psnr(y, g):
    ys, gs = _flat(y), _flat(g)
    mse = sum((a - b) ** 2 for a, b in zip(ys, gs)) / len(ys)
    if mse == 0:
        return math.inf
    peak = max(max(ys), max(gs))
    return 10 * math.log10(peak * peak / mse)


def nmse(y, g):
    num = den = 0.0
    for a, b in zip(_flat(y), _flat(g)):
        num += (a - b) ** 2
        den += a * a
    return num / den


def ssim(y, g, size=11, sigma=1.5, L=1.0):
    half = (size - 1) / 2
    w = [[math.exp(-((i - half) ** 2 + (j - half) ** 2) / (2 * sigma * sigma)) for j in range(size)]
         for i in range(size)]
    total = sum(sum(r) for r in w)
    w = [[v / total for v in r] for r in w]
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    rows, cols = len(y), len(y[0])
    acc, n = 0.0, 0
    for r in range(rows - size + 1):
        for c in range(cols - size + 1):
            my = mg = 0.0
            for i in range(size):
                for j in range(size):
                    my += w[i][j] * y[r + i][c + j]
                    mg += w[i][j] * g[r + i][c + j]
            vy = vg = cov = 0.0
            for i in range(size):
                for j in range(size):
                    dy = y[r + i][c + j] - my
                    dg = g[r + i][c + j] - mg
                    vy += w[i][j] * dy * dy
                    vg += w[i][j] * dg * dg
                    cov += w[i][j] * dy * dg
            acc += ((2 * my * mg + c1) * (2 * cov + c2)) / ((my * my + mg * mg + c1) * (vy + vg + c2))
            n += 1
    return acc / n
