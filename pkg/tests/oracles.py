"""Brute-force scalar-loop reference implementations of the loss terms.

Plain Python floats and explicit loops only, so they share no code path with the
vectorised tensor implementation under test.
"""
import math


def _column(m, j):
    return [row[j] for row in m]


def _centred_unit(col):
    mean = sum(col) / len(col)
    centred = [x - mean for x in col]
    norm = math.sqrt(sum(x * x for x in centred))
    if norm == 0.0:
        return [0.0] * len(col)
    return [x / norm for x in centred]


def invariance(zt, zl, reduction="sum"):
    b, f = len(zt), len(zt[0])
    total = 0.0
    for i in range(b):
        for j in range(f):
            d = zt[i][j] - zl[i][j]
            total += d * d
    total /= b
    return total / f if reduction == "mean" else total


def variance(z, gamma=1.0, eps=1e-4, unbiased=True):
    b, f = len(z), len(z[0])
    acc = 0.0
    for j in range(f):
        col = _column(z, j)
        mean = sum(col) / b
        var = sum((x - mean) ** 2 for x in col) / (b - 1 if unbiased else b)
        acc += max(0.0, gamma - math.sqrt(var + eps))
    return acc / f


def covariance(z):
    f = len(z[0])
    cols = [_centred_unit(_column(z, j)) for j in range(f)]
    acc = 0.0
    for i in range(f):
        for j in range(f):
            if i != j:
                c = sum(a * b for a, b in zip(cols[i], cols[j]))
                acc += c * c
    return acc / (f * f)


def diag_corr(ya, yb):
    f = len(ya[0])
    acc = 0.0
    for j in range(f):
        a = _centred_unit(_column(ya, j))
        b = _centred_unit(_column(yb, j))
        acc += sum(x * y for x, y in zip(a, b))
    return acc / f


def _clamp(p, p_min=1e-7):
    return min(max(p, p_min), 1.0 - p_min)


def bce(d_pos, d_neg, literal_sign=False):
    b = len(d_pos)
    pos = sum(-math.log(_clamp(p)) for p in d_pos) / b
    neg = sum(math.log(1.0 - _clamp(p)) for p in d_neg) / b
    return pos + neg if literal_sign else pos - neg


def tnc(d_pos, d_neg, yt, yl, yk, rho=13.0, variant="modified", literal_sign=False):
    base = bce(d_pos, d_neg, literal_sign)
    if variant == "off":
        return 0.0
    if variant == "original":
        return rho * base
    return rho * (base + (1.0 - diag_corr(yt, yl)) ** 2 + diag_corr(yt, yk) ** 2)


def vibcreg(zt, zl, lam=10.0, mu=10.0, nu=10.0, gamma=1.0, eps=1e-4, reduction="mean"):
    return (lam * invariance(zt, zl, reduction)
            + mu * (variance(zt, gamma, eps) + variance(zl, gamma, eps))
            + nu * (covariance(zt) + covariance(zl)))


def vnibcreg(zt, zl, yt, yl, yk, d_pos, d_neg, lam=10.0, mu=10.0, nu=10.0, rho=13.0, reduction="mean"):
    return vibcreg(zt, zl, lam, mu, nu, reduction=reduction) + tnc(d_pos, d_neg, yt, yl, yk, rho)
