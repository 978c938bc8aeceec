import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def direct_conv(x, w, b=None):
    """Nested-loop padded cross-correlation, (N,C,H,W) x (kh,kw,Cin,Cout)."""
    n, cin, h, wd = x.shape
    kh, kw, _, cout = w.shape
    p = kh // 2
    xp = np.zeros((n, cin, h + 2 * p, wd + 2 * p))
    xp[:, :, p : p + h, p : p + wd] = x
    out = np.zeros((n, cout, h, wd))
    for b_ in range(n):
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    acc = 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            for c in range(cin):
                                acc += xp[b_, c, i + di, j + dj] * w[di, dj, c, o]
                    out[b_, o, i, j] = acc + (0.0 if b is None else b[o])
    return out


def rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-30))
