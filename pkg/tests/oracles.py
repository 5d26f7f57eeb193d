"""Independent slow reference implementations used as test oracles.

Deliberately written with plain numpy loops and direct formulas, sharing no
code with the package.
"""
import itertools
import math

import numpy as np


def dice_oracle(a, b):
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    inter = sa = sb = 0
    for x, y in zip(a, b):
        inter += int(x > 0 and y > 0)
        sa += int(x > 0)
        sb += int(y > 0)
    return 1.0 if sa + sb == 0 else 2.0 * inter / (sa + sb)


def surface_points(mask):
    m = np.asarray(mask) > 0
    pts = []
    for p in zip(*np.nonzero(m)):
        for axis in range(3):
            for step in (-1, 1):
                q = list(p)
                q[axis] += step
                if not 0 <= q[axis] < m.shape[axis] or not m[tuple(q)]:
                    pts.append(p)
                    break
            else:
                continue
            break
    return np.array(pts, dtype=np.float64)


def asd_oracle(a, b, spacing):
    pa = surface_points(a) * np.asarray(spacing)
    pb = surface_points(b) * np.asarray(spacing)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return (d.min(1).sum() + d.min(0).sum()) / (len(pa) + len(pb))


def mse_oracle(a, b):
    total = 0.0
    for x, y in zip(np.asarray(a, np.float64).ravel(), np.asarray(b, np.float64).ravel()):
        total += (x - y) ** 2
    return total / np.asarray(a).size


def ssim_oracle(a, b, size=7, sigma=1.5, data_range=2.0):
    """Mean local SSIM from explicit weighted window sums over an edge-padded volume."""
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    r = size // 2
    g = np.array([math.exp(-((i - r) ** 2) / (2 * sigma ** 2)) for i in range(size)])
    g /= g.sum()
    pa = np.pad(a, r, mode="edge")
    pb = np.pad(b, r, mode="edge")
    mu_a = np.zeros_like(a)
    mu_b = np.zeros_like(a)
    aa = np.zeros_like(a)
    bb = np.zeros_like(a)
    ab = np.zeros_like(a)
    X, Y, Z = a.shape
    for i, j, k in itertools.product(range(size), repeat=3):
        w = g[i] * g[j] * g[k]
        sa = pa[i:i + X, j:j + Y, k:k + Z]
        sb = pb[i:i + X, j:j + Y, k:k + Z]
        mu_a += w * sa
        mu_b += w * sb
        aa += w * sa * sa
        bb += w * sb * sb
        ab += w * sa * sb
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    va = aa - mu_a ** 2
    vb = bb - mu_b ** 2
    cov = ab - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2))
    return float(s.mean())


def warp_point_oracle(v, disp, p):
    """Trilinear pull sample of ``v`` at voxel ``p`` displaced by ``disp[:, p]`` with border clamping."""
    v = np.asarray(v, np.float64)
    q = [min(max(p[a] + float(disp[(a,) + tuple(p)]), 0.0), v.shape[a] - 1) for a in range(3)]
    lo = [min(int(math.floor(q[a])), max(v.shape[a] - 2, 0)) for a in range(3)]
    out = 0.0
    for corner in itertools.product((0, 1), repeat=3):
        w = 1.0
        idx = []
        for a in range(3):
            f = q[a] - lo[a]
            w *= f if corner[a] else 1.0 - f
            idx.append(min(lo[a] + corner[a], v.shape[a] - 1))
        out += w * v[tuple(idx)]
    return out


def diffusion_oracle(disp):
    disp = np.asarray(disp, np.float64)
    total = 0.0
    for comp in range(3):
        for axis in range(3):
            n = disp.shape[axis + 1]
            if n < 2:
                continue
            d = np.diff(disp[comp], axis=axis)
            total += (d ** 2).mean()
    return total / 9.0
