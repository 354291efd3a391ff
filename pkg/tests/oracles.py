"""Independent reference computations shared by the unit and acceptance tests."""
from __future__ import annotations

import math

import numpy as np
from scipy.integrate import quad

from trajstyle.cutsim import CutterModel


def brute_dtw(a, b):
    """Enumerate every monotone warping path; least cost, then shortest."""
    a = np.atleast_2d(np.asarray(a, float).T).T
    b = np.atleast_2d(np.asarray(b, float).T).T
    n, m = len(a), len(b)
    best = [math.inf, 0]

    def walk(i, j, cost, length):
        cost += math.sqrt(sum((x - y) ** 2 for x, y in zip(a[i], b[j])))
        length += 1
        if i == n - 1 and j == m - 1:
            if cost < best[0] or (cost == best[0] and length < best[1]):
                best[:] = [cost, length]
            return
        if i + 1 < n and j + 1 < m:
            walk(i + 1, j + 1, cost, length)
        if i + 1 < n:
            walk(i + 1, j, cost, length)
        if j + 1 < m:
            walk(i, j + 1, cost, length)

    walk(0, 0, 0.0, 0)
    return best[0] / best[1]


def hand_anova(groups):
    allx = [v for g in groups for v in g]
    grand = sum(allx) / len(allx)
    means = [sum(g) / len(g) for g in groups]
    ssb = sum(len(g) * (m - grand) ** 2 for g, m in zip(groups, means))
    ssw = sum((v - m) ** 2 for g, m in zip(groups, means) for v in g)
    k, n = len(groups), len(allx)
    return (ssb / (k - 1)) / (ssw / (n - k))


def hand_kw(groups):
    pooled = [v for g in groups for v in g]
    N = len(pooled)

    def rank(v):
        return sum(1 for u in pooled if u < v) + 0.5 * (sum(1 for u in pooled if u == v) + 1)

    H = 12.0 / (N * (N + 1)) * sum(sum(rank(v) for v in g) ** 2 / len(g) for g in groups) - 3 * (N + 1)
    ties = [pooled.count(v) for v in set(pooled)]
    return H / (1 - sum(t**3 - t for t in ties) / (N**3 - N))


def grid_llf(x, lam):
    y = np.log(x) if lam == 0 else (x**lam - 1) / lam
    return (lam - 1) * np.log(x).sum() - 0.5 * x.size * np.log(np.var(y))


def quadrature_mean(k_c, k_e, doc, feed, cutter=CutterModel()):
    """Per-revolution mean force by integrating one tooth over its arc."""
    R = cutter.radius * 1000.0
    b = cutter.width * 1000.0
    f_t = feed * 1000.0 / (cutter.n_teeth * cutter.spindle_speed)
    start = math.pi - math.acos(1.0 - doc / R)

    def tangential(phi):
        return k_c * f_t * math.sin(phi) * b + k_e * b

    fy = quad(lambda p: tangential(p) * (math.cos(p) + 0.3 * math.sin(p)), start, math.pi, epsabs=0, epsrel=1e-12)[0]
    fz = quad(lambda p: tangential(p) * (math.sin(p) - 0.3 * math.cos(p)), start, math.pi, epsabs=0, epsrel=1e-12)[0]
    return np.array([0.0, fy, fz]) * cutter.n_teeth / (2 * math.pi)
