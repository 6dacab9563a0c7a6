"""Reference implementations used as test oracles.

Everything here is written from the defining formulas with explicit loops
and dense inverses, sharing no code with the package.
"""

import math

import numpy as np

MASK64 = (1 << 64) - 1
PHILOX_M = (0xD2E7470EE14C6C93, 0xCA5A826395121157)
PHILOX_W = (0x9E3779B97F4A7C15, 0xBB67AE8584CAA73B)


def philox4x64(counter, key, rounds=10):
    x = list(counter)
    k0, k1 = key
    for _ in range(rounds):
        p0 = PHILOX_M[0] * x[0]
        p1 = PHILOX_M[1] * x[2]
        x = [(p1 >> 64) ^ x[1] ^ k0, p1 & MASK64, (p0 >> 64) ^ x[3] ^ k1, p0 & MASK64]
        k0 = (k0 + PHILOX_W[0]) & MASK64
        k1 = (k1 + PHILOX_W[1]) & MASK64
    return x


def philox_words(seed, stream, n):
    out = []
    block = 1
    while len(out) < n:
        out.extend(philox4x64([block, 0, 0, 0], (seed, stream)))
        block += 1
    return out[:n]


def rbf(x, w, l):
    return math.exp(-l * sum((a - b) ** 2 for a, b in zip(x, w)))


def gram(X, W, l):
    return np.array([[rbf(x, w, l) for w in W] for x in X])


def dense_gp(X, Y, l, s0, gamma=None, Xs=None, gamma_s=None):
    """Textbook GP with per-point noise ``s0 + gamma`` via an explicit inverse."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n = X.shape[0]
    gamma = np.zeros(n) if gamma is None else np.asarray(gamma, dtype=float)
    Xs = X if Xs is None else np.atleast_2d(np.asarray(Xs, dtype=float))
    gamma_s = np.zeros(len(Xs)) if gamma_s is None else np.asarray(gamma_s, dtype=float)
    A_inv = np.linalg.inv(gram(X, X, l) + np.diag(s0 + gamma))
    Ks = gram(Xs, X, l)
    mean = Ks @ A_inv @ np.asarray(Y, dtype=float)
    var = np.array([
        1.0 + s0 + gamma_s[i] - Ks[i] @ A_inv @ Ks[i] for i in range(len(Xs))
    ])
    return mean, var


def dense_sweeps(X, Y, l, s0, n_iter):
    """Gamma iterates of the joint sweep computed with explicit inverses."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    n = len(Y)
    K = gram(X, X, l)
    prior_inv = np.linalg.inv(K + s0 * np.eye(n))
    gamma = np.zeros(n)
    alphas, gammas = [], []
    for _ in range(n_iter):
        lam = K @ np.linalg.inv(K + s0 * np.eye(n) + np.diag(gamma)) @ Y
        Z = (Y - lam) ** 2 - s0
        gamma = K @ prior_inv @ Z
        alphas.append(np.linalg.inv(K + s0 * np.eye(n) + np.diag(gamma)) @ Y)
        gammas.append(gamma)
    return gammas, alphas


def scalar_step(g, y, s0):
    m = (s0 + g) / (1.0 + s0 + g)
    return (m * m * y * y - s0) / (1.0 + s0)


def bisect_root(f, lo, hi, iters=200):
    flo = f(lo)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
    return 0.5 * (lo + hi)


def fixed_point_by_bisection(y, s0):
    lo = -s0 / (1.0 + s0)
    hi = max(y * y, s0) + 1.0
    f = lambda g: scalar_step(g, y, s0) - g  # noqa: E731
    if f(lo) <= 0.0:
        return lo
    return bisect_root(f, lo, hi)
