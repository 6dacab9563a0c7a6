"""Synthetic ground truths, residual extraction and dataset CSV files.

Sampling order is part of the reproducibility contract: for a dataset of
``n`` points drawn from stream ``(seed, 0)`` all ``n`` inputs are drawn
first, then all ``n`` standard normals.
"""

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .gp import Dataset
from .rng import Stream


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruth:
    """Mean function and (positive) noise-variance function of the data."""

    mean_fn: Callable
    var_fn: Callable

    def sample(self, x, normals):
        x = np.asarray(x, dtype=float)
        return self.mean_fn(x) + np.sqrt(self.var_fn(x)) * normals


# Module-level functions (not lambdas) so that ground truths pickle into
# worker processes.


def illustrative_mean(x):
    return 0.5 * (np.cos(x) + 1.0)


def illustrative_var(x):
    return 0.19 * x + 0.1


def friction_mean(v):
    return v + np.sin(3.0 * v)


def friction_var(v):
    return 0.8 * np.maximum(0.0, v) + 0.2


ILLUSTRATIVE = GroundTruth(mean_fn=illustrative_mean, var_fn=illustrative_var)
FRICTION = GroundTruth(mean_fn=friction_mean, var_fn=friction_var)

# Two clusters with unequal noise; levels are an illustrative choice.
MOTIVATING_CLUSTERS = ((1.0, 2.5, 0.1), (7.5, 9.0, 0.5))


def _check_n(n):
    if int(n) != n or n < 1:
        raise ValueError(f"n must be a positive integer, got {n}")
    return int(n)


def sample_truth(truth, n, seed, low, high, stream=0):
    n = _check_n(n)
    rs = Stream(seed, stream)
    x = rs.uniform(n, low, high)
    y = truth.sample(x, rs.normal(n))
    return Dataset(x[:, None], y)


def sample_illustrative(n, seed):
    """``x ~ U(0, 10)``, ``y = 0.5 (cos x + 1) + eps``, ``eps ~ N(0, 0.19 x + 0.1)``."""
    return sample_truth(ILLUSTRATIVE, n, seed, 0.0, 10.0)


def sample_friction(n, seed, truth=FRICTION, stream=0):
    """Friction samples ``F ~ N(v + sin 3v, 0.8 max(0, v) + 0.2)``, ``v ~ U(-1, 1)``."""
    return sample_truth(truth, n, seed, -1.0, 1.0, stream=stream)


def sample_motivating(n, seed, clusters=MOTIVATING_CLUSTERS):
    """Zero-mean data in two clusters, the first ``ceil(n/2)`` points in the first.

    Each cluster is ``(low, high, noise_std)``.
    """
    n = _check_n(n)
    rs = Stream(seed, 0)
    sizes = [(n + 1) // 2, n // 2]
    xs, stds = [], []
    for (low, high, std), m in zip(clusters, sizes):
        xs.append(rs.uniform(m, low, high))
        stds.append(np.full(m, std))
    x = np.concatenate(xs)
    y = np.concatenate(stds) * rs.normal(n)
    return Dataset(x[:, None], y)


@dataclass(frozen=True)
class ResidualSpec:
    """Known part of ``x+ = f(x, u) + B (h(x) + eps)``.

    ``B`` must have full column rank; its pseudo-inverse is cached.
    """

    B: np.ndarray
    f: Callable

    def __post_init__(self):
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        sv = np.linalg.svd(B, compute_uv=False)
        if sv.size == 0 or sv.min() <= 1e-10 * max(sv.max(), 1.0) or sv.size < B.shape[1]:
            raise ValueError(f"B must have full column rank (singular values {sv})")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "_pinv", np.linalg.pinv(B))


def extract_residual(spec, x_k, u_k, x_next):
    """Regression target ``B^+ (x_next - f(x_k, u_k))``."""
    x_next = np.asarray(x_next, dtype=float)
    diff = x_next - np.asarray(spec.f(x_k, u_k), dtype=float)
    if diff.shape != (spec.B.shape[0],):
        raise ValueError(
            f"state has shape {diff.shape}, expected ({spec.B.shape[0]},)"
        )
    return spec._pinv @ diff


def double_integrator_spec(Ts):
    """Residual spec of the position/velocity plant with friction.

    ``B = [0, -Ts]^T`` so that the extracted residual is the friction force
    itself rather than its negative.
    """

    def f(x, u):
        p, v = x
        return np.array([p + Ts * v, v + Ts * float(np.squeeze(u))])

    return ResidualSpec(B=np.array([[0.0], [-Ts]]), f=f)


def write_dataset(path, data):
    """Write ``x_1,...,x_nx,y`` rows with 17 significant digits."""
    n_x = data.X.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x_{i + 1}" for i in range(n_x)] + ["y"])
        for x, y in zip(data.X, data.Y):
            w.writerow([f"{v:.17g}" for v in x] + [f"{y:.17g}"])


def read_dataset(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetFormatError(f"{path}: no data rows")
    header = rows[0]
    expected = [f"x_{i + 1}" for i in range(len(header) - 1)] + ["y"]
    if len(header) < 2 or header != expected:
        raise DatasetFormatError(f"{path}: line 1: bad header {header!r}")
    values = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DatasetFormatError(
                f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}"
            )
        try:
            values.append([float(v) for v in row])
        except ValueError as exc:
            raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from None
    if not values:
        raise DatasetFormatError(f"{path}: no data rows")
    arr = np.array(values)
    return Dataset(arr[:, :-1], arr[:, -1])
