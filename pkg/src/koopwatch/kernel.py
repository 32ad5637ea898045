"""Gaussian-kernel pairwise similarity features.

Each output channel ``k_<i>_<j>`` measures how close raw channels ``i`` and
``j`` are at every time step::

    g(x_i, x_j) = exp(-||x_i - x_j||^2 / (2 * sigma))

Note that ``sigma`` divides the squared distance directly (it is not squared).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .timeseries import Dataset


class KernelConfigError(ValueError):
    pass


SigmaSpec = Union[float, str, Sequence[float]]


@dataclass(frozen=True)
class KernelConfig:
    """Settings for :func:`augment`.

    ``sigma`` is either a positive number shared by all pairs, a sequence with
    one positive value per pair, or ``"median"`` to resolve one value per pair
    from the first ``calibration_samples`` rows (median of the squared pair
    differences). ``pairs=None`` means every ``i < j``. ``lag`` > 1 switches to
    the trajectory mode, comparing trailing length-``lag`` subsequences.
    """

    sigma: SigmaSpec = "median"
    pairs: tuple[tuple[int, int], ...] | None = None
    include_raw: bool = False
    lag: int = 1
    calibration_samples: int | None = None

    def resolved_pairs(self, num_channels: int) -> list[tuple[int, int]]:
        if self.pairs is None:
            return list(itertools.combinations(range(num_channels), 2))
        out = []
        for i, j in self.pairs:
            if i == j:
                raise KernelConfigError(f"pair ({i}, {j}) compares a channel with itself")
            if not (0 <= i < num_channels and 0 <= j < num_channels):
                raise KernelConfigError(f"pair ({i}, {j}) out of range for {num_channels} channels")
            out.append((int(i), int(j)))
        return out


def gaussian_kernel(xi, xj, sigma: float) -> float:
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    xj = np.atleast_1d(np.asarray(xj, dtype=float))
    if xi.shape != xj.shape:
        raise ValueError(f"length mismatch: {xi.shape} vs {xj.shape}")
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    d2 = float(np.sum((xi - xj) ** 2))
    return float(np.exp(-d2 / (2.0 * sigma)))


def _trailing_sq_dist(diff: np.ndarray, lag: int) -> np.ndarray:
    """Sum of squared differences over the trailing ``lag`` samples.

    The first ``lag - 1`` steps use the shorter prefix available.
    """
    sq = diff**2
    if lag == 1:
        return sq
    c = np.concatenate([np.zeros((1,) + sq.shape[1:]), np.cumsum(sq, axis=0)])
    n = sq.shape[0]
    hi = np.arange(1, n + 1)
    lo = np.maximum(hi - lag, 0)
    return c[hi] - c[lo]


def median_sigma(values: np.ndarray, pairs: Sequence[tuple[int, int]], lag: int = 1) -> np.ndarray:
    """Median heuristic: one sigma per pair from the rows of ``values``."""
    sig = np.empty(len(pairs))
    for p, (i, j) in enumerate(pairs):
        d2 = _trailing_sq_dist(values[:, i] - values[:, j], lag)
        med = float(np.median(d2))
        if not med > 0:
            # identical channels: any positive sigma gives 1
            med = 1.0
        sig[p] = med
    return sig


def resolve_sigma(ds: Dataset, cfg: KernelConfig) -> np.ndarray:
    pairs = cfg.resolved_pairs(ds.num_channels)
    if isinstance(cfg.sigma, str):
        if cfg.sigma != "median":
            raise KernelConfigError(f"unknown sigma rule {cfg.sigma!r}")
        n = ds.num_samples if cfg.calibration_samples is None else cfg.calibration_samples
        if n < 1:
            raise KernelConfigError("calibration_samples must be >= 1")
        return median_sigma(ds.values[:n], pairs, cfg.lag)
    sig = np.broadcast_to(np.asarray(cfg.sigma, dtype=float), (len(pairs),)).copy()
    if np.any(~(sig > 0)):
        raise KernelConfigError("sigma must be positive")
    return sig


def augment(ds: Dataset, cfg: KernelConfig, sigma: np.ndarray | None = None) -> Dataset:
    """Lift ``ds`` into pairwise kernel channels (plus the raw ones if asked).

    ``sigma`` overrides the configured rule with already-resolved per-pair
    values, which is how a stored calibration is replayed.
    """
    if cfg.lag < 1:
        raise KernelConfigError("lag must be >= 1")
    pairs = cfg.resolved_pairs(ds.num_channels)
    if not pairs and not cfg.include_raw:
        raise KernelConfigError("empty output: no pairs and include_raw is false")
    if sigma is None:
        sigma = resolve_sigma(ds, cfg)
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (len(pairs),) or np.any(~(sigma > 0)):
        raise KernelConfigError("need one positive sigma per pair")

    x = ds.values
    cols, names = [], []
    for (i, j), s in zip(pairs, sigma):
        d2 = _trailing_sq_dist(x[:, i] - x[:, j], cfg.lag)
        cols.append(np.exp(-d2 / (2.0 * s)))
        names.append(f"k_{i}_{j}")
    if cfg.include_raw:
        cols.extend(x.T)
        names.extend(ds.channels)
    return Dataset(tuple(names), ds.dt, np.column_stack(cols), t0=ds.t0)
