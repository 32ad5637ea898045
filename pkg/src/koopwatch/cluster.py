"""k-means over sparsity patterns with correlation distance.

Vectors are standardised once up front (centred, scaled to unit norm). In that
space ``1 - corr(u, v) = ||u - v||^2 / 2``, so plain Lloyd iterations with
arithmetic-mean centroids minimise the summed correlation distance.

Constant vectors (all-zero or all-one patterns) have no correlation. They are
kept as-is and compared by the tie-break rule: distance 0 to an identical
vector and 1 to anything else.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .detect import SparsityPattern

_EXHAUSTIVE_MAX_K = 8


class ClusterError(ValueError):
    pass


def _is_constant(u: np.ndarray) -> bool:
    return bool(np.ptp(u) == 0) if u.size else True


def correlation_distance(u, v) -> float:
    """``1 - pearson(u, v)`` in ``[0, 2]``; constant inputs use the tie-break."""
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    if _is_constant(u) or _is_constant(v):
        return 0.0 if np.array_equal(u, v) else 1.0
    uc = u - u.mean()
    vc = v - v.mean()
    r = float(uc @ vc / (np.linalg.norm(uc) * np.linalg.norm(vc)))
    return float(np.clip(1.0 - r, 0.0, 2.0))


@dataclass(frozen=True)
class ClusterConfig:
    k: int = 2
    restarts: int = 10
    max_iterations: int = 300
    seed: int = 0
    use_raw: bool = False  # cluster |K| values instead of binary patterns

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ClusterError("k must be >= 1")
        if self.restarts < 1 or self.max_iterations < 1:
            raise ClusterError("restarts and max_iterations must be >= 1")


@dataclass
class ClusterResult:
    assignment: np.ndarray
    centroids: np.ndarray
    inertia: float
    k: int
    seed: int
    inertia_history: list[float] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "assignment": [int(a) for a in self.assignment],
            "inertia": float(self.inertia),
            "k": self.k,
            "seed": self.seed,
        }


def standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centre and unit-normalise each row; returns ``(Z, constant_mask)``.

    Constant rows are left untouched and flagged.
    """
    X = np.asarray(X, dtype=float)
    Z = X - X.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(Z, axis=1)
    const = norms == 0
    Z[~const] /= norms[~const, None]
    Z[const] = X[const]
    return Z, const


def _distances(Z, const, C, cconst) -> np.ndarray:
    """Correlation distance between every row of ``Z`` and every centroid."""
    d = 0.5 * ((Z**2).sum(1)[:, None] + (C**2).sum(1)[None, :] - 2.0 * Z @ C.T)
    d = np.maximum(d, 0.0)
    mixed = const[:, None] | cconst[None, :]
    if mixed.any():
        for i, j in zip(*np.nonzero(mixed)):
            d[i, j] = 0.0 if (const[i] and cconst[j] and np.array_equal(Z[i], C[j])) else 1.0
    return d


def _centroid(rows: np.ndarray, const_rows: np.ndarray) -> tuple[np.ndarray, bool]:
    if const_rows.all() and all(np.array_equal(rows[0], r) for r in rows[1:]):
        return rows[0].copy(), True
    mean = rows[~const_rows].mean(axis=0) if (~const_rows).any() else rows.mean(axis=0)
    return mean, False


def _lloyd(Z, const, k, rng, max_iterations):
    n = Z.shape[0]
    idx = rng.choice(n, size=k, replace=False)
    C = Z[idx].copy()
    cconst = const[idx].copy()
    history = []
    assign = None
    for _ in range(max_iterations):
        d = _distances(Z, const, C, cconst)
        new = d.argmin(axis=1)
        history.append(float(d[np.arange(n), new].sum()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(k):
            members = assign == j
            if not members.any():
                # reseed from the point farthest from its own centroid
                far = int(np.argmax(d[np.arange(n), assign]))
                C[j], cconst[j] = Z[far], const[far]
                assign[far] = j
                continue
            C[j], cconst[j] = _centroid(Z[members], const[members])
    d = _distances(Z, const, C, cconst)
    assign = d.argmin(axis=1)
    inertia = float(d[np.arange(n), assign].sum())
    history.append(inertia)
    return assign, C, inertia, history


def _as_matrix(items: Sequence) -> np.ndarray:
    rows = []
    for it in items:
        a = it.bits if isinstance(it, SparsityPattern) else it
        rows.append(np.asarray(a, dtype=float).ravel())
    if not rows:
        raise ClusterError("nothing to cluster")
    if len({r.size for r in rows}) != 1:
        raise ClusterError("patterns have different sizes")
    return np.vstack(rows)


def kmeans(patterns: Sequence, cfg: ClusterConfig = ClusterConfig()) -> ClusterResult:
    """Best-of-``restarts`` Lloyd runs under correlation distance.

    ``patterns`` may be :class:`SparsityPattern` objects or plain arrays
    (e.g. ``|K|`` values for the raw-value comparison mode).
    Restart ``r`` draws its initial centroids from ``default_rng(seed + r)``.
    """
    X = _as_matrix(patterns)
    if cfg.k > X.shape[0]:
        raise ClusterError(f"k={cfg.k} exceeds the number of patterns ({X.shape[0]})")
    Z, const = standardize(X)
    best = None
    for r in range(cfg.restarts):
        rng = np.random.default_rng(cfg.seed + r)
        out = _lloyd(Z, const, cfg.k, rng, cfg.max_iterations)
        if best is None or out[2] < best[2] - 1e-12:
            best = out
    assign, C, inertia, history = best
    return ClusterResult(assign, C, inertia, cfg.k, cfg.seed, history)


def misclassification_rate(assignment: Sequence[int], labels: Sequence[Hashable]) -> float:
    """Smallest error fraction over bijections between clusters and labels.

    When the two sets differ in size, unmatched clusters count as wrong.
    """
    assignment = np.asarray(
        assignment.assignment if isinstance(assignment, ClusterResult) else assignment
    )
    labels = list(labels)
    if len(labels) != assignment.size:
        raise ClusterError(f"{assignment.size} assignments but {len(labels)} labels")
    if not labels:
        raise ClusterError("no labels")
    clusters = sorted(set(assignment.tolist()))
    names = sorted(set(labels), key=str)
    lab_idx = np.array([names.index(x) for x in labels])
    cl_idx = np.array([clusters.index(c) for c in assignment.tolist()])
    conf = np.zeros((len(clusters), len(names)), dtype=int)
    np.add.at(conf, (cl_idx, lab_idx), 1)

    n = assignment.size
    m = max(conf.shape)
    padded = np.zeros((m, m), dtype=int)
    padded[: conf.shape[0], : conf.shape[1]] = conf
    if m <= _EXHAUSTIVE_MAX_K:
        best = max(
            sum(padded[i, p[i]] for i in range(m)) for p in itertools.permutations(range(m))
        )
    else:
        rows, cols = linear_sum_assignment(padded, maximize=True)
        best = int(padded[rows, cols].sum())
    return (n - best) / n

