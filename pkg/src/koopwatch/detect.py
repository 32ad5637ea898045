"""Sparsity patterns of Koopman estimates and change flagging."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .koopman import KoopmanEstimate, NumericalError


@dataclass(frozen=True)
class SparsityPattern:
    bits: np.ndarray
    source_window: tuple[int, int] = (0, 0)
    threshold_used: float = 0.0
    end_time: float | None = None

    def __post_init__(self) -> None:
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or not np.isin(bits, (0, 1)).all():
            raise ValueError("pattern bits must be a 2-D 0/1 array")
        bits = bits.astype(np.uint8)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def nnz(self) -> int:
        return int(self.bits.sum())

    def to_json(self) -> dict:
        return {
            "window": list(self.source_window),
            "end_time": self.end_time,
            "threshold": self.threshold_used,
            "shape": list(self.bits.shape),
            "bits": "".join("1" if b else "0" for b in self.bits.ravel()),
        }

    @classmethod
    def from_json(cls, d: dict) -> "SparsityPattern":
        bits = np.frombuffer(d["bits"].encode("ascii"), dtype=np.uint8) - ord("0")
        return cls(
            bits.reshape(tuple(d["shape"])),
            tuple(d["window"]),
            float(d["threshold"]),
            d.get("end_time"),
        )


@dataclass(frozen=True)
class DetectConfig:
    """``binarize_threshold`` is absolute, or a fraction of ``max|K|`` per
    estimate when ``binarize_mode == "relative"``; ``change_threshold`` is the
    normalised Hamming distance that raises a flag."""

    binarize_threshold: float = 0.01
    binarize_mode: str = "relative"
    change_threshold: float = 0.0005

    def __post_init__(self) -> None:
        if not self.binarize_threshold > 0:
            raise ValueError("binarize_threshold must be positive")
        if self.binarize_mode not in ("relative", "absolute"):
            raise ValueError(f"unknown binarize mode {self.binarize_mode!r}")
        if not 0 < self.change_threshold <= 1:
            raise ValueError("change_threshold must lie in (0, 1]")

    def tau_for(self, K: np.ndarray) -> float:
        if self.binarize_mode == "absolute":
            return self.binarize_threshold
        peak = float(np.abs(K).max()) if K.size else 0.0
        # an all-zero K stays all-zero under any positive cut
        return self.binarize_threshold * peak if peak > 0 else self.binarize_threshold


@dataclass(frozen=True)
class IncidentFlag:
    window_index: int
    time: float
    distance: float
    note: str = ""
    stabilized_window: int | None = None

    def to_json(self) -> dict:
        return {
            "window_index": self.window_index,
            "time": self.time,
            "distance": self.distance,
            "stabilized_window": self.stabilized_window,
        }


def binarize(k: KoopmanEstimate | np.ndarray, tau: float) -> SparsityPattern:
    """``1`` where ``|K| >= tau``."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    K = k.K if isinstance(k, KoopmanEstimate) else np.asarray(k, dtype=float)
    if not np.all(np.isfinite(K)):
        raise NumericalError("K contains non-finite entries")
    window = k.window if isinstance(k, KoopmanEstimate) else (0, 0)
    end = k.end_time if isinstance(k, KoopmanEstimate) else None
    return SparsityPattern((np.abs(K) >= tau).astype(np.uint8), window, float(tau), end)


def pattern_distance(p: SparsityPattern, q: SparsityPattern) -> float:
    """Fraction of differing entries (normalised Hamming distance)."""
    if p.bits.shape != q.bits.shape:
        raise ValueError(f"pattern shapes differ: {p.bits.shape} vs {q.bits.shape}")
    return float(np.count_nonzero(p.bits != q.bits)) / p.bits.size


def patterns_for(estimates: Sequence[KoopmanEstimate], cfg: DetectConfig) -> list[SparsityPattern]:
    return [binarize(e, cfg.tau_for(e.K)) for e in estimates]


def consecutive_distances(patterns: Sequence[SparsityPattern]) -> list[float]:
    return [pattern_distance(a, b) for a, b in zip(patterns, patterns[1:])]


def detect_incidents(
    estimates: Sequence[KoopmanEstimate], cfg: DetectConfig = DetectConfig()
) -> list[IncidentFlag]:
    """Flag every window whose pattern moved at least ``change_threshold``
    away from its predecessor's.

    Each flag also names the first later window whose change falls back below
    the threshold (``stabilized_window``), or ``None`` if the run ends first.
    """
    if len(estimates) < 2:
        raise ValueError("need at least two estimates")
    pats = patterns_for(estimates, cfg)
    dist = consecutive_distances(pats)
    flags = []
    h = cfg.change_threshold
    for i, d in enumerate(dist):
        if d < h:
            continue
        w = i + 1
        stable = next((j + 1 for j in range(i + 1, len(dist)) if dist[j] < h), None)
        t = estimates[w].end_time
        flags.append(
            IncidentFlag(
                window_index=w,
                time=float(t) if t is not None else float(w),
                distance=d,
                note=f"pattern change {d:.4f} >= {h}",
                stabilized_window=stable,
            )
        )
    return flags
