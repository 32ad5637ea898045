"""Multichannel time series: data model, CSV ingestion, windowing and noise.

Window indices are 1-based and inclusive on both ends, so ``slice_window(ds, 1, 3)``
returns the first three samples.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DT_RTOL = 1e-9


class DataError(ValueError):
    """Dataset content is unusable (non-finite values, no samples, bad shape)."""


class ParseError(DataError):
    """A CSV row could not be parsed."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class FormatError(DataError):
    """The time column is not uniformly sampled."""


class BoundsError(IndexError):
    pass


@dataclass(frozen=True)
class Dataset:
    """Uniformly sampled multichannel real-valued series.

    Parameters
    ----------
    channels : tuple of str
        Unique channel names, one per column of ``values``.
    dt : float
        Sampling interval in seconds.
    values : numpy.ndarray
        Array of shape ``(num_samples, num_channels)``. Stored read-only.
    t0 : float
        Time of the first sample in seconds.
    """

    channels: tuple[str, ...]
    dt: float
    values: np.ndarray
    t0: float = 0.0

    def __post_init__(self) -> None:
        values = np.array(self.values, dtype=float, copy=True)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2:
            raise DataError(f"values must be 2-D, got shape {values.shape}")
        channels = tuple(self.channels)
        if values.shape[0] < 1:
            raise DataError("no samples")
        if values.shape[1] < 1 or values.shape[1] != len(channels):
            raise DataError(
                f"{len(channels)} channel names for {values.shape[1]} value columns"
            )
        if len(set(channels)) != len(channels):
            raise DataError("channel names must be unique")
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise DataError(f"dt must be positive, got {self.dt}")
        if not np.all(np.isfinite(values)):
            raise DataError("values contain non-finite entries")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "dt", float(self.dt))
        object.__setattr__(self, "t0", float(self.t0))

    @property
    def num_samples(self) -> int:
        return self.values.shape[0]

    @property
    def num_channels(self) -> int:
        return self.values.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.num_samples)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.channels.index(name)]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.channels == other.channels
            and self.dt == other.dt
            and self.t0 == other.t0
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Event:
    time: float
    label: str
    description: str = ""


@dataclass(frozen=True)
class EventLog:
    """Time-stamped ground truth events. Times strictly increase."""

    events: tuple[Event, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        events = tuple(self.events)
        for ev in events:
            if not ev.label:
                raise DataError("event labels must be non-empty")
        for a, b in zip(events, events[1:]):
            if not b.time > a.time:
                raise DataError(f"event times must strictly increase ({a.time} -> {b.time})")
        object.__setattr__(self, "events", events)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def label_at(self, time: float, initial: str = "initial") -> str:
        """Label of the last event at or before ``time``."""
        label = initial
        for ev in self.events:
            if ev.time <= time:
                label = ev.label
            else:
                break
        return label

    def to_json(self) -> list[dict]:
        return [{"time": e.time, "label": e.label, "description": e.description} for e in self.events]

    @classmethod
    def from_json(cls, items: Sequence[dict]) -> "EventLog":
        return cls(tuple(Event(float(d["time"]), str(d["label"]), str(d.get("description", ""))) for d in items))


def load_csv(path: str | Path) -> Dataset:
    """Read a ``t,<ch1>,<ch2>,...`` CSV file into a :class:`Dataset`.

    The sampling interval is inferred from the time column, which must be
    uniform to within a relative tolerance of 1e-9. Leading lines starting
    with ``#`` are treated as comments.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        lines = fh.readlines()
    skip = 0
    while skip < len(lines) and lines[skip].startswith("#"):
        skip += 1
    reader = csv.reader(lines[skip:])
    try:
        header = next(reader)
    except StopIteration:
        raise DataError("no samples") from None
    header = [h.strip() for h in header]
    if len(header) < 2:
        raise ParseError("header needs a time column and at least one channel", skip + 1)
    width = len(header)
    rows = []
    for line_no, row in enumerate(reader, start=skip + 2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != width:
            raise ParseError(f"expected {width} fields, got {len(row)}", line_no)
        try:
            parsed = [float(c) for c in row]
        except ValueError as exc:
            raise ParseError(str(exc), line_no) from None
        if not all(math.isfinite(v) for v in parsed):
            raise DataError(f"line {line_no}: non-finite value")
        rows.append(parsed)
    if not rows:
        raise DataError("no samples")
    data = np.asarray(rows, dtype=float)
    t = data[:, 0]
    if len(t) == 1:
        # a single sample carries no spacing information
        dt = 1.0
    else:
        steps = np.diff(t)
        dt = float(steps[0])
        if dt <= 0:
            raise FormatError("time column must be increasing")
        if not np.allclose(steps, dt, rtol=DT_RTOL, atol=0.0):
            bad = int(np.argmax(~np.isclose(steps, dt, rtol=DT_RTOL, atol=0.0)))
            raise FormatError(
                f"non-uniform dt: step {steps[bad]!r} at row {bad + 2} differs from {dt!r}"
            )
    return Dataset(tuple(header[1:]), dt, data[:, 1:], t0=float(t[0]))


def save_csv(ds: Dataset, path: str | Path, comments: Sequence[str] = ()) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        for c in comments:
            fh.write(f"# {c}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t", *ds.channels])
        for t, row in zip(ds.times, ds.values):
            writer.writerow([repr(float(t)), *(repr(float(v)) for v in row)])


def slice_window(ds: Dataset, t1: int, t2: int) -> Dataset:
    """Samples ``t1..t2`` (1-based, inclusive)."""
    if not (1 <= t1 <= t2 <= ds.num_samples):
        raise BoundsError(f"window [{t1}, {t2}] outside 1..{ds.num_samples}")
    return Dataset(
        ds.channels, ds.dt, ds.values[t1 - 1 : t2], t0=ds.t0 + (t1 - 1) * ds.dt
    )


def add_noise(
    ds: Dataset,
    per_channel_magnitude: Sequence[float],
    seed: int,
    kinds: Sequence[str] | None = None,
) -> Dataset:
    """Add zero-mean Gaussian measurement noise.

    ``kinds`` selects per channel how the magnitude is read: ``"relative"``
    (standard deviation ``m * |value|``, the default) or ``"absolute"``
    (standard deviation ``m`` in the channel's own units).
    """
    mags = np.asarray(per_channel_magnitude, dtype=float)
    if mags.shape != (ds.num_channels,):
        raise ValueError(
            f"expected {ds.num_channels} magnitudes, got {mags.size}"
        )
    if np.any(mags < 0) or not np.all(np.isfinite(mags)):
        raise ValueError("noise magnitudes must be finite and non-negative")
    if kinds is None:
        kinds = ["relative"] * ds.num_channels
    if len(kinds) != ds.num_channels:
        raise ValueError(f"expected {ds.num_channels} channel kinds, got {len(kinds)}")
    unknown = set(kinds) - {"relative", "absolute"}
    if unknown:
        raise ValueError(f"unknown channel kind(s): {sorted(unknown)}")
    relative = np.array([k == "relative" for k in kinds])
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(ds.values.shape)
    sigma = np.where(relative, mags * np.abs(ds.values), mags)
    return Dataset(ds.channels, ds.dt, ds.values + sigma * z, t0=ds.t0)
