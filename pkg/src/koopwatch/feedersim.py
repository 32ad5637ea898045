"""Desk-scale radial feeder simulator with battery storage and Volt/VAR control.

Power flow uses the LinDistFlow approximation on a balanced single-phase
equivalent. All powers, impedances and voltages are per-unit on the system
base. Each simulated step perturbs the loads, applies scripted events, and
iterates power flow against the local Volt/VAR controllers until the voltages
settle. Measured buses report voltage magnitude (``vm_<bus>``, pu) and a
linearised angle (``va_<bus>``, degrees).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .timeseries import Dataset, Event, EventLog, add_noise

VV_DAMPING = 0.5
VV_TOL = 1e-8
VV_MAX_ITER = 100


class FeederError(ValueError):
    pass


class InfeasibleError(ArithmeticError):
    """LinDistFlow produced a non-positive squared voltage."""


class ConvergenceError(RuntimeError):
    def __init__(self, bus: int, step: int, iterations: int):
        super().__init__(
            f"Volt/VAR fixed point did not converge at step {step} "
            f"(bus {bus} still moving after {iterations} iterations)"
        )
        self.bus = bus
        self.step = step


@dataclass(frozen=True)
class Line:
    from_bus: int
    to_bus: int
    r: float
    x: float


@dataclass(frozen=True)
class FeederModel:
    """Radial feeder rooted at bus 0 (the substation).

    ``p_load`` / ``q_load`` are per-bus base loads indexed by bus number.
    """

    p_load: tuple[float, ...]
    q_load: tuple[float, ...]
    lines: tuple[Line, ...]
    source_voltage: float = 1.0
    parent: tuple[int, ...] = field(init=False, repr=False)
    order: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        n = len(self.p_load)
        if n < 2 or len(self.q_load) != n:
            raise FeederError("need matching p/q loads for at least two buses")
        if len(self.lines) != n - 1:
            raise FeederError(f"a tree on {n} buses has {n - 1} lines, got {len(self.lines)}")
        if not 0 < self.source_voltage < 2:
            raise FeederError("source voltage must be in (0, 2) pu")
        adj: dict[int, list[int]] = {b: [] for b in range(n)}
        for ln in self.lines:
            if not (ln.r > 0 and ln.x > 0):
                raise FeederError(f"line {ln.from_bus}-{ln.to_bus}: impedances must be positive")
            for b in (ln.from_bus, ln.to_bus):
                if not 0 <= b < n:
                    raise FeederError(f"line references unknown bus {b}")
            adj[ln.from_bus].append(ln.to_bus)
            adj[ln.to_bus].append(ln.from_bus)
        parent = [-1] * n
        seen = {0}
        order = [0]
        queue = deque([0])
        while queue:
            b = queue.popleft()
            for c in adj[b]:
                if c not in seen:
                    seen.add(c)
                    parent[c] = b
                    order.append(c)
                    queue.append(c)
        if len(seen) != n:
            raise FeederError("feeder graph is not connected")
        object.__setattr__(self, "parent", tuple(parent))
        object.__setattr__(self, "order", tuple(order))
        object.__setattr__(self, "p_load", tuple(float(v) for v in self.p_load))
        object.__setattr__(self, "q_load", tuple(float(v) for v in self.q_load))
        rx = {}
        for ln in self.lines:
            child = ln.to_bus if parent[ln.to_bus] == ln.from_bus else ln.from_bus
            rx[child] = (ln.r, ln.x)
        object.__setattr__(self, "_rx", rx)

    @property
    def num_buses(self) -> int:
        return len(self.p_load)

    def branch_impedance(self, child: int) -> tuple[float, float]:
        return self._rx[child]  # type: ignore[attr-defined]


def lindistflow(
    feeder: FeederModel,
    p_net: np.ndarray,
    q_net: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Voltage magnitudes (pu) and angles (degrees) for net bus loads.

    ``p_net`` / ``q_net`` are consumption minus injection at each bus.
    """
    n = feeder.num_buses
    P = np.array(p_net, dtype=float)
    Q = np.array(q_net, dtype=float)
    # subtree sums, leaves first
    for b in reversed(feeder.order[1:]):
        par = feeder.parent[b]
        P[par] += P[b]
        Q[par] += Q[b]
    v2 = np.empty(n)
    theta = np.empty(n)
    v2[0] = feeder.source_voltage**2
    theta[0] = 0.0
    for b in feeder.order[1:]:
        par = feeder.parent[b]
        r, x = feeder.branch_impedance(b)
        v2[b] = v2[par] - 2.0 * (r * P[b] + x * Q[b])
        if v2[b] <= 0:
            raise InfeasibleError(f"squared voltage {v2[b]:.4g} <= 0 at bus {b}")
        theta[b] = theta[par] - (x * P[b] - r * Q[b]) / v2[par]
    return np.sqrt(v2), np.degrees(theta)


def lindistflow_solve(feeder: FeederModel, injections: Sequence[tuple[float, float]]) -> np.ndarray:
    """Bus voltage magnitudes with ``injections[b] = (p, q)`` offsetting base load."""
    inj = np.asarray(injections, dtype=float).reshape(feeder.num_buses, 2)
    p_net = np.asarray(feeder.p_load) - inj[:, 0]
    q_net = np.asarray(feeder.q_load) - inj[:, 1]
    return lindistflow(feeder, p_net, q_net)[0]


# -- Volt/VAR -----------------------------------------------------------------


class InvalidShiftError(ValueError):
    pass


@dataclass(frozen=True)
class VoltVarCurve:
    """Piecewise-linear Q(V): inject below the deadband, absorb above it.

    The four breakpoints are the stored values plus ``shift``.
    """

    v_sat_low: float = 0.92
    v_db_low: float = 0.95
    v_db_high: float = 1.03
    v_sat_high: float = 1.07
    q_max: float = 0.1
    shift: float = 0.0

    def __post_init__(self) -> None:
        a, b, c, d = self.breakpoints()
        if not (a < b < c < d):
            raise InvalidShiftError(f"breakpoints out of order: {a}, {b}, {c}, {d}")
        if self.q_max < 0:
            raise ValueError("q_max must be non-negative")

    def breakpoints(self) -> tuple[float, float, float, float]:
        s = self.shift
        return (self.v_sat_low + s, self.v_db_low + s, self.v_db_high + s, self.v_sat_high + s)


def vv_response(curve: VoltVarCurve, v):
    """Reactive power for local voltage ``v``; positive injects into the grid."""
    a, b, c, d = curve.breakpoints()
    q = np.interp(v, [a, b, c, d], [curve.q_max, 0.0, 0.0, -curve.q_max])
    return float(q) if np.ndim(q) == 0 else q


def shift_curve(curve: VoltVarCurve, delta: float) -> VoltVarCurve:
    try:
        return replace(curve, shift=curve.shift + delta)
    except InvalidShiftError as exc:
        raise InvalidShiftError(f"shift by {delta} breaks ordering: {exc}") from None


# -- storage and scenarios ----------------------------------------------------


@dataclass
class Bess:
    bus: int
    p_rated: float
    q_rated: float
    rate_fraction: float = 0.0
    curve: Optional[VoltVarCurve] = None
    measured: bool = True

    def __post_init__(self) -> None:
        if abs(self.rate_fraction) > 1:
            raise ValueError(f"|rate_fraction| must be <= 1, got {self.rate_fraction}")


@dataclass(frozen=True)
class Action:
    """One device change. ``bess`` is an index into the BESS list or ``None`` for all.

    ``kind`` is ``"set_rate_fraction"`` (``value``) or ``"set_deadband"``
    (``breakpoints``: any of v_sat_low, v_db_low, v_db_high, v_sat_high), or
    ``"shift_curve"`` (``value`` added to the curve shift).
    """

    kind: str
    bess: Optional[int] = None
    value: float = 0.0
    breakpoints: tuple[tuple[str, float], ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("set_rate_fraction", "set_deadband", "shift_curve"):
            raise ValueError(f"unknown action kind {self.kind!r}")


@dataclass(frozen=True)
class ScriptEvent:
    time: float
    label: str
    actions: tuple[Action, ...]
    description: str = ""


@dataclass(frozen=True)
class ScenarioScript:
    duration: float
    dt: float = 0.25
    load_fluctuation: float = 0.005
    noise_vm: float = 1e-4
    noise_va: float = 0.01
    events: tuple[ScriptEvent, ...] = ()
    initial_label: str = "initial"

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.duration >= self.dt:
            raise ValueError("duration must cover at least one step")
        for ev in self.events:
            if not 0 <= ev.time <= self.duration:
                raise ValueError(f"event at {ev.time}s outside [0, {self.duration}]")

    @property
    def num_steps(self) -> int:
        return int(round(self.duration / self.dt))


def _apply(action: Action, fleet: list[Bess]) -> None:
    targets = range(len(fleet)) if action.bess is None else [action.bess]
    for i in targets:
        unit = fleet[i]
        if action.kind == "set_rate_fraction":
            if abs(action.value) > 1:
                raise ValueError(f"rate fraction {action.value} outside [-1, 1]")
            unit.rate_fraction = action.value
        elif unit.curve is None:
            raise ValueError(f"BESS {i} has no Volt/VAR curve to modify")
        elif action.kind == "set_deadband":
            unit.curve = replace(unit.curve, **dict(action.breakpoints))
        else:
            unit.curve = shift_curve(unit.curve, action.value)


def _settle(
    feeder: FeederModel,
    fleet: list[Bess],
    p_load: np.ndarray,
    q_load: np.ndarray,
    q_dev: np.ndarray,
    step: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Damped fixed-point iteration between power flow and the Volt/VAR curves."""
    p_net = p_load.copy()
    for unit in fleet:
        p_net[unit.bus] -= unit.rate_fraction * unit.p_rated
    buses = np.array([u.bus for u in fleet], dtype=int)
    controlled = np.array([u.curve is not None for u in fleet])
    q = q_dev.copy()
    v_prev = None
    for it in range(VV_MAX_ITER):
        q_net = q_load.copy()
        np.subtract.at(q_net, buses, q)
        vm, va = lindistflow(feeder, p_net, q_net)
        if not controlled.any():
            return vm, va, q
        if v_prev is not None:
            moved = np.abs(vm - v_prev)
            if moved.max() < VV_TOL:
                return vm, va, q
        v_prev = vm
        for k, unit in enumerate(fleet):
            if unit.curve is None:
                continue
            target = vv_response(unit.curve, vm[unit.bus])
            target = float(np.clip(target, -unit.q_rated, unit.q_rated))
            q[k] += VV_DAMPING * (target - q[k])
    worst = int(np.argmax(moved)) if v_prev is not None else 0
    raise ConvergenceError(worst, step, VV_MAX_ITER)


def run_scenario(
    feeder: FeederModel,
    bess_list: Sequence[Bess],
    script: ScenarioScript,
    seed: int,
) -> tuple[Dataset, EventLog]:
    """Simulate the script; returns noisy PMU channels and the applied events."""
    fleet = [replace(b) for b in bess_list]
    for b in fleet:
        if not 0 <= b.bus < feeder.num_buses:
            raise FeederError(f"BESS at unknown bus {b.bus}")
    measured = [b.bus for b in fleet if b.measured]
    measured = list(dict.fromkeys(measured))
    if not measured:
        raise FeederError("no measured BESS buses")

    ss = np.random.SeedSequence(seed)
    load_rng, noise_seed = np.random.default_rng(ss.spawn(1)[0]), int(ss.generate_state(1)[0])

    n = script.num_steps
    base_p = np.asarray(feeder.p_load)
    base_q = np.asarray(feeder.q_load)
    pending = sorted(script.events, key=lambda e: e.time)
    applied: list[Event] = []
    q_dev = np.zeros(len(fleet))
    vm_out = np.empty((n, len(measured)))
    va_out = np.empty((n, len(measured)))
    ev_i = 0
    for k in range(n):
        t = k * script.dt
        while ev_i < len(pending) and pending[ev_i].time <= t + 1e-9 * script.dt:
            ev = pending[ev_i]
            for action in ev.actions:
                _apply(action, fleet)
            applied.append(Event(ev.time, ev.label, ev.description))
            ev_i += 1
        if script.load_fluctuation > 0:
            mult = 1.0 + script.load_fluctuation * load_rng.standard_normal((2, base_p.size))
        else:
            mult = np.ones((2, base_p.size))
        vm, va, q_dev = _settle(feeder, fleet, base_p * mult[0], base_q * mult[1], q_dev, k)
        vm_out[k] = vm[measured]
        va_out[k] = va[measured]

    channels = []
    cols = []
    for j, b in enumerate(measured):
        channels += [f"vm_{b}", f"va_{b}"]
        cols += [vm_out[:, j], va_out[:, j]]
    clean = Dataset(tuple(channels), script.dt, np.column_stack(cols), t0=0.0)
    mags = [script.noise_vm, script.noise_va] * len(measured)
    kinds = ["relative", "absolute"] * len(measured)
    noisy = add_noise(clean, mags, noise_seed, kinds)
    return noisy, EventLog(tuple(applied))
