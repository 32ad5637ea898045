"""Built-in scenarios and JSON (de)serialisation of simulator inputs.

Presets scale the two case studies down to an 8-bus feeder:

``case1``
    Two storage units idle for 300 s, then discharging at half rate.
``case2``
    Three units on Volt/VAR control; the lower deadband edge moves
    0.95 -> 0.98 pu at 200 s and 0.98 -> 0.99 pu at 400 s, with the lower
    saturation point following it. The substation is held at 1.008 pu.
``steady``
    The ``case1`` feeder with no events (false-alarm baseline).
"""

from __future__ import annotations

from dataclasses import asdict
from typing import Any

from .feedersim import (
    Action,
    Bess,
    FeederModel,
    Line,
    ScenarioScript,
    ScriptEvent,
    VoltVarCurve,
)

# (from, to, r, x) in pu
_LINES = [
    (0, 1, 0.004, 0.008),
    (1, 2, 0.005, 0.010),
    (2, 3, 0.006, 0.010),
    (3, 4, 0.006, 0.012),
    (2, 5, 0.008, 0.010),
    (5, 6, 0.008, 0.012),
    (4, 7, 0.007, 0.010),
]
_P_LOAD = [0.0, 0.20, 0.24, 0.20, 0.24, 0.16, 0.20, 0.20]
_PF_RATIO = 0.4  # q = 0.4 p

CASE2_DB_WIDTH = 0.05  # saturation sits this far below the lower deadband edge
CASE2_SOURCE_VOLTAGE = 1.008  # substation set point; keeps both deadband moves visible


def default_feeder(source_voltage: float = 1.0) -> FeederModel:
    return FeederModel(
        p_load=tuple(_P_LOAD),
        q_load=tuple(_PF_RATIO * p for p in _P_LOAD),
        lines=tuple(Line(*ln) for ln in _LINES),
        source_voltage=source_voltage,
    )


def _case2_curve(db_low: float) -> VoltVarCurve:
    return VoltVarCurve(
        v_sat_low=db_low - CASE2_DB_WIDTH,
        v_db_low=db_low,
        v_db_high=1.03,
        v_sat_high=1.07,
        q_max=0.5,
    )


def _deadband_event(time: float, db_low: float, label: str) -> ScriptEvent:
    bp = (("v_sat_low", db_low - CASE2_DB_WIDTH), ("v_db_low", db_low))
    return ScriptEvent(
        time,
        label,
        (Action("set_deadband", None, breakpoints=bp),),
        f"lower deadband edge -> {db_low} pu",
    )


def build_preset(name: str, **overrides: Any) -> tuple[FeederModel, list[Bess], ScenarioScript]:
    """Return ``(feeder, bess_list, script)``; ``overrides`` patch the script."""
    feeder = default_feeder()
    if name in ("case1", "steady"):
        fleet = [Bess(4, 0.2, 0.1), Bess(6, 0.2, 0.1)]
        events: tuple[ScriptEvent, ...] = ()
        if name == "case1":
            events = (
                ScriptEvent(
                    300.0,
                    "discharge_50",
                    (Action("set_rate_fraction", None, 0.5),),
                    "all units discharge at 50% of rating",
                ),
            )
        script = ScenarioScript(duration=600.0, events=events, initial_label="idle")
    elif name == "case2":
        feeder = default_feeder(CASE2_SOURCE_VOLTAGE)
        fleet = [Bess(b, 0.2, 0.5, curve=_case2_curve(0.95)) for b in (4, 6, 7)]
        script = ScenarioScript(
            duration=900.0,
            events=(
                _deadband_event(200.0, 0.98, "deadband_098"),
                _deadband_event(400.0, 0.99, "deadband_099"),
            ),
            initial_label="deadband_095",
        )
    else:
        raise KeyError(f"unknown preset {name!r} (choose case1, case2, steady)")
    if overrides:
        fields = asdict(script)
        fields["events"] = script.events
        fields.update(overrides)
        script = ScenarioScript(**fields)
    return feeder, fleet, script


PRESETS = ("case1", "case2", "steady")


# -- JSON ---------------------------------------------------------------------


class ConfigError(ValueError):
    pass


def _req(d: dict, key: str, where: str):
    if key not in d:
        raise ConfigError(f"missing field '{where}.{key}'")
    return d[key]


def feeder_from_dict(d: dict) -> FeederModel:
    lines = tuple(
        Line(int(_req(ln, "from", "feeder.lines[]")), int(_req(ln, "to", "feeder.lines[]")),
             float(_req(ln, "r", "feeder.lines[]")), float(_req(ln, "x", "feeder.lines[]")))
        for ln in _req(d, "lines", "feeder")
    )
    return FeederModel(
        p_load=tuple(float(v) for v in _req(d, "p_load", "feeder")),
        q_load=tuple(float(v) for v in _req(d, "q_load", "feeder")),
        lines=lines,
        source_voltage=float(d.get("source_voltage", 1.0)),
    )


def feeder_to_dict(f: FeederModel) -> dict:
    return {
        "p_load": list(f.p_load),
        "q_load": list(f.q_load),
        "lines": [{"from": ln.from_bus, "to": ln.to_bus, "r": ln.r, "x": ln.x} for ln in f.lines],
        "source_voltage": f.source_voltage,
    }


def bess_from_dict(d: dict) -> Bess:
    curve = d.get("curve")
    return Bess(
        bus=int(_req(d, "bus", "bess[]")),
        p_rated=float(_req(d, "p_rated", "bess[]")),
        q_rated=float(d.get("q_rated", 0.0)),
        rate_fraction=float(d.get("rate_fraction", 0.0)),
        curve=VoltVarCurve(**curve) if curve else None,
        measured=bool(d.get("measured", True)),
    )


def bess_to_dict(b: Bess) -> dict:
    return {
        "bus": b.bus,
        "p_rated": b.p_rated,
        "q_rated": b.q_rated,
        "rate_fraction": b.rate_fraction,
        "curve": asdict(b.curve) if b.curve else None,
        "measured": b.measured,
    }


def _action_from_dict(d: dict) -> Action:
    return Action(
        kind=str(_req(d, "kind", "scenario.events[].actions[]")),
        bess=d.get("bess"),
        value=float(d.get("value", 0.0)),
        breakpoints=tuple(sorted((str(k), float(v)) for k, v in d.get("breakpoints", {}).items())),
    )


def script_from_dict(d: dict) -> ScenarioScript:
    events = tuple(
        ScriptEvent(
            time=float(_req(e, "time", "scenario.events[]")),
            label=str(_req(e, "label", "scenario.events[]")),
            actions=tuple(_action_from_dict(a) for a in _req(e, "actions", "scenario.events[]")),
            description=str(e.get("description", "")),
        )
        for e in d.get("events", [])
    )
    return ScenarioScript(
        duration=float(_req(d, "duration", "scenario")),
        dt=float(d.get("dt", 0.25)),
        load_fluctuation=float(d.get("load_fluctuation", 0.005)),
        noise_vm=float(d.get("noise_vm", 1e-4)),
        noise_va=float(d.get("noise_va", 0.01)),
        events=events,
        initial_label=str(d.get("initial_label", "initial")),
    )


def script_to_dict(s: ScenarioScript) -> dict:
    return {
        "duration": s.duration,
        "dt": s.dt,
        "load_fluctuation": s.load_fluctuation,
        "noise_vm": s.noise_vm,
        "noise_va": s.noise_va,
        "initial_label": s.initial_label,
        "events": [
            {
                "time": e.time,
                "label": e.label,
                "description": e.description,
                "actions": [
                    {"kind": a.kind, "bess": a.bess, "value": a.value, "breakpoints": dict(a.breakpoints)}
                    for a in e.actions
                ],
            }
            for e in s.events
        ],
    }
