"""Command-line pipeline: ``simulate -> detect -> cluster -> report``.

Every stage reads one JSON run config and hands off through files in the
output directory::

    dataset.csv     simulated (or copied) measurements
    events.json     ground-truth event log
    estimates.json  one K per window plus run metadata
    patterns.json   binarised K and consecutive distances
    flags.jsonl     one incident flag per line (empty if none)
    clusters.json   k-means assignment and misclassification rates

Each file carries the SHA-256 of the resolved config (``config_hash``) and no
timestamps, so identical configs give byte-identical outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .cluster import ClusterConfig, kmeans, misclassification_rate
from .detect import DetectConfig, SparsityPattern, consecutive_distances, detect_incidents, patterns_for
from .feedersim import run_scenario
from .kernel import KernelConfig, augment, resolve_sigma
from .koopman import SolverConfig, estimate_sequence, generate_centers
from .presets import (
    PRESETS,
    ConfigError,
    bess_from_dict,
    build_preset,
    feeder_from_dict,
    script_from_dict,
)
from .timeseries import EventLog, load_csv, save_csv, slice_window

log = logging.getLogger("koopwatch")

class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


# -- config -------------------------------------------------------------------


@dataclass
class RunConfig:
    """Resolved run settings; :meth:`from_dict` fills in every default."""

    scenario: dict
    seed: int = 0
    out: str = "koopwatch_out"
    kernel: dict = field(default_factory=dict)
    dictionary: dict = field(default_factory=dict)
    window: dict = field(default_factory=dict)
    alpha: float = 0.1
    beta: float = 0.0
    solver: dict = field(default_factory=dict)
    detect: dict = field(default_factory=dict)
    cluster: dict = field(default_factory=dict)

    _SECTIONS = {
        "kernel": {"sigma": "median", "pairs": None, "include_raw": False, "lag": 1,
                   "calibration_seconds": None},
        "dictionary": {"D": 100, "scale": 0.35, "reference": "rms", "seed": None},
        "window": {"T": 100.0, "stride": 25.0},
        "solver": {"max_iterations": 5000, "tolerance": 1e-8, "step_rule": "fixed",
                   "warm_start": True},
        "detect": {"binarize_threshold": 0.01, "binarize_mode": "relative",
                   "change_threshold": 0.0005},
        "cluster": {"k": None, "restarts": 10, "max_iterations": 300, "seed": None,
                    "use_raw": False, "labels": None},
    }

    @classmethod
    def from_dict(cls, d: dict, seed: int | None = None, out: str | None = None) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {"scenario", "seed", "out", "alpha", "beta", *cls._SECTIONS}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown field '{unknown[0]}'")
        if "scenario" not in d:
            raise ConfigError("missing field 'scenario'")
        scen = d["scenario"]
        if not isinstance(scen, dict):
            raise ConfigError("field 'scenario' must be an object")
        if not ({"preset", "csv", "feeder"} & set(scen)):
            raise ConfigError("missing field 'scenario.preset' (or 'scenario.csv' / 'scenario.feeder')")
        if "preset" in scen and scen["preset"] not in PRESETS:
            raise ConfigError(f"field 'scenario.preset': unknown preset {scen['preset']!r}")
        sections = {}
        for name, defaults in cls._SECTIONS.items():
            given = d.get(name, {}) or {}
            bad = sorted(set(given) - set(defaults))
            if bad:
                raise ConfigError(f"unknown field '{name}.{bad[0]}'")
            sections[name] = {**defaults, **given}
        cfg = cls(
            scenario=scen,
            seed=int(d.get("seed", 0) if seed is None else seed),
            out=str(out if out is not None else d.get("out", "koopwatch_out")),
            alpha=float(d.get("alpha", 0.1)),
            beta=float(d.get("beta", 0.0)),
            **sections,
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("field 'alpha'/'beta' must be non-negative")
        if self.window["T"] <= 0 or self.window["stride"] <= 0:
            raise ConfigError("field 'window.T'/'window.stride' must be positive")
        self.kernel_config()
        self.detect_config()
        self.solver_config()
        ClusterConfig(k=self.cluster["k"] or 1, restarts=self.cluster["restarts"],
                      max_iterations=self.cluster["max_iterations"])

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario, "seed": self.seed, "alpha": self.alpha,
            "beta": self.beta, **{k: getattr(self, k) for k in self._SECTIONS},
        }

    @property
    def config_hash(self) -> str:
        # the output directory does not change results, so it is not hashed
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @property
    def dictionary_seed(self) -> int:
        s = self.dictionary["seed"]
        return self.seed if s is None else int(s)

    @property
    def cluster_seed(self) -> int:
        s = self.cluster["seed"]
        return self.seed if s is None else int(s)

    def kernel_config(self, calibration_samples: int | None = None) -> KernelConfig:
        k = self.kernel
        pairs = None if k["pairs"] is None else tuple(tuple(p) for p in k["pairs"])
        sigma = k["sigma"] if isinstance(k["sigma"], (str, int, float)) else tuple(k["sigma"])
        return KernelConfig(sigma=sigma, pairs=pairs, include_raw=bool(k["include_raw"]),
                            lag=int(k["lag"]), calibration_samples=calibration_samples)

    def detect_config(self) -> DetectConfig:
        d = self.detect
        return DetectConfig(float(d["binarize_threshold"]), str(d["binarize_mode"]),
                            float(d["change_threshold"]))

    def solver_config(self) -> SolverConfig:
        s = self.solver
        return SolverConfig(max_iterations=int(s["max_iterations"]),
                            tolerance=float(s["tolerance"]), step_rule=str(s["step_rule"]))


def to_samples(seconds: float, dt: float, name: str) -> int:
    n = seconds / dt
    if abs(n - round(n)) > 1e-9 * max(1.0, abs(n)) or round(n) < 1:
        raise ConfigError(f"field '{name}' = {seconds} s is not a whole number of samples at dt={dt}")
    return int(round(n))


def load_config(path: str | Path, seed: int | None = None, out: str | None = None) -> RunConfig:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {str(path)!r} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return RunConfig.from_dict(d, seed=seed, out=out)


# -- file helpers ---------------------------------------------------------------


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def _read_json(path: Path, stage: str) -> Any:
    if not path.exists():
        raise StageError(stage, f"{path.name} not found in {path.parent} (run the earlier stage first)")
    return json.loads(path.read_text(encoding="utf-8"))


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _events_from_file(path: str) -> tuple[EventLog, str]:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(d, list):
        return EventLog.from_json(d), "initial"
    return EventLog.from_json(d.get("events", [])), str(d.get("initial_label", "initial"))


# -- stages -------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> dict:
    """Generate (or ingest) the dataset and write ``dataset.csv``/``events.json``."""
    out = _out_dir(cfg)
    scen = cfg.scenario
    meta: dict[str, Any] = {"seed": cfg.seed}
    if "csv" in scen:
        ds = load_csv(scen["csv"])
        if scen.get("events"):
            events, initial = _events_from_file(scen["events"])
        else:
            events, initial = EventLog([]), "initial"
        initial = str(scen.get("initial_label", initial))
        meta["source"] = "csv"
    else:
        if "preset" in scen:
            overrides = dict(scen.get("overrides", {}))
            feeder, fleet, script = build_preset(scen["preset"], **overrides)
            meta["source"] = f"preset:{scen['preset']}"
        else:
            feeder = feeder_from_dict(scen["feeder"])
            if "bess" not in scen:
                raise ConfigError("missing field 'scenario.bess'")
            if "script" not in scen:
                raise ConfigError("missing field 'scenario.script'")
            fleet = [bess_from_dict(b) for b in scen["bess"]]
            script = script_from_dict(scen["script"])
            meta["source"] = "custom"
        ds, events = run_scenario(feeder, fleet, script, cfg.seed)
        initial = script.initial_label
    save_csv(ds, out / "dataset.csv", comments=[f"config_hash={cfg.config_hash}"])
    _write_json(out / "events.json", {
        "config_hash": cfg.config_hash,
        "metadata": meta,
        "initial_label": initial,
        "events": events.to_json(),
    })
    log.info("simulate: %d samples x %d channels", ds.num_samples, ds.num_channels)
    return {"samples": ds.num_samples, "channels": ds.num_channels, "events": len(events)}


def _load_dataset(cfg: RunConfig, stage: str):
    path = Path(cfg.out) / "dataset.csv"
    if not path.exists():
        if "csv" in cfg.scenario:
            path = Path(cfg.scenario["csv"])
        else:
            raise StageError(stage, f"dataset.csv not found in {cfg.out} (run simulate first)")
    return load_csv(path)


def cmd_detect(cfg: RunConfig) -> dict:
    """Kernel lift, windowed sparse estimation and pattern-change flagging."""
    out = _out_dir(cfg)
    ds = _load_dataset(cfg, "detect")
    T = to_samples(cfg.window["T"], ds.dt, "window.T")
    stride = to_samples(cfg.window["stride"], ds.dt, "window.stride")
    cal = cfg.kernel["calibration_seconds"]
    cal_n = T + 1 if cal is None else to_samples(cal, ds.dt, "kernel.calibration_seconds")
    if cal_n > ds.num_samples or T + 1 > ds.num_samples:
        raise StageError(
            "detect",
            f"window exceeds data: need {max(cal_n, T + 1)} samples, have {ds.num_samples}",
        )
    kcfg = cfg.kernel_config(calibration_samples=cal_n)
    sigma = resolve_sigma(ds, kcfg)
    aug = augment(ds, kcfg, sigma)
    dictionary = generate_centers(
        slice_window(aug, 1, T + 1),
        int(cfg.dictionary["D"]),
        float(cfg.dictionary["scale"]),
        cfg.dictionary_seed,
        str(cfg.dictionary["reference"]),
    )
    ests = estimate_sequence(
        aug, dictionary, T, stride, cfg.alpha, cfg.beta, cfg.solver_config(),
        warm_start=bool(cfg.solver["warm_start"]),
    )
    capped = sum(not e.converged for e in ests)
    if capped:
        log.info("%d of %d windows stopped at the iteration cap", capped, len(ests))
    dcfg = cfg.detect_config()
    flags = detect_incidents(ests, dcfg) if len(ests) >= 2 else []
    pats = patterns_for(ests, dcfg)
    dist = consecutive_distances(pats)

    h = cfg.config_hash
    meta = {
        "version": __version__,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "dictionary_seed": cfg.dictionary_seed,
        "dt": ds.dt,
        "t0": ds.t0,
        "T_samples": T,
        "stride_samples": stride,
        "calibration_samples": cal_n,
        "windows_at_iteration_cap": capped,
        "channels": list(aug.channels),
        "sigma": [float(s) for s in sigma],
        "centers": dictionary.centers.tolist(),
    }
    _write_json(out / "estimates.json", {
        "config_hash": h, "metadata": meta, "estimates": [e.to_json() for e in ests],
    })
    _write_json(out / "patterns.json", {
        "config_hash": h,
        "dt": ds.dt,
        "t0": ds.t0,
        "change_threshold": dcfg.change_threshold,
        "distances": dist,
        "patterns": [p.to_json() for p in pats],
    })
    with (out / "flags.jsonl").open("w", encoding="utf-8") as fh:
        for f in flags:
            fh.write(json.dumps({"config_hash": h, **f.to_json()}, sort_keys=True) + "\n")
    for f in flags:
        log.info("flag at window %d (t=%.2f s, distance %.4f)", f.window_index, f.time, f.distance)
    return {"windows": len(ests), "flags": [f.to_json() for f in flags]}


def window_labels(
    patterns: Sequence[SparsityPattern], dt: float, t0: float, events: EventLog, initial: str
) -> tuple[list[str], list[bool]]:
    """Scenario active at each window's end, and whether the window straddles
    an event (first sample before it, last sample at or after it)."""
    labels, trans = [], []
    for p in patterns:
        t1, t2 = p.source_window
        start = t0 + (t1 - 1) * dt
        end = t0 + (t2 - 1) * dt
        labels.append(events.label_at(end, initial))
        trans.append(any(start < e.time <= end for e in events))
    return labels, trans


def cmd_cluster(cfg: RunConfig) -> dict:
    """k-means over the stored patterns, scored against the event labels."""
    out = _out_dir(cfg)
    pj = _read_json(out / "patterns.json", "cluster")
    ej = _read_json(out / "events.json", "cluster")
    pats = [SparsityPattern.from_json(p) for p in pj["patterns"]]
    events = EventLog.from_json(ej["events"])
    labels, trans = window_labels(pats, pj["dt"], pj["t0"], events, ej.get("initial_label", "initial"))
    if cfg.cluster["labels"] is not None:
        given = cfg.cluster["labels"]
        if isinstance(given, str):
            given = json.loads(Path(given).read_text(encoding="utf-8"))
        if len(given) != len(pats):
            raise StageError("cluster", f"label count {len(given)} does not match pattern count {len(pats)}")
        labels = [str(x) for x in given]
    k = cfg.cluster["k"] or len(set(labels))
    if cfg.cluster["use_raw"]:
        ej_est = _read_json(out / "estimates.json", "cluster")
        items = [np.abs(np.asarray(e["K"]).reshape(e["shape"])) for e in ej_est["estimates"]]
        if len(items) != len(pats):
            raise StageError("cluster", f"estimate count {len(items)} does not match pattern count {len(pats)}")
    else:
        items = pats
    ccfg = ClusterConfig(k=k, restarts=int(cfg.cluster["restarts"]),
                         max_iterations=int(cfg.cluster["max_iterations"]),
                         seed=cfg.cluster_seed, use_raw=bool(cfg.cluster["use_raw"]))
    res = kmeans(items, ccfg)
    rate = misclassification_rate(res.assignment, labels)
    keep = ~np.asarray(trans, dtype=bool)
    rate_ex = (
        misclassification_rate(res.assignment[keep], [l for l, t in zip(labels, trans) if not t])
        if keep.any() else None
    )
    _write_json(out / "clusters.json", {
        "config_hash": cfg.config_hash,
        **res.to_json(),
        "labels": labels,
        "transition": trans,
        "misclassification": rate,
        "misclassification_excluding_transitions": rate_ex,
    })
    return {"misclassification": rate, "misclassification_excluding_transitions": rate_ex, "k": k}


def cmd_report(cfg: RunConfig, stream=None) -> None:
    """Per-window TSV: timing, label, pattern size, distance, flag, cluster."""
    stream = stream or sys.stdout
    out = Path(cfg.out)
    pj = _read_json(out / "patterns.json", "report")
    pats = [SparsityPattern.from_json(p) for p in pj["patterns"]]
    ev_path = out / "events.json"
    if ev_path.exists():
        ej = json.loads(ev_path.read_text(encoding="utf-8"))
        labels, trans = window_labels(pats, pj["dt"], pj["t0"], EventLog.from_json(ej["events"]),
                                      ej.get("initial_label", "initial"))
    else:
        labels, trans = [""] * len(pats), [False] * len(pats)
    flagged = set()
    fl_path = out / "flags.jsonl"
    if fl_path.exists():
        flagged = {json.loads(l)["window_index"] for l in fl_path.read_text().splitlines() if l.strip()}
    cl_path = out / "clusters.json"
    clusters = json.loads(cl_path.read_text())["assignment"] if cl_path.exists() else None
    dist = [None] + list(pj["distances"])
    stream.write("window\tstart\tend\tlabel\ttransition\tnnz\tdistance\tflag\tcluster\n")
    for w, p in enumerate(pats):
        t1, t2 = p.source_window
        start = pj["t0"] + (t1 - 1) * pj["dt"]
        end = pj["t0"] + (t2 - 1) * pj["dt"]
        d = "" if dist[w] is None else f"{dist[w]:.6f}"
        c = "" if clusters is None else str(clusters[w])
        stream.write(f"{w}\t{start:g}\t{end:g}\t{labels[w]}\t{int(trans[w])}\t{p.nnz}\t{d}\t{int(w in flagged)}\t{c}\n")


# -- entry point ----------------------------------------------------------------


def _setup_logging() -> None:
    level = os.environ.get("KOOPWATCH_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING, "warning": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="koopwatch", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"koopwatch {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("simulate", "generate dataset.csv and events.json"),
        ("detect", "estimate K per window and flag pattern changes"),
        ("cluster", "k-means over patterns, print misclassification"),
        ("report", "print a per-window TSV summary"),
        ("run", "simulate, detect and cluster in one go"),
    ]:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="run config JSON")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", default=None, help="output directory")
    return p


def _print_cluster(r: dict) -> None:
    ex = r["misclassification_excluding_transitions"]
    print(f"misclassification\t{r['misclassification']:.4f}")
    print(f"misclassification_excluding_transitions\t{'' if ex is None else f'{ex:.4f}'}")


def _print_detect(r: dict) -> None:
    print(f"windows\t{r['windows']}")
    print(f"flags\t{len(r['flags'])}")
    for f in r["flags"]:
        print(f"flag\t{f['window_index']}\t{f['time']:g}\t{f['distance']:.6f}")


def main(argv: Sequence[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    stage = "config"
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        if args.command in ("simulate", "run"):
            stage = "simulate"
            r = cmd_simulate(cfg)
            print(f"samples\t{r['samples']}\nchannels\t{r['channels']}\nevents\t{r['events']}")
        if args.command in ("detect", "run"):
            stage = "detect"
            _print_detect(cmd_detect(cfg))
        if args.command in ("cluster", "run"):
            stage = "cluster"
            _print_cluster(cmd_cluster(cfg))
        if args.command == "report":
            stage = "report"
            cmd_report(cfg)
    except StageError as exc:
        print(f"koopwatch: error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, KeyError, TypeError) as exc:
        if stage == "config" or isinstance(exc, ConfigError):
            print(f"koopwatch: error: {stage}: {exc}", file=sys.stderr)
            return 2
        print(f"koopwatch: error: {stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # every module error maps to a nonzero exit
        print(f"koopwatch: error: {stage}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
