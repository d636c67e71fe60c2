"""Distributed-cost scenarios: a flat ``key = value`` file describing a cluster,
a model profile and the frozen boundary at the start of every epoch."""
from __future__ import annotations

import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .. import distsim
from .config import ConfigError


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _count(text: str) -> int:
    v = float(text)
    if v != int(v):
        raise ValueError(f"not an integer: {text!r}")
    return int(v)


# key -> (parser, required)
_KEYS = {
    "name": (str, False),
    "dataset_size": (_count, True),
    "workers": (_count, True),
    "bandwidth": (float, True),
    "alpha": (float, True),
    "cost_rate": (float, False),
    "memory": (float, False),
    "initial_per_worker": (_count, True),
    "batch_cap": (_count, False),
    "refined_comm": (_bool, False),
    "num_layers": (_count, True),
    "bucket_bytes": (float, True),
    "grad_bytes_per_layer": (float, True),
    "head_grad_bytes": (float, False),
    "weight_bytes": (float, False),
    "act_bytes_per_layer": (float, False),
    "base_act_bytes": (float, False),
    "tcomp_fixed": (float, False),
    "tcomp_active_layer": (float, False),
    "tcomp_frozen_layer": (float, False),
    "boundaries": (_ints, True),
}

_CLUSTER = ("workers", "bandwidth", "alpha", "cost_rate", "memory")
_PROFILE = ("num_layers", "bucket_bytes", "grad_bytes_per_layer", "head_grad_bytes", "weight_bytes",
            "act_bytes_per_layer", "base_act_bytes", "tcomp_fixed", "tcomp_active_layer",
            "tcomp_frozen_layer")


@dataclass(frozen=True)
class NamedScenario:
    name: str
    scenario: distsim.Scenario


def parse_scenario(text: str, name: str = "scenario") -> NamedScenario:
    values, lines = {}, {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {n}: duplicate key {key!r} (first on line {lines[key]})")
        try:
            values[key] = _KEYS[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"line {n}: bad value for {key}: {exc}") from None
        lines[key] = n
    missing = [k for k, (_, req) in _KEYS.items() if req and k not in values]
    if missing:
        raise ConfigError(f"missing keys: {', '.join(missing)}")

    def at(key):
        return f"line {lines[key]}: " if key in lines else ""

    for key in ("dataset_size", "initial_per_worker", "num_layers"):
        if values[key] < 1:
            raise ConfigError(f"{at(key)}{key} must be positive")
    if not all(0 <= b < values["num_layers"] for b in values["boundaries"]):
        raise ConfigError(f"{at('boundaries')}boundaries must lie in [0, num_layers)")
    if list(values["boundaries"]) != sorted(values["boundaries"]):
        raise ConfigError(f"{at('boundaries')}boundaries must be non-decreasing")
    if "batch_cap" in values and values["batch_cap"] < values["initial_per_worker"] * values["workers"]:
        raise ConfigError(f"{at('batch_cap')}batch_cap is below the initial total batch")
    try:
        cluster = distsim.ClusterConfig(**{k: values[k] for k in _CLUSTER if k in values})
        profile = distsim.ModelProfile(**{k: values[k] for k in _PROFILE if k in values})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    scn = distsim.Scenario(cluster, profile, values["dataset_size"], values["initial_per_worker"],
                           batch_cap=values.get("batch_cap"),
                           refined_comm=values.get("refined_comm", False),
                           boundaries=values["boundaries"])
    return NamedScenario(values.get("name", name), scn)


def bundled_names() -> list[str]:
    root = resources.files(__package__) / "scenarios"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".txt"))


def load_scenario(source: str | Path) -> NamedScenario:
    """Load a scenario file, or a bundled scenario by name."""
    path = Path(source)
    if path.is_file():
        return parse_scenario(path.read_text(), path.stem)
    if str(source) in bundled_names():
        res = resources.files(__package__) / "scenarios" / f"{source}.txt"
        return parse_scenario(res.read_text(), str(source))
    raise ConfigError(f"no scenario file or bundled scenario named {str(source)!r}")


@dataclass
class ScenarioReport:
    name: str
    rows: list[dict]
    totals: dict[str, dict[str, float]]


ROW_COLUMNS = ("epoch", "mode", "boundary", "p", "batch", "per_worker", "iters", "t_iter",
               "t_epoch", "cost")


def run_scenario(source) -> ScenarioReport:
    """Per-epoch plans for full training and both packing modes, plus totals."""
    named = source if isinstance(source, NamedScenario) else load_scenario(source)
    try:
        rows = distsim.simulate(named.scenario)
    except distsim.InfeasibleError as exc:
        raise ConfigError(str(exc)) from None
    totals = {}
    for row in rows:
        t = totals.setdefault(row["mode"], {"time": 0.0, "cost": 0.0})
        t["time"] += row["t_epoch"]
        t["cost"] += row["cost"]
    full = totals.get("full")
    for mode, t in totals.items():
        t["speedup_vs_full"] = full["time"] / t["time"] if full and t["time"] > 0 else math.nan
    return ScenarioReport(named.name, rows, totals)
