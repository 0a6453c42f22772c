"""Sectioned key-value run configuration.

Model functions come from named presets; the file only carries numbers.
Every key is checked against a schema and errors cite the offending line.

    [run]
    preset = linear-gaussian
    seed = 0

    [model]          ; preset parameters, e.g. sigma, dt, T
    [grid]           ; x_lo, x_hi, n_nodes, k
    [filter]         ; kind = grid|particle|none, mode = innovation|literal
    [experiment]     ; sizes and tolerances for the studies
"""

from __future__ import annotations

import configparser
import hashlib
import inspect
import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import presets
from .dynamics import GridSpec, Scenario
from .errors import ConfigError
from .filtering import BenesModel, check_cfl

PRESETS = {
    "driftless": presets.driftless,
    "linear-gaussian": presets.linear_gaussian,
    "mean-reversion-coupled": presets.mean_reversion_coupled,
    "benes-quadratic": presets.benes_quadratic,
}
BENES_PRESETS = {"benes-quadratic"}
SCALAR_DT = 1e-3


def _floats(text: str) -> tuple:
    return tuple(float(v) for v in text.split(","))


def _ints(text: str) -> tuple:
    return tuple(int(v) for v in text.split(","))


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low not in ("true", "false", "yes", "no", "1", "0"):
        raise ValueError(f"not a boolean: {text!r}")
    return low in ("true", "yes", "1")


SCHEMA = {
    "run": {"preset": str, "seed": int, "threads": int},
    "grid": {"x_lo": float, "x_hi": float, "n_nodes": int, "k": float},
    "filter": {"kind": str, "mode": str, "particles": int, "snapshots": int},
    "experiment": {
        "n_values": _ints, "replications": int, "m": int, "tol": float, "max_iter": int, "damping": float,
        "amplitude": float, "deviation_budget": int, "nash_replications": int, "gain_constants": _bool,
    },
}

DEFAULTS = {
    "run": {"preset": "linear-gaussian", "seed": 0, "threads": 1},
    "filter": {"kind": "grid", "mode": "innovation", "particles": 500, "snapshots": 5},
    "experiment": {
        "n_values": (8, 16, 32, 64, 128, 256, 512), "replications": 8, "m": 1000, "tol": 1e-3, "max_iter": 10,
        "damping": 1.0, "amplitude": 0.5, "deviation_budget": 15, "nash_replications": 32, "gain_constants": False,
    },
}

_SKIP_PARAMS = {"seed", "kw"}


def _model_schema(preset: str) -> dict:
    """Numeric keyword parameters of the preset, typed by their defaults."""
    schema = {}
    for name, p in inspect.signature(PRESETS[preset]).parameters.items():
        if name in _SKIP_PARAMS or p.kind is p.VAR_KEYWORD or name == "grid":
            continue
        schema[name.lower()] = (name, _floats if isinstance(p.default, tuple) else float)
    return schema


@dataclass
class RunConfig:
    preset: str
    model: Scenario | BenesModel
    seed: int
    threads: int
    filter_kind: str
    mode: str
    particles: int
    snapshots: int
    experiment: dict
    canonical: dict = field(repr=False, default_factory=dict)

    @property
    def is_benes(self) -> bool:
        return self.preset in BENES_PRESETS

    @property
    def hash(self) -> str:
        body = json.dumps(self.canonical, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(body.encode()).hexdigest()

    def to_ini(self) -> str:
        lines = []
        for section in sorted(self.canonical):
            lines.append(f"[{section}]")
            for key, value in sorted(self.canonical[section].items()):
                text = ",".join(repr(v) for v in value) if isinstance(value, (list, tuple)) else repr(value)
                lines.append(f"{key} = {text.strip(chr(39))}")
            lines.append("")
        return "\n".join(lines)

    def with_seed(self, seed: int) -> "RunConfig":
        canonical = {s: dict(v) for s, v in self.canonical.items()}
        canonical["run"]["seed"] = int(seed)
        model = self.model if self.is_benes else replace(self.model, seed=int(seed))
        return replace(self, seed=int(seed), model=model, canonical=canonical)


def _line_index(text: str) -> dict:
    """(section, key) -> 1-based line number, plus (section, None) for headers."""
    index, section = {}, None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip().lower()
            index.setdefault((section, None), no)
            continue
        m = re.match(r"([^=:;#\s][^=:]*?)\s*[=:]", line)
        if m and section is not None:
            index.setdefault((section, m.group(1).strip().lower()), no)
    return index


def parse_config(path=None, text: str | None = None, preset: str | None = None) -> RunConfig:
    """Parse and validate a configuration file (or ``text``); ``preset`` overrides the file."""
    where = "<config>"
    if text is None:
        if path is None:
            text = ""
        else:
            p = Path(path)
            if not p.is_file():
                raise ConfigError(f"config file not found: {p}")
            text, where = p.read_text(), str(p)
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        parser.read_string(text, source=where)
    except configparser.Error as exc:
        raise ConfigError(f"{where}: {exc}") from exc
    lines = _line_index(text)

    def fail(section, key, msg):
        no = lines.get((section, key)) or lines.get((section, None))
        raise ConfigError(f"{where}:{no}: {msg}" if no else f"{where}: {msg}")

    values = {s: dict(d) for s, d in DEFAULTS.items()}
    name = preset or parser.get("run", "preset", fallback=values["run"]["preset"]).strip()
    if name not in PRESETS:
        fail("run", "preset", f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    model_schema = _model_schema(name)
    for section in parser.sections():
        if section == "model":
            allowed = {k: conv for k, (_, conv) in model_schema.items()}
        elif section in SCHEMA:
            allowed = SCHEMA[section]
        else:
            fail(section, None, f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in allowed:
                fail(section, key, f"unknown key {key!r} in [{section}]; allowed: {', '.join(sorted(allowed))}")
            try:
                values.setdefault(section, {})[key] = allowed[key](raw)
            except ValueError as exc:
                fail(section, key, f"bad value for {key!r}: {exc}")
    values["run"]["preset"] = name
    model_kw = {model_schema[k][0]: v for k, v in values.get("model", {}).items()}

    run, filt, exp = values["run"], values["filter"], values["experiment"]
    if filt["kind"] not in ("grid", "particle", "none"):
        fail("filter", "kind", "filter kind must be grid, particle or none")
    if filt["mode"] not in ("innovation", "literal"):
        fail("filter", "mode", "filter mode must be innovation or literal")
    for key in ("particles", "replications", "m", "max_iter", "deviation_budget", "nash_replications"):
        sec = "filter" if key == "particles" else "experiment"
        if values[sec][key] < 1:
            fail(sec, key, f"{key} must be at least 1")
    if not exp["tol"] > 0:
        fail("experiment", "tol", "tol must be positive")
    if not 0 < exp["damping"] <= 1:
        fail("experiment", "damping", "damping must lie in (0, 1]")
    if name in BENES_PRESETS and "grid" in values:
        fail("grid", None, "the [grid] section applies to scalar presets only")
    for key in ("sigma", "dt", "T"):
        if key.lower() in values.get("model", {}) and not model_kw[key] > 0:
            fail("model", key.lower(), f"{key} must be positive")

    canonical = {s: {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()} for s, d in values.items()}
    if name in BENES_PRESETS:
        try:
            model = PRESETS[name](**model_kw)
        except ConfigError as exc:
            fail("model", None, str(exc))
        canonical.setdefault("model", {})["dt"] = model.dt
    else:
        model_kw.setdefault("dt", SCALAR_DT)
        base = PRESETS[name]()
        g = values.get("grid", {})
        grid = GridSpec(g.get("x_lo", base.grid.x_lo), g.get("x_hi", base.grid.x_hi),
                        g.get("n_nodes", base.grid.n_nodes), g.get("k", base.grid.k))
        if grid.n_nodes < 3 or not grid.x_lo < grid.x_hi:
            fail("grid", None, "grid needs x_lo < x_hi and at least 3 nodes")
        try:
            model = replace(PRESETS[name](seed=run["seed"], **model_kw), grid=grid)
        except ConfigError as exc:
            fail("model", None, str(exc))
        if filt["kind"] == "grid":
            try:
                check_cfl(model.sigma, model.dt, grid.dx)
            except ConfigError as exc:
                fail("model", "dt" if "dt" in values.get("model", {}) else None, str(exc))
        canonical["model"] = {**canonical.get("model", {}), "dt": model.dt}
        canonical["grid"] = {"x_lo": grid.x_lo, "x_hi": grid.x_hi, "n_nodes": grid.n_nodes, "k": grid.k}
    return RunConfig(name, model, run["seed"], run["threads"], filt["kind"], filt["mode"], filt["particles"],
                     filt["snapshots"], exp, canonical)
