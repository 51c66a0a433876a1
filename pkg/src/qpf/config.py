"""Task configuration files.

INI-style documents read with :mod:`configparser`. Complex matrices are
written as interleaved ``re im`` pairs in row-major order, separated by
whitespace or commas. Example::

    [model]
    kind = diffusive
    preset = qubit_fluorescence
    t1_us = 4.15
    tphi_us = 35
    eta = 0.24

    [hypotheses]
    parameter = eta
    values = 0.10, 0.26, 0.40

    [records]
    paths = records.qpf

    [initial_states]
    0 = 0.5 0  0.5 0  0.5 0  0.5 0

    [run]
    checkpoint_every = 100
    workers = 1
    seed = 7
    dt = 2e-7

    [simulate]
    truth = 0.26
    n_records = 2000
    length = 50
    initial_state = 0
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from qpf.diffusive import Channel, DiffusiveModel, ParameterizedFamily, qubit_fluorescence_preset
from qpf.discrete import DiscreteFamily, DiscreteModel, PartialKrausMap, amplitude_damping_map
from qpf.errors import InvalidConfiguration, QPFError
from qpf.operators import as_density

PRESETS = {
    "diffusive": {"qubit_fluorescence": {"t1_us": 4.15, "tphi_us": 35.0, "eta": 0.24}},
    "discrete": {"amplitude_damping": {"gamma": 0.36}},
}

SECTION_KEYS = {
    "hypotheses": {"parameter", "values"},
    "prior": {"values"},
    "records": {"paths", "gain"},
    "run": {"checkpoint_every", "workers", "seed", "dt"},
    "simulate": {"truth", "n_records", "length", "initial_state"},
}
REQUIRED_SECTIONS = {"model", "hypotheses"}

_EXPLICIT_DIFFUSIVE = re.compile(r"^(dim|h|l\d+|eta\d+)$")
_EXPLICIT_DISCRETE = re.compile(r"^(dim|m\d+_\d+)$")


def parse_floats(text: str) -> list[float]:
    parts = [p for p in re.split(r"[\s,]+", text.strip()) if p]
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise InvalidConfiguration(f"not a list of numbers: {text!r}") from exc


def parse_matrix(text: str, dim: int | None = None) -> np.ndarray:
    """Row-major interleaved ``re im`` pairs to a square complex matrix."""
    vals = parse_floats(text)
    if len(vals) % 2:
        raise InvalidConfiguration("complex matrix needs an even number of reals")
    n = len(vals) // 2
    d = int(round(np.sqrt(n)))
    if d * d != n or (dim is not None and d != dim):
        raise InvalidConfiguration(f"{n} complex entries do not form a {dim or 'square'} matrix")
    z = np.array(vals[0::2]) + 1j * np.array(vals[1::2])
    return z.reshape(d, d)


def format_matrix(a: np.ndarray) -> str:
    a = np.asarray(a, dtype=complex).ravel()
    return " ".join(f"{float(z.real)!r} {float(z.imag)!r}" for z in a)


@dataclass
class TaskConfig:
    kind: str
    preset: str
    model_params: dict
    parameter: str
    values: tuple
    prior: np.ndarray | None = None
    record_paths: tuple = ()
    gain: float = 1.0
    initial_states: dict = field(default_factory=dict)
    checkpoint_every: int = 1
    workers: int = 1
    seed: int = 0
    dt: float | None = None
    simulate: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def model(self, value=None):
        """Model with the hypothesis parameter set to ``value`` (default: as configured)."""
        params = dict(self.model_params)
        if value is not None:
            params[self.parameter] = value
        try:
            return _build_model(self.kind, self.preset, params)
        except QPFError as exc:
            raise InvalidConfiguration(f"[model]: {exc}") from exc

    def family(self):
        models = tuple(self.model(v) for v in self.values)
        if self.kind == "diffusive":
            return ParameterizedFamily(self.values, models)
        return DiscreteFamily(self.values, models)

    def resolve(self, path) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.base_dir / path


def _build_model(kind: str, preset: str, params: dict):
    if kind == "diffusive":
        if preset == "qubit_fluorescence":
            return qubit_fluorescence_preset(params["t1_us"], params["tphi_us"], params["eta"])
        dim = int(params["dim"])
        H = params.get("h", np.zeros((dim, dim)))
        idx = sorted(int(k[1:]) for k in params if re.fullmatch(r"l\d+", k))
        channels = tuple(Channel(params[f"l{i}"], params.get(f"eta{i}", 0.0)) for i in idx)
        return DiffusiveModel(H, channels)
    if preset == "amplitude_damping":
        return DiscreteModel(amplitude_damping_map(params["gamma"]))
    groups: dict[int, list] = {}
    for key in sorted(k for k in params if k.startswith("m") and "_" in k):
        y, mu = (int(v) for v in key[1:].split("_"))
        groups.setdefault(y, []).append((mu, params[key]))
    if sorted(groups) != list(range(1, len(groups) + 1)):
        raise InvalidConfiguration("discrete outcomes must be numbered 1..m without gaps")
    ops = [np.array([m for _, m in sorted(groups[y], key=lambda t: t[0])]) for y in sorted(groups)]
    return DiscreteModel(PartialKrausMap(tuple(ops)))


def _parse_model(section) -> tuple[str, str, dict]:
    kind = section.get("kind", "diffusive")
    if kind not in PRESETS:
        raise InvalidConfiguration(f"[model] kind must be one of {sorted(PRESETS)}, got {kind!r}")
    preset = section.get("preset", "explicit")
    keys = set(section) - {"kind", "preset"}
    params: dict = {}
    if preset in PRESETS[kind]:
        allowed = PRESETS[kind][preset]
        unknown = keys - set(allowed)
        if unknown:
            raise InvalidConfiguration(f"[model] unknown keys for preset {preset}: {sorted(unknown)}")
        params = dict(allowed)
        for key in keys:
            params[key] = _scalar(section[key], f"[model] {key}")
        return kind, preset, params
    if preset != "explicit":
        raise InvalidConfiguration(f"unknown {kind} preset {preset!r}")
    pattern = _EXPLICIT_DIFFUSIVE if kind == "diffusive" else _EXPLICIT_DISCRETE
    unknown = {k for k in keys if not pattern.match(k)}
    if unknown:
        raise InvalidConfiguration(f"[model] unknown keys: {sorted(unknown)}")
    if "dim" not in keys:
        raise InvalidConfiguration("[model] explicit models need dim")
    dim = int(_scalar(section["dim"], "[model] dim"))
    params["dim"] = dim
    for key in keys - {"dim"}:
        if key.startswith("eta"):
            params[key] = _scalar(section[key], f"[model] {key}")
        else:
            params[key] = parse_matrix(section[key], dim)
    return kind, preset, params


def _scalar(text: str, where: str) -> float:
    vals = parse_floats(text)
    if len(vals) != 1:
        raise InvalidConfiguration(f"{where} must be a single number")
    return vals[0]


def _int(section, key, default):
    if key not in section:
        return default
    try:
        return int(section[key])
    except ValueError as exc:
        raise InvalidConfiguration(f"{key} must be an integer") from exc


def parse_config(text: str, base_dir=".") -> TaskConfig:
    """Parse and validate a task configuration document."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise InvalidConfiguration(str(exc)) from exc
    sections = set(cp.sections())
    unknown = sections - set(SECTION_KEYS) - {"model", "initial_states"}
    if unknown:
        raise InvalidConfiguration(f"unknown sections: {sorted(unknown)}")
    missing = REQUIRED_SECTIONS - sections
    if missing:
        raise InvalidConfiguration(f"missing sections: {sorted(missing)}")
    for name, allowed in SECTION_KEYS.items():
        if name in sections:
            bad = set(cp[name]) - allowed
            if bad:
                raise InvalidConfiguration(f"[{name}] unknown keys: {sorted(bad)}")

    kind, preset, params = _parse_model(cp["model"])
    hyp = cp["hypotheses"]
    if "parameter" not in hyp or "values" not in hyp:
        raise InvalidConfiguration("[hypotheses] needs parameter and values")
    parameter = hyp["parameter"].strip().lower()
    if parameter not in params or isinstance(params[parameter], np.ndarray):
        raise InvalidConfiguration(f"hypothesis parameter {parameter!r} is not a scalar [model] key")
    values = tuple(parse_floats(hyp["values"]))
    if not values or len(set(values)) != len(values):
        raise InvalidConfiguration("[hypotheses] values must be distinct and non-empty")

    prior = None
    if "prior" in sections and cp["prior"].get("values", "uniform").strip() != "uniform":
        prior = np.array(parse_floats(cp["prior"]["values"]))
        if prior.shape != (len(values),) or np.any(prior < 0) or abs(prior.sum() - 1) > 1e-12:
            raise InvalidConfiguration("[prior] must list one non-negative weight per hypothesis, summing to 1")

    cfg = TaskConfig(kind, preset, params, parameter, values, prior, base_dir=Path(base_dir))
    if "records" in sections:
        rec = cp["records"]
        cfg.record_paths = tuple(p for p in re.split(r"[\s,]+", rec.get("paths", "").strip()) if p)
        cfg.gain = _scalar(rec["gain"], "[records] gain") if "gain" in rec else 1.0

    dim = cfg.model().dim
    if "initial_states" in sections:
        for key, val in cp["initial_states"].items():
            try:
                sid = int(key)
            except ValueError as exc:
                raise InvalidConfiguration(f"initial state id {key!r} is not an integer") from exc
            try:
                cfg.initial_states[sid] = as_density(parse_matrix(val, dim), name=f"initial state {sid}")
            except QPFError as exc:
                raise InvalidConfiguration(str(exc)) from exc

    if "run" in sections:
        run = cp["run"]
        cfg.checkpoint_every = _int(run, "checkpoint_every", 1)
        cfg.workers = _int(run, "workers", 1)
        cfg.seed = _int(run, "seed", 0)
        if "dt" in run:
            cfg.dt = _scalar(run["dt"], "[run] dt")
            if not cfg.dt > 0:
                raise InvalidConfiguration("[run] dt must be positive")
    if cfg.checkpoint_every < 1 or cfg.workers < 1:
        raise InvalidConfiguration("checkpoint_every and workers must be >= 1")

    if "simulate" in sections:
        sim = cp["simulate"]
        cfg.simulate = {
            "truth": _scalar(sim["truth"], "[simulate] truth") if "truth" in sim else None,
            "n_records": _int(sim, "n_records", 1),
            "length": _int(sim, "length", 0),
            "initial_state": _int(sim, "initial_state", 0),
        }
        if cfg.simulate["n_records"] < 0 or cfg.simulate["length"] < 0:
            raise InvalidConfiguration("[simulate] n_records and length must be >= 0")
    return cfg


def load_config(path) -> TaskConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InvalidConfiguration(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base_dir=path.parent)
