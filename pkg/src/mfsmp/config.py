"""Experiment configuration: ``key = value`` lines under ``[section]`` headers.

Lists are comma separated. Every key has a default except ``experiment.preset``.
Unknown sections or keys are rejected.

    [experiment]
    preset = smp-reference
    mode = conditional-law

    [grid]
    T = 1.0
    K = 64
"""

from __future__ import annotations

import configparser
import re
from dataclasses import asdict, dataclass, field, fields

from .core import Mode
from .errors import ConfigurationError
from .presets import PRESETS

_MISSING = object()

# section -> key -> (kind, default)
SCHEMA = {
    "experiment": {
        "preset": ("str", _MISSING),
        "mode": ("mode", "conditional-law"),
        "id": ("str", ""),
    },
    "preset": {
        "kappa": ("float?", None),
        "x0": ("float?", None),
    },
    "grid": {
        "T": ("pos_float", 1.0),
        "K": ("pos_int", 64),
    },
    "ensemble": {
        "M_outer": ("pos_int", 64),
        "N_inner": ("pos_int", 128),
        "seed": ("nonneg_int", 7),
    },
    "control": {
        "U_set": ("floats", (0.0, 1.0)),
        "blocks": ("pos_int", 4),
        "policy": ("floats", (0.0,)),
    },
    "spike": {
        "t0": ("nonneg_float", 0.25),
        "alt": ("float", 1.0),
        "eps_ladder": ("decreasing", (0.2, 0.1, 0.05, 0.025)),
        "duality_eps": ("pos_float", 0.05),
    },
    "tolerances": {
        "picard_tol": ("pos_float", 1e-3),
        "picard_max_iter": ("pos_int", 25),
        "tol_smp": ("nonneg_float", 0.02),
        "n_stderr": ("nonneg_float", 3.0),
        "ridge": ("pos_float", 1e-8),
        "scheme": ("scheme", "euler"),
        "sweeps": ("pos_int", 2),
    },
    "output": {
        "out": ("str", "results"),
    },
}


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str
    mode: str = "conditional-law"
    id: str = ""
    kappa: float | None = None
    x0: float | None = None
    T: float = 1.0
    K: int = 64
    M_outer: int = 64
    N_inner: int = 128
    seed: int = 7
    U_set: tuple = (0.0, 1.0)
    blocks: int = 4
    policy: tuple = (0.0,)
    t0: float = 0.25
    alt: float = 1.0
    eps_ladder: tuple = (0.2, 0.1, 0.05, 0.025)
    duality_eps: float = 0.05
    picard_tol: float = 1e-3
    picard_max_iter: int = 25
    tol_smp: float = 0.02
    n_stderr: float = 3.0
    ridge: float = 1e-8
    scheme: str = "euler"
    sweeps: int = 2
    out: str = "results"
    extras: dict = field(default_factory=dict, compare=False)

    @property
    def experiment_id(self) -> str:
        return self.id or self.preset

    @property
    def preset_params(self) -> dict:
        return {k: getattr(self, k) for k in ("kappa", "x0") if getattr(self, k) is not None}

    def echo(self) -> dict:
        d = asdict(self)
        d.pop("extras")
        d.pop("out")  # where results go is not part of the experiment
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    def replace(self, **kw) -> "ExperimentConfig":
        from dataclasses import replace

        return replace(self, **kw)


def _line_of(text: str, section: str, key: str) -> int | None:
    cur = None
    for n, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"^\[(.+)\]$", s)
        if m:
            cur = m.group(1).strip()
            continue
        if cur == section and re.match(rf"^{re.escape(key)}\s*[=:]", s, flags=re.IGNORECASE):
            return n
    return None


def _convert(kind, raw, where):
    def num(tok, cast):
        try:
            return cast(tok)
        except ValueError:
            raise ConfigurationError(f"{where}: malformed number {tok!r}") from None

    raw = raw.strip()
    if kind == "str":
        return raw
    if kind == "mode":
        try:
            return Mode.parse(raw).value
        except Exception:
            raise ConfigurationError(f"{where}: mode must be conditional-law or state-functional, got {raw!r}") from None
    if kind == "scheme":
        if raw not in ("log", "euler"):
            raise ConfigurationError(f"{where}: scheme must be log or euler, got {raw!r}")
        return raw
    if kind in ("float", "float?"):
        return num(raw, float)
    if kind in ("pos_float", "nonneg_float"):
        v = num(raw, float)
        if kind == "pos_float" and not v > 0:
            raise ConfigurationError(f"{where}: must be positive, got {raw}")
        if kind == "nonneg_float" and v < 0:
            raise ConfigurationError(f"{where}: must be non-negative, got {raw}")
        return v
    if kind in ("pos_int", "nonneg_int"):
        v = num(raw, int)
        if kind == "pos_int" and v <= 0:
            raise ConfigurationError(f"{where}: must be positive, got {raw}")
        if kind == "nonneg_int" and v < 0:
            raise ConfigurationError(f"{where}: must be non-negative, got {raw}")
        return v
    if kind in ("floats", "decreasing"):
        toks = [t for t in (s.strip() for s in raw.split(",")) if t]
        if not toks:
            raise ConfigurationError(f"{where}: empty list")
        vals = tuple(num(t, float) for t in toks)
        if kind == "decreasing":
            if any(v <= 0 for v in vals):
                raise ConfigurationError(f"{where}: eps values must be positive")
            if any(b >= a for a, b in zip(vals, vals[1:])):
                raise ConfigurationError(f"{where}: eps_ladder must be strictly decreasing")
        return vals
    raise AssertionError(kind)


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case sensitive (K vs k)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        where = f"line {line}: " if line else ""
        raise ConfigurationError(f"{where}{exc.message if hasattr(exc, 'message') else exc}") from None
    if cp.defaults():
        raise ConfigurationError("a [DEFAULT] section is not supported")
    values = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigurationError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                line = _line_of(text, section, key)
                raise ConfigurationError(f"line {line}: unknown key {section}.{key}")
            kind, _ = SCHEMA[section][key]
            line = _line_of(text, section, key)
            values[key] = _convert(kind, raw, f"line {line}: {section}.{key}")
    for section, keys in SCHEMA.items():
        for key, (_, default) in keys.items():
            if key not in values and default is _MISSING:
                raise ConfigurationError(f"missing required key {section}.{key}")
    cfg = ExperimentConfig(**values)
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.preset not in PRESETS:
        raise ConfigurationError(f"experiment.preset: unknown preset {cfg.preset!r}; choose from {', '.join(PRESETS)}")
    if cfg.t0 >= cfg.T:
        raise ConfigurationError("spike.t0 must lie inside [0, T)")
    if not set(cfg.policy) <= set(cfg.U_set):
        raise ConfigurationError("control.policy values must belong to control.U_set")
    if cfg.alt not in cfg.U_set:
        raise ConfigurationError("spike.alt must belong to control.U_set")


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section, keys in SCHEMA.items():
        body = []
        for key in keys:
            v = getattr(cfg, key)
            if v is None:
                continue
            body.append(f"{key} = {_fmt(v)}")
        if body:
            lines.append(f"[{section}]")
            lines.extend(body)
            lines.append("")
    return "\n".join(lines)


def config_fields() -> list[str]:
    return [f.name for f in fields(ExperimentConfig) if f.name != "extras"]
