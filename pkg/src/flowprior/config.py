"""INI-style experiment configs: ``[section]`` headers with ``key = value`` lines.

Every key is typed and validated; errors name the offending ``section.key``
and, when the key came from a file, its line number.
"""

from __future__ import annotations

import configparser
import io
import re
from dataclasses import dataclass

EXPERIMENTS = ("denoise_flow_noise", "denoise_sinusoidal", "denoise_radial", "cs_noisy", "cs_1bit", "theorem")
SWEEP_AXES = ("measurements", "noise_scale", "beta", "gamma")


class ConfigError(ValueError):
    def __init__(self, field: str, message: str, line: int | None = None):
        where = f"{field} (line {line})" if line is not None else field
        super().__init__(f"{where}: {message}")
        self.field = field
        self.line = line


def _as_int(v):
    return int(v)


def _as_float(v):
    return float(v)


def _as_bool(v):
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _as_list(v):
    return [item.strip() for item in v.split(",") if item.strip()]


def _as_float_list(v):
    return [float(item) for item in _as_list(v)]


def _as_opt_float(v):
    return None if v.strip().lower() in ("", "none") else float(v)


# (section, key) -> parser. Sections ending in ".*" accept every method name.
SCHEMA = {
    "experiment": {"name": str, "instances": _as_int, "seed": _as_int, "methods": _as_list,
                   "out": str, "workers": _as_int},
    "data": {"test": str, "prior_family": str},
    "prior": {"checkpoint": str},
    "noise": {"kind": str, "amplitude": _as_float, "mean": _as_float, "sigma": _as_float,
              "center_row": _as_float, "center_col": _as_float, "checkpoint": str,
              "shift": _as_float, "scale": _as_float},
    "operator": {"kind": str, "m": _as_int, "scale": _as_float, "matrix": str},
    "solve": {"steps": _as_int, "lr": _as_float, "z_init": str, "z_init_std": _as_float,
              "space": str, "restarts": _as_int},
    "solve.*": {"steps": _as_int, "lr": _as_float, "beta": _as_float, "gamma": _as_float,
                "lam": _as_float, "z_init": str, "z_init_std": _as_float,
                "latent_ball_radius": _as_opt_float, "space": str, "restarts": _as_int},
    "sweep": {"axis": str, "values": _as_float_list},
    "train": {"data": str, "n": _as_int, "layers": _as_int, "hidden": _as_int,
              "s_clamp": _as_float, "epochs": _as_int, "batch_size": _as_int, "lr": _as_float,
              "lr_halving_period": _as_int, "max_grad_norm": _as_float, "seed": _as_int,
              "init_seed": _as_int, "out": str},
    "theorem": {"prior": str, "tau": _as_float, "a": _as_float, "b": _as_float, "dim": _as_int,
                "trials": _as_int, "sigmas": _as_float_list, "delta_scales": _as_float_list,
                "seed": _as_int},
}


@dataclass
class Config:
    """Typed view over raw string values, keyed by section then key."""

    raw: dict
    lines: dict

    def get(self, section: str, key: str, default=None):
        value = self.raw.get(section, {}).get(key)
        if value is None:
            return default
        parser = _parser_for(section, key)
        try:
            return parser(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{section}.{key}", f"cannot parse {value!r}: {exc}",
                              self.lines.get((section, key))) from None

    def has(self, section: str, key: str) -> bool:
        return key in self.raw.get(section, {})

    def set(self, section: str, key: str, value) -> None:
        _parser_for(section, key)
        if isinstance(value, (list, tuple)):
            value = ", ".join(str(v) for v in value)
        self.raw.setdefault(section, {})[key] = str(value)
        self.lines.pop((section, key), None)  # no longer the file's value

    def copy(self) -> "Config":
        return Config({s: dict(kv) for s, kv in self.raw.items()}, dict(self.lines))

    def to_text(self) -> str:
        out = io.StringIO()
        for section in sorted(self.raw):
            out.write(f"[{section}]\n")
            for key in sorted(self.raw[section]):
                out.write(f"{key} = {self.raw[section][key]}\n")
            out.write("\n")
        return out.getvalue()


def _parser_for(section: str, key: str):
    if section in SCHEMA:
        fields = SCHEMA[section]
    elif section.startswith("solve."):
        fields = SCHEMA["solve.*"]
    else:
        raise ConfigError(section, "unknown section")
    if key not in fields:
        raise ConfigError(f"{section}.{key}", "unknown key")
    return fields[key]


def _line_numbers(text: str) -> dict:
    lines, section = {}, None
    for no, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"^\[([^\]]+)\]$", stripped)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"^([A-Za-z_][\w.]*)\s*[=:]", stripped)
        if m and section is not None:
            lines[(section, m.group(1))] = no
    return lines


def parse_config(text: str) -> Config:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError("<file>", str(exc).splitlines()[0], line) from None
    lines = _line_numbers(text)
    raw = {}
    for section in parser.sections():
        raw[section] = {}
        for key, value in parser.items(section):
            try:
                _parser_for(section, key)
            except ConfigError as exc:
                raise ConfigError(exc.field, str(exc).split(": ", 1)[1],
                                  lines.get((section, key))) from None
            raw[section][key] = value
    return Config(raw, lines)


def load_config(path) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def apply_override(cfg: Config, assignment: str) -> None:
    """``section.key=value``; the section may itself contain a dot (``solve.map.beta=2``)."""
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like section.key=value")
    path, value = assignment.split("=", 1)
    if "." not in path:
        raise ConfigError(path, "override must name section.key")
    section, key = path.strip().rsplit(".", 1)
    cfg.set(section, key, value.strip())
    cfg.get(section, key)  # type check now


def validate_experiment(cfg: Config) -> str:
    name = cfg.get("experiment", "name")
    if name is None:
        raise ConfigError("experiment.name", "missing", None)
    if name not in EXPERIMENTS:
        raise ConfigError("experiment.name", f"unknown experiment {name!r}; expected one of {EXPERIMENTS}",
                          cfg.lines.get(("experiment", "name")))
    instances = cfg.get("experiment", "instances", 1)
    if instances < 1:
        raise ConfigError("experiment.instances", "must be >= 1", cfg.lines.get(("experiment", "instances")))
    if cfg.get("experiment", "workers", 1) < 1:
        raise ConfigError("experiment.workers", "must be >= 1", cfg.lines.get(("experiment", "workers")))
    return name
