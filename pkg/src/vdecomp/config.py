"""Run configuration: INI file + command-line overrides.

Grammar (a strict subset of INI)::

    # comment            ; comment
    [section]
    key = value

Sections and keys are fixed by :data:`SCHEMA`; anything else is rejected.
An empty value means "unset" for optional keys.  Precedence, lowest first:
built-in defaults, the file, the ``VDECOMP_OUTPUT_DIR`` environment variable
(``run.output_dir`` only), command-line flags.
"""

from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from .distributions import Hyperparams
from .errors import ConfigError
from .losses import Task
from .network import ModelConfig
from .solver import SolverConfig
from .tasks import AnomalyShape, AnomalySpec, ScoreMode
from .training import AdaptConfig, AdaptMode, TrainConfig

OUTPUT_ENV = "VDECOMP_OUTPUT_DIR"


def _pos_int(v):
    return v >= 1


def _nonneg_int(v):
    return v >= 0


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _unit(v):
    return 0 <= v <= 1


def _patience(v):
    return v >= 1


def _float_inf(text: str) -> float:
    return math.inf if text.strip().lower() in ("inf", "infinity") else float(text)


def _choice(*options):
    def check(v):
        return v in options

    check.options = options
    return check


# section -> key -> (parser, default, check or None, description of the check)
SCHEMA: dict[str, dict[str, tuple]] = {
    "hyper": {
        "alpha0_gamma": (float, 2.0, _pos, "positive"),
        "alpha0_omega": (float, 2.0, _pos, "positive"),
        "alpha0_lambda": (float, 2.0, _pos, "positive"),
        "beta0_gamma": (float, 1e-6, _pos, "positive"),
        "beta0_omega": (float, 1e-6, _pos, "positive"),
        "beta0_lambda": (float, 1e-8, _pos, "positive"),
        "tau": (float, 1.0, _nonneg, "nonnegative"),
        "sigma0": (float, 1.0, _pos, "positive"),
    },
    "model": {
        "depth": (int, 8, _pos_int, "a positive integer"),
        "kernel": (int, 3, lambda v: v >= 1 and v % 2 == 1, "an odd positive integer"),
        "channels": (int, 32, _pos_int, "a positive integer"),
        "groups": (int, 8, _pos_int, "a positive integer"),
        "r0": (int, 8, _pos_int, "a positive integer"),
        "in_channels": (int, 1, _pos_int, "a positive integer"),
        "norm": (str, "group", _choice("group", "batch"), "one of group, batch"),
    },
    "train": {
        "epochs": (int, 60, _pos_int, "a positive integer"),
        "batch_size": (int, 8, _pos_int, "a positive integer"),
        "lr": (float, 1e-4, _nonneg, "nonnegative"),
        "lr_decay_factor": (float, 0.5, lambda v: 0 < v <= 1, "in (0, 1]"),
        "lr_decay_every": (int, 20, _pos_int, "a positive integer"),
        "max_steps": (int, None, _nonneg_int, "a nonnegative integer"),
    },
    "adapt": {
        "mode": (str, "S", _choice("S", "L", "LS"), "one of S, L, LS"),
        "lr": (float, 1e-6, _nonneg, "nonnegative"),
        "batch_size": (int, 1, _pos_int, "a positive integer"),
        "max_steps": (int, 20, _nonneg_int, "a nonnegative integer"),
        "patience": (_float_inf, 2.0, _patience, ">= 1 (or inf)"),
    },
    "solver": {
        "outer_iters": (int, 50, _pos_int, "a positive integer"),
        "inner_grad_steps": (int, 25, _pos_int, "a positive integer"),
        "step_size": (float, 1e-2, _pos, "positive"),
        "tol": (float, 1e-7, lambda v: 0 < v < 1, "in (0, 1)"),
        "optimizer": (str, "adam", _choice("adam", "gd"), "one of adam, gd"),
        "estimator": (str, "analytic", _choice("analytic", "mc"), "one of analytic, mc"),
    },
    "anomaly": {
        "count_min": (int, 1, _nonneg_int, "a nonnegative integer"),
        "count_max": (int, 3, _nonneg_int, "a nonnegative integer"),
        "shape": (str, None, _choice(*[s.value for s in AnomalyShape]), "one of rectangle, ellipse, perlin-blob"),
        "intensity_min": (float, 0.25, None, ""),
        "intensity_max": (float, 0.6, None, ""),
        "size_min": (float, 0.1, lambda v: 0 < v <= 1, "in (0, 1]"),
        "size_max": (float, 0.3, lambda v: 0 < v <= 1, "in (0, 1]"),
    },
    "run": {
        "task": (str, "den", _choice("den", "uad"), "one of den, uad"),
        "seed": (int, 0, None, ""),
        "output_dir": (str, "out", None, ""),
        "checkpoint": (str, None, None, ""),
        "data": (str, None, None, ""),
        "input": (str, None, None, ""),
        "n": (int, 16, _pos_int, "a positive integer"),
        "size": (int, 32, _pos_int, "a positive integer"),
        "sigma_min": (float, 0.0, _nonneg, "nonnegative"),
        "sigma_max": (float, 0.3, _nonneg, "nonnegative"),
        "salt_pepper": (float, 0.0, _unit, "in [0, 1]"),
        "threshold": (float, None, _pos, "positive"),
        "confidence": (float, 0.95, lambda v: 0 < v < 1, "in (0, 1)"),
        "num_samples": (int, 1, _pos_int, "a positive integer"),
        "score_mode": (str, "mean", _choice(*[m.value for m in ScoreMode]), "one of mean, std-weighted, omega"),
        "blur_sigma": (float, 4.0, _nonneg, "nonnegative"),
    },
}


def _parse_value(section: str, key: str, raw):
    parser, default, check, desc = SCHEMA[section][key]
    name = f"{section}.{key}"
    if raw is None or (isinstance(raw, str) and raw.strip() == ""):
        return None if default is None else default
    if isinstance(raw, str):
        try:
            value = parser(raw.strip())
        except ValueError:
            raise ConfigError(name, f"cannot parse {raw!r} as {parser.__name__.lstrip('_')}") from None
    else:
        value = raw
    if check is not None and not check(value):
        raise ConfigError(name, f"must be {desc}, got {value!r}")
    return value


@dataclass
class RunConfig:
    """Validated, merged view of every configurable value."""

    values: dict[str, dict] = field(default_factory=dict)

    def get(self, section: str, key: str):
        return self.values[section][key]

    @property
    def run(self) -> dict:
        return self.values["run"]

    @property
    def hyper(self) -> Hyperparams:
        return Hyperparams(r0=self.values["model"]["r0"], **self.values["hyper"])

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(**self.values["model"])

    @property
    def task(self) -> Task:
        return Task(self.run["task"])

    @property
    def train(self) -> TrainConfig:
        t = self.values["train"]
        return TrainConfig(
            epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"], lr_decay_factor=t["lr_decay_factor"],
            lr_decay_every=t["lr_decay_every"], task=self.task, seed=self.run["seed"], max_steps=t["max_steps"],
            num_samples=self.run["num_samples"],
        )

    @property
    def adapt(self) -> AdaptConfig:
        a = self.values["adapt"]
        return AdaptConfig(
            mode=AdaptMode(a["mode"]), lr=a["lr"], batch_size=a["batch_size"], max_steps=a["max_steps"],
            patience=a["patience"], seed=self.run["seed"], num_samples=self.run["num_samples"],
        )

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(r0=self.values["model"]["r0"], seed=self.run["seed"], **self.values["solver"])

    @property
    def anomaly(self) -> AnomalySpec:
        a = self.values["anomaly"]
        return AnomalySpec(
            (a["count_min"], a["count_max"]), a["shape"], (a["intensity_min"], a["intensity_max"]),
            (a["size_min"], a["size_max"]), self.run["seed"],
        )

    @property
    def output_dir(self) -> Path:
        return Path(self.run["output_dir"])

    def to_ini(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            for key, value in keys.items():
                lines.append(f"{key} = {'' if value is None else _format(value)}")
            lines.append("")
        return "\n".join(lines)


def _format(value) -> str:
    if isinstance(value, float):
        return "inf" if math.isinf(value) else repr(value)
    return str(value)


def defaults() -> dict[str, dict]:
    return {s: {k: spec[1] for k, spec in keys.items()} for s, keys in SCHEMA.items()}


def flag_name(section: str, key: str) -> str:
    """Command-line spelling: ``--<key>``, with ``adapt`` keys prefixed ``adapt-`` so they never collide."""
    prefix = "adapt-" if section == "adapt" else ""
    return "--" + prefix + key.replace("_", "-")


def flag_table() -> dict[str, tuple[str, str]]:
    """Flag dest -> (section, key)."""
    table = {}
    for section, keys in SCHEMA.items():
        for key in keys:
            dest = flag_name(section, key)[2:].replace("-", "_")
            if dest in table:
                raise RuntimeError(f"flag collision for {dest}")
            table[dest] = (section, key)
    return table


def read_config_file(path: str | Path) -> dict[str, dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("config", f"file {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"), default_section="\0none")
    parser.optionxform = str  # keys are case sensitive
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError("config", f"{path}: {exc}".replace("\n", " ")) from None
    out = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(section, f"unknown section [{section}] in {path}")
        for key, value in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{section}.{key}", f"unknown key in {path}")
            out.setdefault(section, {})[key] = value
    return out


def parse_config(path: str | Path | None = None, overrides: dict | None = None, env: dict | None = None) -> RunConfig:
    """Merge defaults, file, environment and ``overrides``.

    ``overrides`` maps ``(section, key)`` tuples, ``"section.key"`` strings or
    bare unique key names to raw strings or already-typed values.
    """
    env = os.environ if env is None else env
    values = defaults()
    if path is not None:
        for section, keys in read_config_file(path).items():
            for key, raw in keys.items():
                values[section][key] = _parse_value(section, key, raw)
    if env.get(OUTPUT_ENV):
        values["run"]["output_dir"] = env[OUTPUT_ENV]
    for name, raw in (overrides or {}).items():
        section, key = _resolve(name)
        values[section][key] = _parse_value(section, key, raw)
    _cross_check(values)
    cfg = RunConfig(values)
    # constructing every component re-runs its own invariants
    for attr, section in (("hyper", "hyper"), ("model", "model"), ("train", "train"), ("adapt", "adapt"), ("solver", "solver"), ("anomaly", "anomaly")):
        try:
            getattr(cfg, attr)
        except ValueError as exc:
            raise ConfigError(section, str(exc)) from None
    return cfg


def _resolve(name) -> tuple[str, str]:
    if isinstance(name, tuple):
        section, key = name
    elif "." in name:
        section, key = name.split(".", 1)
    else:
        hits = [(s, name) for s, keys in SCHEMA.items() if name in keys]
        if len(hits) != 1:
            raise ConfigError(name, "unknown key" if not hits else "ambiguous key; qualify it as section.key")
        section, key = hits[0]
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigError(f"{section}.{key}", "unknown key")
    return section, key


def _cross_check(values):
    m = values["model"]
    if m["channels"] % m["groups"]:
        raise ConfigError("model.groups", f"must divide model.channels ({m['channels']}), got {m['groups']}")
    for section, lo, hi in (("anomaly", "count_min", "count_max"), ("anomaly", "intensity_min", "intensity_max"),
                            ("anomaly", "size_min", "size_max"), ("run", "sigma_min", "sigma_max")):
        if values[section][lo] > values[section][hi]:
            raise ConfigError(f"{section}.{lo}", f"must not exceed {section}.{hi}")
