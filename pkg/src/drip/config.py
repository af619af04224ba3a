"""Experiment configuration: schema, INI/JSON loading and serialization.

INI layout: one section per block below, ``key = value`` lines, lists written
as comma-separated values. JSON uses the same nesting. A run manifest (JSON
with a ``config`` key) is accepted too, so a run can be replayed from it.
"""

from __future__ import annotations

import configparser
import json
import re
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending file and line when known."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemSection(_Section):
    h_seed: int = Field(0, ge=0)
    h_hidden: int = Field(16, ge=1)
    h_weight_std: float = Field(0.5, ge=0)
    drift_coeff: float = 0.05
    input_gain: float = Field(0.25, gt=0)
    mu_base: float = 0.1
    mu_slope: float = 0.05
    sigma_base: float = 0.1
    sigma_slope: float = 0.05
    lambda_mu_reading: Literal["ones", "diagonal"] = "ones"
    uncertainty_scale: float = Field(1.0, ge=0)
    expert_sign: Literal["cancel_h", "subtract_h"] = "cancel_h"
    k_gain: float = 2.0
    probe_radius: float = Field(3.0, gt=0)
    probes: int = Field(10_000, ge=10_000)
    growth_grid_points: int = Field(1000, ge=1000)
    lipschitz_samples: int = Field(5000, ge=1000)


class PartitionSection(_Section):
    horizon: float = Field(10.0, gt=0)
    k: int = Field(100, ge=1)
    substeps: int = Field(10, ge=1)


class InitialLawSection(_Section):
    kind: Literal["point_mass", "uniform_box", "gaussian"] = "uniform_box"
    center: list[float] = []
    half_width: float = Field(1.0, ge=0)
    std: float = Field(1.0, ge=0)


class TrainingSection(_Section):
    n: int = Field(20, ge=1)
    hidden: list[int] = [16]
    linear_skip: bool = True
    lr: float = Field(1e-3, gt=0)
    steps: int = Field(5000, ge=1)
    beta_start: float = Field(1.0, gt=0)
    beta_end: float = Field(50.0, gt=0)
    smoothing: Literal["logsumexp", "hard_max"] = "logsumexp"
    jac_norm: Literal["operator", "frobenius"] = "operator"
    init_seed: int = Field(0, ge=0)


class L1Section(_Section):
    omega: float = Field(20.0, gt=0)
    ts: float = Field(0.01, gt=0)
    lambda_s: float = Field(10.0, gt=0)
    adaptation_sign_variant: Literal["verbatim", "negated_exponent"] = "verbatim"


class EvaluationSection(_Section):
    ensemble_size: int = Field(100, ge=30)
    coupling: Literal["synchronous", "independent", "shifted"] = "synchronous"
    bar_kind: Literal["point_mass", "uniform_box", "gaussian"] = "uniform_box"
    bar_center: list[float] = []
    bar_half_width: float = Field(1.0, ge=0)
    bar_std: float = Field(1.0, ge=0)
    shift: list[float] = []
    scale: float = 1.0
    p_orders: list[int] = [1, 2, 3]
    deltas: list[float] = [0.1, 0.05]
    iss_draws: int = Field(100, ge=1)
    svg: bool = True

    @field_validator("p_orders")
    @classmethod
    def _positive_orders(cls, v):
        if not v or min(v) < 1:
            raise ValueError("p_orders must be non-empty integers >= 1")
        return v

    @field_validator("deltas")
    @classmethod
    def _unit_deltas(cls, v):
        if any(not 0 < d < 1 for d in v):
            raise ValueError("deltas must lie in (0, 1)")
        return v


class SweepSection(_Section):
    omega: list[float] = [10.0, 20.0, 40.0]
    ts: list[float] = [0.01, 0.02]
    lambda_s: list[float] = [10.0]


class RunSection(_Section):
    master_seed: int = Field(0, ge=0, lt=2 ** 64)


class ExperimentConfig(_Section):
    system: SystemSection = SystemSection()
    partition: PartitionSection = PartitionSection()
    initial_law: InitialLawSection = InitialLawSection()
    training: TrainingSection = TrainingSection()
    l1: L1Section = L1Section()
    evaluation: EvaluationSection = EvaluationSection()
    sweep: SweepSection = SweepSection()
    run: RunSection = RunSection()

    @model_validator(mode="after")
    def _ts_on_grid(self):
        dt = self.partition.horizon / (self.partition.k * self.partition.substeps)
        for ts in [self.l1.ts] + list(self.sweep.ts):
            ratio = ts / dt
            if ratio < 1 - 1e-9 or abs(ratio - round(ratio)) > 1e-6:
                raise ValueError(f"l1 ts={ts} is not an integer multiple of the substep {dt}")
        return self


# loading

def _list_fields():
    out = {}
    for name, sec in ExperimentConfig.model_fields.items():
        model = sec.annotation
        out[name] = {k for k, f in model.model_fields.items() if "list" in str(f.annotation)}
    return out


def _key_lines(text: str) -> dict:
    """(section, key) -> 1-based line number, and section -> line of its header."""
    lines, section = {}, None
    for no, raw in enumerate(text.splitlines(), 1):
        s = raw.strip()
        m = re.match(r"^\[([^\]]+)\]$", s)
        if m:
            section = m.group(1).strip()
            lines[(section, None)] = no
            continue
        m = re.match(r"^([^=:#;\s][^=:]*?)\s*[=:]", s)
        if m and section is not None:
            lines[(section, m.group(1).strip().lower())] = no
    return lines


def _parse_ini(text: str, source: str) -> tuple[dict, dict]:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    lists = _list_fields()
    data = {}
    for section in cp.sections():
        entries = {}
        for key, value in cp.items(section):
            if key in lists.get(section, ()):
                entries[key] = [v.strip() for v in value.split(",") if v.strip()]
            else:
                entries[key] = value.strip()
        data[section] = entries
    return data, _key_lines(text)


def _format_error(exc: ValidationError, source: str, lines: dict) -> str:
    msgs = []
    for err in exc.errors():
        loc = [str(x) for x in err["loc"]]
        line = None
        if len(loc) >= 2:
            line = lines.get((loc[0], loc[1])) or lines.get((loc[0], None))
        elif loc:
            line = lines.get((loc[0], None))
        where = f"{source}:{line}" if line else source
        msgs.append(f"{where}: {'.'.join(loc) or 'config'}: {err['msg']}")
    return "\n".join(msgs)


def parse_config(text: str, source: str = "<config>", fmt: str | None = None) -> ExperimentConfig:
    if fmt is None:
        fmt = "json" if text.lstrip().startswith("{") else "ini"
    if fmt == "json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}:{exc.lineno}: {exc.msg}") from exc
        if isinstance(data, dict) and "config" in data and "artifacts" in data:
            data = data["config"]
        lines = {}
    else:
        data, lines = _parse_ini(text, source)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc, source, lines)) from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from exc
    fmt = "json" if path.suffix.lower() == ".json" else None
    return parse_config(text, str(path), fmt)


# serialization

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_ini(cfg: ExperimentConfig) -> str:
    out = []
    for section, values in cfg.model_dump().items():
        out.append(f"[{section}]")
        out += [f"{k} = {_fmt(v)}" for k, v in values.items()]
        out.append("")
    return "\n".join(out)


def to_json(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.model_dump(), indent=2)
