"""Flat text configuration for the experiment runner.

Grammar (line oriented; ``#`` starts a comment anywhere):

    [section]
    key = value

Values are typed scalars or lists:

    int     42          float   0.5, 1e-3     bool    true / false
    string  bare-token or "quoted"
    list    [v1, v2, ...] of numbers

Sections and keys are fixed by the schema below; unknown keys are
errors, not warnings.  ``parse_config`` returns a fully resolved
ExperimentPlan: every field is either explicitly set or filled from the
documented defaults, and ``render_plan`` writes the plan back out in the
same grammar, so a manifest doubles as a config.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field, fields
from typing import Optional


class ConfigError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = "line %d: %s" % (line, message)
        super().__init__(message)


class ParseError(ConfigError):
    pass


class UnknownKeyError(ConfigError):
    pass


class MissingRequiredError(ConfigError):
    pass


class TypeMismatchError(ConfigError):
    pass


class InvalidValueError(ConfigError):
    pass


class ExperimentKind(enum.Enum):
    PRESET_VALIDATION = "PresetValidation"
    LAMBDA_SLOPE = "LambdaSlope"
    LIMIT_AND_RATE = "LimitAndRate"
    CONTROL_EXPANSION = "ControlExpansion"
    COUPLING_DECAY = "CouplingDecay"


DRIVER_NAMES = ("zero", "constant", "linear_zx")
TERMINAL_NAMES = ("zero", "linear", "quadratic", "running_max_sq")
CONTROL_NAMES = ("quadratic_cost_pm1",)
ERGODIC_SOURCES = ("known", "discounted")

_INT_RE = re.compile(r"[+-]?\d+$")


@dataclass(frozen=True)
class ExperimentPlan:
    """Fully resolved experiment description (declarative: object
    construction happens in the runner)."""

    experiment: ExperimentKind
    output_dir: str
    preset: Optional[str] = None
    ergodic_source: str = "known"
    # custom model (ignored when preset is set)
    dim: int = 1
    a_eigenvalues: tuple = (-1.0,)
    g_diag: tuple = (1.0,)
    drift: str = "zero"
    drift_scale: float = 0.5
    driver_name: str = "zero"
    driver_value: float = 0.0
    terminal_name: str = "zero"
    control_name: str = "quadratic_cost_pm1"
    # grids
    t_grid: tuple = (2.0, 4.0, 8.0, 16.0)
    x_list: tuple = (0.0, 1.0)
    alpha_schedule: tuple = (0.5, 0.25)
    horizon_factor: float = 8.0
    # budgets
    paths: int = 20000
    steps_per_unit: int = 50
    basis_degree: int = 3
    picard_iters: int = 2
    seed: int = 7
    threads: int = 1


# section -> key -> (type tag, ExperimentPlan field)
_SCHEMA = {
    "experiment": {
        "kind": ("str", "experiment"),
        "preset": ("str", "preset"),
        "output_dir": ("str", "output_dir"),
        "ergodic": ("str", "ergodic_source"),
    },
    "model": {
        "dim": ("int", "dim"),
        "a_eigenvalues": ("list", "a_eigenvalues"),
        "g_diag": ("list", "g_diag"),
        "drift": ("str", "drift"),
        "drift_scale": ("float", "drift_scale"),
    },
    "driver": {
        "name": ("str", "driver_name"),
        "value": ("float", "driver_value"),
    },
    "terminal": {
        "name": ("str", "terminal_name"),
    },
    "control": {
        "name": ("str", "control_name"),
    },
    "grids": {
        "t_grid": ("list", "t_grid"),
        "x_list": ("list", "x_list"),
        "alpha_schedule": ("list", "alpha_schedule"),
        "horizon_factor": ("float", "horizon_factor"),
    },
    "budgets": {
        "paths": ("int", "paths"),
        "steps_per_unit": ("int", "steps_per_unit"),
        "basis_degree": ("int", "basis_degree"),
        "picard_iters": ("int", "picard_iters"),
        "seed": ("int", "seed"),
        "threads": ("int", "threads"),
    },
}


def _strip_comment(line: str) -> str:
    out = []
    in_quote = False
    for ch in line:
        if ch == '"':
            in_quote = not in_quote
        if ch == "#" and not in_quote:
            break
        out.append(ch)
    return "".join(out)


def _parse_scalar(token: str, line_no: int):
    token = token.strip()
    if token.startswith('"') and token.endswith('"') and len(token) >= 2:
        return token[1:-1]
    if token in ("true", "false"):
        return token == "true"
    if _INT_RE.match(token):
        return int(token)
    try:
        return float(token)
    except ValueError:
        pass
    if not token:
        raise ParseError("empty value", line_no)
    return token  # bare string


def _parse_value(text: str, line_no: int):
    text = text.strip()
    if text.startswith("["):
        if not text.endswith("]"):
            raise ParseError("unterminated list", line_no)
        body = text[1:-1].strip()
        if not body:
            return ()
        items = []
        for part in body.split(","):
            v = _parse_scalar(part, line_no)
            if not isinstance(v, (int, float)) or isinstance(v, bool):
                raise TypeMismatchError("lists may contain only numbers", line_no)
            items.append(float(v))
        return tuple(items)
    return _parse_scalar(text, line_no)


def _coerce(value, type_tag: str, key: str, line_no: int):
    if type_tag == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeMismatchError("%s expects an integer, got %r" % (key, value),
                                    line_no)
        return value
    if type_tag == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeMismatchError("%s expects a number, got %r" % (key, value),
                                    line_no)
        return float(value)
    if type_tag == "str":
        if not isinstance(value, str):
            raise TypeMismatchError("%s expects a string, got %r" % (key, value),
                                    line_no)
        return value
    if type_tag == "list":
        if not isinstance(value, tuple):
            raise TypeMismatchError("%s expects a list, got %r" % (key, value),
                                    line_no)
        return value
    raise AssertionError(type_tag)


def parse_config(text: str) -> ExperimentPlan:
    """Parse and validate a config; errors carry line numbers."""
    section = None
    values = {}
    lines = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw).strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ParseError("unterminated section header", line_no)
            section = line[1:-1].strip()
            if section not in _SCHEMA:
                raise UnknownKeyError("unknown section [%s]; known: %s"
                                      % (section, ", ".join(sorted(_SCHEMA))), line_no)
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value', got %r" % raw.strip(), line_no)
        if section is None:
            raise ParseError("key outside any [section]", line_no)
        key, _, rhs = line.partition("=")
        key = key.strip()
        if key not in _SCHEMA[section]:
            raise UnknownKeyError("unknown key %r in section [%s]" % (key, section),
                                  line_no)
        if (section, key) in values:
            raise ParseError("duplicate key %s.%s" % (section, key), line_no)
        type_tag, field_name = _SCHEMA[section][key]
        value = _coerce(_parse_value(rhs, line_no), type_tag, key, line_no)
        values[(section, key)] = (field_name, value)
        lines[(section, key)] = line_no

    if ("experiment", "kind") not in values:
        raise MissingRequiredError("experiment.kind is required")
    kind_raw = values[("experiment", "kind")][1]
    try:
        kind = ExperimentKind(kind_raw)
    except ValueError:
        raise InvalidValueError(
            "unknown experiment kind %r; known: %s"
            % (kind_raw, ", ".join(k.value for k in ExperimentKind)),
            lines[("experiment", "kind")])

    kwargs = {"experiment": kind}
    for (section, key), (field_name, value) in values.items():
        if field_name == "experiment":
            continue
        kwargs[field_name] = value
    if "output_dir" not in kwargs:
        kwargs["output_dir"] = "runs/%s" % kind.value.lower()
    plan = ExperimentPlan(**kwargs)
    _validate_plan(plan, lines)
    return plan


def _validate_plan(plan: ExperimentPlan, lines=None) -> None:
    lines = lines or {}

    def where(section, key):
        return lines.get((section, key))

    if plan.preset is None and plan.experiment is not ExperimentKind.CONTROL_EXPANSION:
        if plan.experiment is ExperimentKind.PRESET_VALIDATION:
            raise MissingRequiredError("PresetValidation requires experiment.preset")
    if plan.ergodic_source not in ERGODIC_SOURCES:
        raise InvalidValueError("ergodic must be one of %s" % (ERGODIC_SOURCES,),
                                where("experiment", "ergodic"))
    if plan.driver_name not in DRIVER_NAMES:
        raise InvalidValueError("driver.name must be one of %s" % (DRIVER_NAMES,),
                                where("driver", "name"))
    if plan.terminal_name not in TERMINAL_NAMES:
        raise InvalidValueError("terminal.name must be one of %s" % (TERMINAL_NAMES,),
                                where("terminal", "name"))
    if plan.control_name not in CONTROL_NAMES:
        raise InvalidValueError("control.name must be one of %s" % (CONTROL_NAMES,),
                                where("control", "name"))
    if not plan.t_grid:
        raise MissingRequiredError("grids.t_grid must be nonempty",
                                   where("grids", "t_grid"))
    if any(b <= a for a, b in zip(plan.t_grid, plan.t_grid[1:])):
        raise InvalidValueError("grids.t_grid must be strictly increasing",
                                where("grids", "t_grid"))
    if any(t <= 0 for t in plan.t_grid):
        raise InvalidValueError("grids.t_grid entries must be positive",
                                where("grids", "t_grid"))
    if not plan.x_list:
        raise MissingRequiredError("grids.x_list must be nonempty",
                                   where("grids", "x_list"))
    if plan.experiment is ExperimentKind.COUPLING_DECAY and len(plan.x_list) < 2:
        raise InvalidValueError("CouplingDecay needs two starting points in x_list",
                                where("grids", "x_list"))
    if (len(plan.alpha_schedule) < 2
            or any(a <= 0 for a in plan.alpha_schedule)
            or any(b >= a for a, b in zip(plan.alpha_schedule, plan.alpha_schedule[1:]))):
        raise InvalidValueError(
            "grids.alpha_schedule must be positive and strictly decreasing "
            "with at least two entries", where("grids", "alpha_schedule"))
    for name in ("paths", "steps_per_unit", "basis_degree", "picard_iters", "threads"):
        if getattr(plan, name) < 1:
            raise InvalidValueError("budgets.%s must be >= 1" % name,
                                    where("budgets", name))
    if plan.horizon_factor <= 0:
        raise InvalidValueError("grids.horizon_factor must be positive",
                                where("grids", "horizon_factor"))
    if plan.dim < 1 or len(plan.a_eigenvalues) != plan.dim or len(plan.g_diag) != plan.dim:
        raise InvalidValueError("model.dim, a_eigenvalues and g_diag must agree",
                                where("model", "dim"))


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, tuple):
        return "[%s]" % ", ".join(repr(float(v)) for v in value)
    return str(value)


def render_plan(plan: ExperimentPlan) -> str:
    """Canonical config text of a plan; parse_config round-trips it."""
    plan_fields = {f.name: getattr(plan, f.name) for f in fields(plan)}
    out = ["# machine-written experiment manifest; valid runner config", ""]
    for section, keys in _SCHEMA.items():
        out.append("[%s]" % section)
        for key, (type_tag, field_name) in keys.items():
            value = plan_fields[field_name]
            if field_name == "experiment":
                value = plan.experiment.value
            if value is None:
                continue
            out.append("%s = %s" % (key, _format_value(value)))
        out.append("")
    return "\n".join(out)
