"""YAML configuration documents.

Coefficients may be numbers or arithmetic expressions in the headway token
``h`` (for example ``"1.35/(1+h)"``), so a controller can be rebuilt for each
headway in a sweep.
"""

from __future__ import annotations

import ast
import hashlib
import json
import math
import operator
from importlib import resources
from pathlib import Path
from typing import Any, Literal, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError
from .lti import TransferFunction
from .platoon import InitialCondition, LeaderProfile, PlatoonSpec, build_vehicle_loop

__all__ = [
    "Config",
    "load_config",
    "parse_config",
    "bundled_configs",
    "evaluate_coefficient",
    "config_hash",
]

HEADWAY_TOKEN = "h"

_BINARY = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul, ast.Div: operator.truediv, ast.Pow: operator.pow}
_UNARY = {ast.UAdd: operator.pos, ast.USub: operator.neg}


def evaluate_coefficient(expr: float | int | str, h: float) -> float:
    """Evaluate a number or an arithmetic expression in ``h``."""
    if isinstance(expr, bool):
        raise ConfigError(f"coefficient {expr!r} is not a number")
    if isinstance(expr, (int, float)):
        value = float(expr)
    else:
        try:
            tree = ast.parse(str(expr), mode="eval")
        except SyntaxError as exc:
            raise ConfigError(f"cannot parse coefficient {expr!r}") from exc

        def walk(node):
            if isinstance(node, ast.Expression):
                return walk(node.body)
            if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
                return float(node.value)
            if isinstance(node, ast.Name) and node.id == HEADWAY_TOKEN:
                return float(h)
            if isinstance(node, ast.BinOp) and type(node.op) in _BINARY:
                return _BINARY[type(node.op)](walk(node.left), walk(node.right))
            if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
                return _UNARY[type(node.op)](walk(node.operand))
            raise ConfigError(f"coefficient {expr!r}: only numbers, '{HEADWAY_TOKEN}' and + - * / ** are allowed")

        try:
            value = walk(tree)
        except ZeroDivisionError as exc:
            raise ConfigError(f"coefficient {expr!r} divides by zero at h = {h}") from exc
    if not math.isfinite(value):
        raise ConfigError(f"coefficient {expr!r} is not finite")
    return value


Coefficient = Union[float, str]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TransferFunctionDoc(_Strict):
    num: list[Coefficient] = Field(min_length=1)
    den: list[Coefficient] = Field(min_length=1)

    @field_validator("num", "den")
    @classmethod
    def _check(cls, v):
        for c in v:
            if isinstance(c, str):
                evaluate_coefficient(c, 1.0)
            elif not math.isfinite(c):
                raise ValueError("coefficients must be finite")
        return v

    def build(self, h: float) -> TransferFunction:
        return TransferFunction(
            [evaluate_coefficient(c, h) for c in self.num],
            [evaluate_coefficient(c, h) for c in self.den],
        )


class NoiseDoc(_Strict):
    variance: float = Field(ge=0.0, allow_inf_nan=False)
    distribution: Literal["gaussian", "uniform", "rademacher"] = "gaussian"


class LeaderDoc(_Strict):
    kind: Literal["constant", "piecewise"] = "constant"
    base_speed: float = Field(default=1.0, allow_inf_nan=False)
    changes: list[tuple[int, float]] = Field(default_factory=list)

    def build(self) -> LeaderProfile:
        return LeaderProfile(kind=self.kind, base_speed=self.base_speed, speed_changes=tuple(self.changes))


class InitialDoc(_Strict):
    mu: Union[float, list[float]] = 0.0
    P: Union[Literal["zero"], float, list[list[float]]] = "zero"


class ToleranceDoc(_Strict):
    series_rel_tol: float = Field(default=1e-7, gt=0.0)
    horizon_tail: float = Field(default=1e-6, gt=0.0)


class AnalysisDoc(_Strict):
    grid_size: int = Field(default=2**16, ge=16)
    horizon: int = Field(default=2000, ge=1)
    tolerances: ToleranceDoc = Field(default_factory=ToleranceDoc)


class MonteCarloDoc(_Strict):
    realizations: int = Field(default=20000, ge=1)
    seed: int = Field(default=0, ge=0, lt=2**64)
    horizon: int = Field(default=400, ge=1)
    followers: int | None = Field(default=None, ge=1)
    record: Literal["errors", "full"] = "errors"


class Config(_Strict):
    plant: TransferFunctionDoc
    controller: TransferFunctionDoc
    headway: float = Field(allow_inf_nan=False)
    followers: int = Field(ge=1)
    noise: NoiseDoc
    leader: LeaderDoc = Field(default_factory=LeaderDoc)
    initial_condition: Union[Literal["zero"], InitialDoc] = "zero"
    analysis: AnalysisDoc = Field(default_factory=AnalysisDoc)
    monte_carlo: MonteCarloDoc = Field(default_factory=MonteCarloDoc)

    @field_validator("headway")
    @classmethod
    def _positive_headway(cls, v):
        if not v > 0:
            raise ValueError("h > 0 is the time headway constant")
        return v

    def with_overrides(self, **changes: Any) -> Config:
        """Copy with top-level or dotted-path fields replaced, revalidated."""
        doc = self.normalized()
        for key, value in changes.items():
            target = doc
            parts = key.split(".")
            for p in parts[:-1]:
                target = target.setdefault(p, {})
            target[parts[-1]] = value
        return parse_config(doc)

    def normalized(self) -> dict:
        doc = self.model_dump(mode="json")
        doc["leader"]["changes"] = [list(c) for c in self.leader.changes]
        return doc

    def _initial_condition(self, n: int, N: int) -> InitialCondition | None:
        ic = self.initial_condition
        if ic == "zero":
            return None
        dim = n * N
        full = n * self.followers
        mu = np.full(full, float(ic.mu)) if isinstance(ic.mu, (int, float)) else np.asarray(ic.mu, dtype=float)
        if mu.size != full:
            raise ConfigError(f"initial_condition.mu: expected {full} entries (n*N), got {mu.size}")
        if ic.P == "zero":
            P = np.zeros((full, full))
        elif isinstance(ic.P, (int, float)):
            if ic.P < 0:
                raise ConfigError("initial_condition.P: a scalar variance must be nonnegative")
            P = float(ic.P) * np.eye(full)
        else:
            P = np.asarray(ic.P, dtype=float)
            if P.shape != (full, full):
                raise ConfigError(f"initial_condition.P: expected a {full}x{full} matrix, got {P.shape}")
        # a prefix of the platoon keeps the leading blocks
        try:
            return InitialCondition(mu[:dim], P[:dim, :dim])
        except Exception as exc:
            raise ConfigError(f"initial_condition: {exc}") from exc

    def build_spec(self, N: int | None = None, h: float | None = None, P_d: float | None = None) -> PlatoonSpec:
        h = self.headway if h is None else float(h)
        N = self.followers if N is None else int(N)
        P_d = self.noise.variance if P_d is None else float(P_d)
        if not h > 0:
            raise ConfigError("h > 0 is the time headway constant")
        if N > self.followers and self.initial_condition != "zero":
            raise ConfigError("cannot extend a nonzero initial condition beyond the configured followers")
        base = PlatoonSpec(
            G=self.plant.build(h),
            K=self.controller.build(h),
            h=h,
            N=N,
            P_d=P_d,
            noise_distribution=self.noise.distribution,
            leader=self.leader.build(),
        )
        init = self._initial_condition(build_vehicle_loop(base).T_ss.n, N)
        return base if init is None else base.replace(init=init)

    def monte_carlo_spec(self) -> PlatoonSpec:
        return self.build_spec(N=self.monte_carlo.followers or self.followers)


def _format_error(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        msg = err["msg"].removeprefix("Value error, ")
        parts.append(f"{loc}: {msg}")
    return "; ".join(parts)


def parse_config(doc: Any) -> Config:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a mapping")
    try:
        return Config.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_format_error(exc)) from None


def bundled_configs() -> list[str]:
    root = resources.files("stochplatoon") / "configs"
    return sorted(p.name[: -len(".yaml")] for p in root.iterdir() if p.name.endswith(".yaml"))


def _read_text(source: str | Path) -> str:
    path = Path(source)
    if path.is_file():
        return path.read_text()
    name = str(source)
    if name in bundled_configs():
        return (resources.files("stochplatoon") / "configs" / f"{name}.yaml").read_text()
    raise ConfigError(f"no config file or bundled config named {name!r} (bundled: {', '.join(bundled_configs())})")


def load_config(source: str | Path) -> Config:
    try:
        doc = yaml.safe_load(_read_text(source))
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML: {exc}") from None
    return parse_config(doc)


def config_hash(config: Config) -> str:
    blob = json.dumps(config.normalized(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
