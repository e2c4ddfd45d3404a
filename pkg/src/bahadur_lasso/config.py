"""Run configuration: YAML file, environment overrides and command-line flags.

Precedence, lowest first: defaults, config file, environment
(``BAHADUR_LASSO_OUT``, ``BAHADUR_LASSO_JOBS``), command-line flags.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

ENV_OUT = "BAHADUR_LASSO_OUT"
ENV_JOBS = "BAHADUR_LASSO_JOBS"

Command = Literal["estimate", "simulate", "coverage", "diagnose"]
LAMBDA_RULES = ("theory_pi", "theory_fo", "theory_oracle", "cv")


class RunConfig(BaseModel):
    """Validated settings for one CLI run; unknown keys are rejected."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    command: Command
    seed: int = 0
    out: str = "out"
    jobs: int = Field(1, ge=1)

    # estimate
    input: Optional[str] = None
    estimator: str = "fo"
    weights: Literal["I", "II"] = "I"
    lambda_rule: Union[float, str] = "theory_fo"
    anchors: Optional[List[float]] = None
    kernel: Literal["uniform-ball", "floor-shifted-quadratic"] = "floor-shifted-quadratic"
    bandwidth: Optional[float] = Field(None, gt=0)
    delta: float = Field(0.05, gt=0, lt=1)
    delta_alpha: float = Field(0.05, gt=0, lt=1)
    bootstrap_B: int = Field(1000, ge=1)
    cv_folds: int = Field(5, ge=2)
    reweight_iters: int = Field(2, ge=1)

    # simulate / coverage / diagnose
    scenario: Optional[str] = None
    reps: Optional[int] = Field(None, ge=1)
    estimators: Optional[List[str]] = None
    lambda_modes: Optional[List[Literal["cv", "theory"]]] = None
    gps_methods: List[Literal["MNL", "NW", "plugin", "FO", "oracle"]] = ["MNL", "NW", "plugin", "FO"]
    weights_II: Literal["true", "iterative"] = "true"
    redraw_marginals: bool = False

    @field_validator("lambda_rule")
    @classmethod
    def _check_rule(cls, v):
        if isinstance(v, str):
            try:
                v = float(v)
            except ValueError:
                if v not in LAMBDA_RULES:
                    raise ValueError(f"lambda_rule must be a number or one of {LAMBDA_RULES}")
                return v
        if v < 0:
            raise ValueError("a numeric lambda must be nonnegative")
        return float(v)

    @model_validator(mode="after")
    def _required(self):
        if self.command == "estimate" and not self.input:
            raise ValueError("estimate needs an input CSV")
        if self.command in ("simulate", "coverage", "diagnose") and not self.scenario:
            raise ValueError(f"{self.command} needs a scenario")
        if self.command == "estimate" and self.estimator not in ("plugin", "fo", "adversarial", "saa"):
            raise ValueError("estimate supports estimator plugin, fo, adversarial or saa")
        return self

    def resolved(self) -> Dict[str, Any]:
        """All fields with defaults materialized."""
        return self.model_dump(mode="json")

    def dump_yaml(self) -> str:
        return yaml.safe_dump(self.resolved(), sort_keys=True, allow_unicode=True)


def load_file(path: Optional[str]) -> Dict[str, Any]:
    if path is None:
        return {}
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a mapping at top level")
    return data


def env_overrides(environ: Mapping[str, str] = os.environ) -> Dict[str, Any]:
    out: Dict[str, Any] = {}
    if environ.get(ENV_OUT):
        out["out"] = environ[ENV_OUT]
    if environ.get(ENV_JOBS):
        out["jobs"] = int(environ[ENV_JOBS])
    return out


def build_config(
    command: str,
    file: Optional[str] = None,
    flags: Optional[Mapping[str, Any]] = None,
    environ: Mapping[str, str] = os.environ,
) -> RunConfig:
    """Merge defaults, file, environment and non-``None`` flags, then validate."""
    merged: Dict[str, Any] = dict(load_file(file))
    if "command" in merged and merged["command"] != command:
        raise ValueError(f"config file is for {merged['command']!r}, not {command!r}")
    merged.update(env_overrides(environ))
    merged.update({k: v for k, v in (flags or {}).items() if v is not None})
    merged["command"] = command
    return RunConfig(**merged)
