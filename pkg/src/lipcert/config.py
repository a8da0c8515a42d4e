"""Run configuration: defaults, optional JSON/TOML file, then flag overrides."""

from __future__ import annotations

import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Optional

from .lmi import SolverConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

CONFIG_ENV = "LIPCERT_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    solver: SolverConfig = field(default_factory=SolverConfig)
    # certify-radius bisection
    radius_tol: float = 1e-4
    radius_eps_max: float = 1.0
    radius_max_iter: int = 60
    # stability region bisection
    region_tol: float = 1e-3
    region_eps_min: float = 1e-3
    region_eps_max: float = 1.0
    # sampling
    pairs: int = 100_000
    samples: int = 1000
    steps: int = 100
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        for name in ("radius_tol", "radius_eps_max", "region_tol", "region_eps_min", "region_eps_max"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("radius_max_iter", "pairs", "samples", "jobs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.steps < 0:
            raise ConfigError("steps must be nonnegative")

    @classmethod
    def from_mapping(cls, doc: Mapping[str, Any]) -> "RunConfig":
        doc = dict(doc)
        solver = doc.pop("solver", {}) or {}
        known = {f.name for f in fields(cls)} - {"solver"}
        unknown = set(doc) - known
        solver_known = {f.name for f in fields(SolverConfig)}
        unknown |= {f"solver.{k}" for k in set(solver) - solver_known}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            return cls(solver=SolverConfig(**solver), **doc)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def with_overrides(self, **kw) -> "RunConfig":
        """Copy with non-None keyword values replaced; ``solver_*`` keys go to the solver."""
        top = {k: v for k, v in kw.items() if v is not None and not k.startswith("solver_")}
        sol = {k[len("solver_"):]: v for k, v in kw.items() if v is not None and k.startswith("solver_")}
        try:
            solver = dataclasses.replace(self.solver, **sol)
            return dataclasses.replace(self, solver=solver, **top)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def load_config(path: Optional[str] = None) -> RunConfig:
    """Config from ``path``, else from $LIPCERT_CONFIG, else defaults."""
    path = path or os.environ.get(CONFIG_ENV) or None
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        if p.suffix == ".toml":
            doc = tomllib.loads(raw.decode())
        else:
            doc = json.loads(raw)
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a table/object")
    return RunConfig.from_mapping(doc)
