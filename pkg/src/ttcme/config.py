"""YAML model configs.

A config declares species, reactions, an optional parameter grid, the
initial state and solver, time and steady-state settings. Loading reports
every problem at once, each with its field path.
"""

from importlib import resources
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import yaml

from pydantic import Field, ValidationError, field_validator, model_validator

from ttcme.amen import AmenConfig
from ttcme.base_model import BaseModel
from ttcme.cme_model import delta_initial, exp_uniform_grid, multinomial_initial
from ttcme.exceptions import ConfigError
from ttcme.reactions import ParameterAxis, Reaction, ReactionSystem, Species, reference_errors
from ttcme.time_integration import StepSchedule, TimeGrid
from ttcme.tt_core import TTVector


def parse_schedule(text: str) -> tuple[str, float]:
    """``constant``, ``exponential`` or ``exp:<rate>`` to a kind and a rate."""
    text = text.strip()
    if text == "constant":
        return "constant", 0.05
    if text == "exponential":
        return "exponential", 0.05
    if text.startswith("exp:"):
        try:
            rate = float(text[4:])
        except ValueError:
            raise ValueError(f"invalid exponential rate in schedule '{text}'") from None
        if rate <= 0:
            raise ValueError(f"exponential rate must be positive in schedule '{text}'")
        return "exponential", rate
    raise ValueError(f"unknown schedule '{text}', expected constant or exp:<rate>")


class SpeciesConfig(BaseModel):
    """A species with a grid of ``2**bits`` copy numbers; ``size`` may replace ``bits``."""

    name: str
    bits: int = Field(ge=1)

    @model_validator(mode="before")
    @classmethod
    def _size_to_bits(cls, data):
        if isinstance(data, dict) and "size" in data:
            data = dict(data)
            size = data.pop("size")
            if "bits" in data:
                raise ValueError("give either bits or size, not both")
            if not isinstance(size, int) or size < 2 or size & (size - 1):
                raise ValueError(f"size {size} is not a power of two")
            data["bits"] = size.bit_length() - 1
        return data


class GridConfig(BaseModel):
    type: Literal["exp-uniform", "list"] = "exp-uniform"
    min: Optional[float] = Field(default=None, gt=0.0)
    max: Optional[float] = Field(default=None, gt=0.0)
    points: int = Field(default=16, ge=2)
    tracked: list[float] = Field(default_factory=list)
    values: Optional[list[float]] = None

    @model_validator(mode="after")
    def _bounds(self) -> "GridConfig":
        if self.type == "list":
            if not self.values:
                raise ValueError("a list grid needs values")
        elif self.min is None or self.max is None or self.min >= self.max:
            raise ValueError("an exp-uniform grid needs 0 < min < max")
        return self

    def values_array(self) -> np.ndarray:
        if self.type == "list":
            return np.asarray(self.values, dtype=float)
        return exp_uniform_grid(self.min, self.max, self.points, self.tracked)


class ParameterConfig(BaseModel):
    name: str
    grid: GridConfig


class InitialConfig(BaseModel):
    """Initial distribution: a point mass or a multinomial."""

    kind: Literal["delta", "multinomial"] = "delta"
    state: Optional[list[int]] = None
    n: int = Field(default=0, ge=0)
    p: list[float] = Field(default_factory=list)


class SolverConfig(BaseModel):
    eps: float = Field(default=1e-6, gt=0.0, lt=1.0)
    rmax: Optional[int] = Field(default=None, ge=1)
    max_sweeps: int = Field(default=20, ge=1)
    enrich_rank: int = Field(default=4, ge=1)
    resid_rank: int = Field(default=4, ge=1)
    truncate: bool = True
    local_direct_threshold: int = Field(default=1500, ge=1)
    local_iter_tol: Optional[float] = Field(default=None, gt=0.0)
    local_iter_maxit: int = Field(default=200, ge=1)
    seed: int = 0

    def amen(self) -> AmenConfig:
        return AmenConfig(tol=self.eps, **self.model_dump(exclude={"eps"}))


class TimeConfig(BaseModel):
    T: float = Field(default=1.0, gt=0.0)
    T0: float = Field(default=1.0, gt=0.0)
    Nt: int = Field(default=1, ge=1)
    schedule: str = "constant"

    @field_validator("schedule")
    @classmethod
    def _schedule(cls, v: str) -> str:
        parse_schedule(v)
        return v

    @field_validator("Nt")
    @classmethod
    def _power_of_two(cls, v: int) -> int:
        if v & (v - 1):
            raise ValueError(f"Nt={v} is not a power of two")
        return v

    def grid(self) -> TimeGrid:
        kind, rate = parse_schedule(self.schedule)
        return TimeGrid(T=self.T, T0=min(self.T0, self.T), Nt=self.Nt, schedule=kind, rate=rate)


class SteadyConfig(BaseModel):
    T0: float = Field(default=1.0, gt=0.0)
    schedule: str = "constant"
    eps_final: float = Field(default=1e-6, gt=0.0)
    c: float = Field(default=0.1, gt=0.0, lt=1.0)
    max_iterations: int = Field(default=200, ge=1)

    @field_validator("schedule")
    @classmethod
    def _schedule(cls, v: str) -> str:
        parse_schedule(v)
        return v

    def step_schedule(self) -> StepSchedule:
        kind, rate = parse_schedule(self.schedule)
        return StepSchedule(kind=kind, T0=self.T0, rate=rate)


class ObservablesConfig(BaseModel):
    """Outputs beyond means, mass and residuals.

    Attributes:
        marginals (list[str]): Species whose marginals are written
        times (list[float]): Times at which marginals are written during
            propagation (the first interval end at or after each)
    """

    marginals: list[str] = Field(default_factory=list)
    times: list[float] = Field(default_factory=list)


class ModelConfig(BaseModel):
    """A complete model config.

    Attributes:
        name (str): Model label
        species (list[SpeciesConfig]): Species and their grid sizes
        reactions (list[Reaction]): Reactions
        parameter (Optional[ParameterConfig]): Parameter axis for sweeps
        initial (InitialConfig): Initial distribution
        solver (SolverConfig): AMEn settings; ``eps`` doubles as rounding tolerance
        time (TimeConfig): Propagation settings
        steady (SteadyConfig): Implicit Euler settings
        observables (ObservablesConfig): Extra outputs
    """

    name: str = "model"
    species: list[SpeciesConfig] = Field(min_length=1)
    reactions: list[Reaction] = Field(min_length=1)
    parameter: Optional[ParameterConfig] = None
    initial: InitialConfig = Field(default_factory=InitialConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    time: TimeConfig = Field(default_factory=TimeConfig)
    steady: SteadyConfig = Field(default_factory=SteadyConfig)
    observables: ObservablesConfig = Field(default_factory=ObservablesConfig)

    def system(self) -> ReactionSystem:
        parameter = None
        if self.parameter is not None:
            parameter = ParameterAxis(
                name=self.parameter.name, values=tuple(self.parameter.grid.values_array())
            )
        return ReactionSystem(
            name=self.name,
            species=[Species(name=s.name, bits=s.bits) for s in self.species],
            reactions=self.reactions,
            parameter=parameter,
        )

    def initial_state(self, sys: Optional[ReactionSystem] = None) -> TTVector:
        sys = sys or self.system()
        if self.initial.kind == "multinomial":
            return multinomial_initial(self.initial.n, self.initial.p, sys)
        return delta_initial(sys, self.initial.state)


def _path_of(loc: tuple) -> str:
    return ".".join(str(part) for part in loc) or "<root>"


def _semantic_errors(cfg: ModelConfig) -> list[tuple[str, str]]:
    names = [s.name for s in cfg.species]
    param = cfg.parameter.name if cfg.parameter else None
    errors = []
    for message in reference_errors(names, cfg.reactions, param):
        path, _, text = message.partition(": ")
        errors.append((path, text))
    init = cfg.initial
    if init.kind == "delta" and init.state is not None and len(init.state) != len(names):
        errors.append(("initial.state", f"needs {len(names)} entries, got {len(init.state)}"))
    if init.kind == "multinomial" and len(init.p) != len(names):
        errors.append(("initial.p", f"needs {len(names)} probabilities, got {len(init.p)}"))
    for k, name in enumerate(cfg.observables.marginals):
        if name not in names:
            errors.append((f"observables.marginals.{k}", f"unknown species '{name}'"))
    return errors


def load_config(path: Union[str, Path]) -> ModelConfig:
    """Read and validate a YAML model config.

    Args:
        path (Union[str, Path]): Config file

    Returns:
        ModelConfig: Validated config

    Raises:
        FileNotFoundError: If the file does not exist
        ConfigError: Listing every schema and reference violation
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as e:
        raise ConfigError([("<root>", f"invalid YAML: {e}")], str(path)) from e
    if not isinstance(raw, dict):
        raise ConfigError([("<root>", "config must be a mapping")], str(path))
    try:
        cfg = ModelConfig.model_validate(raw)
    except ValidationError as e:
        errors = [(_path_of(err["loc"]), err["msg"]) for err in e.errors()]
        raise ConfigError(errors, str(path)) from e
    errors = _semantic_errors(cfg)
    if errors:
        raise ConfigError(errors, str(path))
    return cfg


def bundled_model_path(name: str) -> Path:
    """Path of a config shipped with the package (``cascade20``, ``toggle``, ...)."""
    return Path(str(resources.files("ttcme.models") / f"{name}.yml"))


def resolve_config_path(arg: str) -> Path:
    """A file path, or the name of a bundled model.

    Raises:
        FileNotFoundError: If neither exists
    """
    path = Path(arg)
    if path.exists():
        return path
    bundled = bundled_model_path(arg)
    if bundled.exists():
        return bundled
    raise FileNotFoundError(f"Config file not found: {arg}")
