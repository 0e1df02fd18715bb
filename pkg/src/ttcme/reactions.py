"""Reaction systems on a truncated copy-number lattice.

Only numpy is used here so that the reference solvers can evaluate rates
without touching the tensor-train code.

Users give each reaction its stoichiometric change ``s``. The operator is
assembled from the shift vector ``z = -s``: a reaction moving the state
from ``x`` to ``x + s`` brings probability into ``x`` from ``x + z``.
"""

from typing import Literal, Optional, Sequence

import numpy as np

from pydantic import Field, field_validator, model_validator

from ttcme.base_model import BaseModel
from ttcme.exceptions import PropensityError


FactorKind = Literal[
    "const",
    "linear",
    "repression",
    "saturation",
    "michaelis",
    "hill",
    "affine",
    "table",
    "table2",
    "inducible_repression",
]

COUPLED_KINDS = ("table2", "inducible_repression")

_REQUIRED_PARAMS: dict[str, tuple[str, ...]] = {
    "const": ("c",),
    "linear": ("c",),
    "repression": ("a", "b"),
    "saturation": ("a", "b"),
    "michaelis": ("a", "b"),
    "hill": ("alpha", "beta"),
    "affine": ("a",),
    "table": (),
    "table2": (),
    "inducible_repression": ("alpha", "K", "eta"),
}


class PropensityFactor(BaseModel):
    """One factor of a product-form propensity.

    Attributes:
        kind (str): Functional form, see ``_REQUIRED_PARAMS``
        dims (list[str]): Species the factor reads; coupled kinds read one
            species followed by the parameter
        params (dict[str, float]): Coefficients of the form
        values (Optional[list]): Tabulated values for ``table`` (one list) and
            ``table2`` (species × parameter nested lists)
    """

    kind: FactorKind
    dims: list[str] = Field(default_factory=list)
    params: dict[str, float] = Field(default_factory=dict)
    values: Optional[list] = None

    @model_validator(mode="after")
    def _check_params(self) -> "PropensityFactor":
        missing = [p for p in _REQUIRED_PARAMS[self.kind] if p not in self.params]
        if missing:
            raise ValueError(f"{self.kind} factor needs params {missing}")
        arity = 0 if self.kind == "const" else 2 if self.coupled else 1
        if len(self.dims) != arity:
            raise ValueError(f"{self.kind} factor reads {arity} dims, got {len(self.dims)}")
        if self.kind in ("table", "table2") and self.values is None:
            raise ValueError(f"{self.kind} factor needs values")
        return self

    @property
    def coupled(self) -> bool:
        return self.kind in COUPLED_KINDS

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Values of a univariate factor at copy numbers ``x``."""
        p = self.params
        x = np.asarray(x, dtype=float)
        if self.kind == "const":
            return np.full_like(x, p["c"])
        if self.kind == "linear":
            return p["c"] * x
        if self.kind == "repression":
            return p["a"] * p["b"] / (p["b"] + x)
        if self.kind == "saturation":
            return p["a"] * p["b"] * x / (p["b"] * x + 1.0)
        if self.kind == "michaelis":
            return p["a"] * x / (p["b"] + x)
        if self.kind == "hill":
            return p["alpha"] / (1.0 + x ** p["beta"])
        if self.kind == "affine":
            return p["a"] + x
        if self.kind == "table":
            table = np.asarray(self.values, dtype=float)
            return table[x.astype(int)]
        raise ValueError(f"{self.kind} factor depends on the parameter")

    def evaluate2(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Table of a coupled factor, rows over ``x`` and columns over ``y``."""
        x = np.asarray(x, dtype=float)[:, None]
        y = np.asarray(y, dtype=float)[None, :]
        if self.kind == "inducible_repression":
            p = self.params
            return p["alpha"] / (1.0 + x / (1.0 + y / p["K"]) ** p["eta"])
        if self.kind == "table2":
            table = np.asarray(self.values, dtype=float)
            return table[x[:, 0].astype(int)][:, : y.shape[1]]
        raise ValueError(f"{self.kind} factor does not depend on the parameter")


class PropensitySpec(BaseModel):
    """Product-form propensity ``rate · Π factors``."""

    rate: float = 1.0
    factors: list[PropensityFactor] = Field(default_factory=list)

    @field_validator("factors")
    @classmethod
    def _one_coupled(cls, v: list[PropensityFactor]) -> list[PropensityFactor]:
        if sum(f.coupled for f in v) > 1:
            raise ValueError("at most one parameter-coupled factor per reaction")
        return v


class Reaction(BaseModel):
    name: str
    stoichiometry: dict[str, int]
    propensity: PropensitySpec = Field(default_factory=PropensitySpec)

    @field_validator("stoichiometry")
    @classmethod
    def _nonzero(cls, v: dict[str, int]) -> dict[str, int]:
        if not any(v.values()):
            raise ValueError("stoichiometry must change at least one species")
        return v


class Species(BaseModel):
    name: str
    bits: int = Field(ge=1)

    @property
    def size(self) -> int:
        return 2**self.bits


class ParameterAxis(BaseModel):
    name: str
    values: tuple[float, ...] = Field(min_length=1)

    @property
    def size(self) -> int:
        return len(self.values)


class ReactionSystem(BaseModel):
    """Species grids, reactions and an optional parameter axis.

    Attributes:
        name (str): Label used in logs and output files
        species (list[Species]): Species with their grid bits
        reactions (list[Reaction]): Reactions with user-facing stoichiometry
        parameter (Optional[ParameterAxis]): Grid of a kinetic parameter
    """

    name: str = "system"
    species: list[Species] = Field(min_length=1)
    reactions: list[Reaction] = Field(min_length=1)
    parameter: Optional[ParameterAxis] = None

    @model_validator(mode="after")
    def _check_references(self) -> "ReactionSystem":
        param = self.parameter.name if self.parameter else None
        errors = reference_errors(self.names, self.reactions, param)
        if errors:
            raise ValueError("; ".join(errors))
        return self

    @property
    def d(self) -> int:
        return len(self.species)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.species]

    @property
    def grid_sizes(self) -> tuple[int, ...]:
        return tuple(s.size for s in self.species)

    @property
    def grid_bits(self) -> tuple[int, ...]:
        return tuple(s.bits for s in self.species)

    @property
    def n_states(self) -> int:
        return int(np.prod(self.grid_sizes, dtype=np.int64))

    def index(self, species: str) -> int:
        return self.names.index(species)

    def change(self, reaction: Reaction) -> np.ndarray:
        """Stoichiometric change ``s`` as a d-vector."""
        s = np.zeros(self.d, dtype=int)
        for name, value in reaction.stoichiometry.items():
            s[self.index(name)] = value
        return s

    def shift(self, reaction: Reaction) -> np.ndarray:
        """Shift-operator vector ``z = -s`` used in ``(J**z - I)·diag(w)``."""
        return -self.change(reaction)

    def scalar_rate(self, reaction: Reaction) -> float:
        rate = reaction.propensity.rate
        for f in reaction.propensity.factors:
            if f.kind == "const":
                rate *= f.params["c"]
        return rate

    def univariate_tables(self, reaction: Reaction) -> dict[int, np.ndarray]:
        """Species index -> product of the univariate factors on its grid."""
        tables: dict[int, np.ndarray] = {}
        for f in reaction.propensity.factors:
            if f.kind == "const" or f.coupled:
                continue
            i = self.index(f.dims[0])
            values = f.evaluate(np.arange(self.species[i].size))
            tables[i] = tables[i] * values if i in tables else values
        for i, values in tables.items():
            _check_values(reaction.name, values)
        return tables

    def coupled_table(self, reaction: Reaction) -> Optional[tuple[int, np.ndarray]]:
        """Species index and ``(N_i, N_y)`` table of the parameter-coupled factor."""
        for f in reaction.propensity.factors:
            if f.coupled:
                if self.parameter is None:
                    raise PropensityError(reaction.name, "no parameter axis declared")
                i = self.index(f.dims[0])
                table = f.evaluate2(np.arange(self.species[i].size), self.parameter.values)
                _check_values(reaction.name, table)
                return i, table
        return None

    def at_parameter(self, j: int) -> "ReactionSystem":
        """The system with the parameter fixed to its ``j``-th grid value.

        Parameter-coupled factors become ``table`` factors over their species.
        """
        if self.parameter is None:
            return self
        if not 0 <= j < self.parameter.size:
            raise IndexError(f"parameter index {j} outside 0..{self.parameter.size - 1}")
        reactions = []
        for reaction in self.reactions:
            factors = []
            for f in reaction.propensity.factors:
                if f.coupled:
                    i = self.index(f.dims[0])
                    column = f.evaluate2(np.arange(self.species[i].size), self.parameter.values)
                    f = PropensityFactor(kind="table", dims=f.dims[:1], values=column[:, j].tolist())
                factors.append(f)
            propensity = PropensitySpec(rate=reaction.propensity.rate, factors=factors)
            reactions.append(reaction.model_copy(update={"propensity": propensity}))
        value = self.parameter.values[j]
        return ReactionSystem(
            name=f"{self.name}[{self.parameter.name}={value:g}]",
            species=self.species,
            reactions=reactions,
        )

    def dependencies(self, reaction: Reaction) -> set[int]:
        return {
            self.index(f.dims[0]) for f in reaction.propensity.factors if f.kind != "const"
        }


def _check_values(reaction: str, values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise PropensityError(reaction, "propensity has non-finite values on the grid")
    if np.any(values < 0):
        raise PropensityError(reaction, "propensity is negative on the grid")


def reference_errors(
    names: Sequence[str], reactions: Sequence[Reaction], param: Optional[str]
) -> list[str]:
    """Every dangling species or parameter name, with its field path."""
    errors = []
    if len(set(names)) != len(names):
        errors.append("species: names must be unique")
    for k, r in enumerate(reactions):
        for name in r.stoichiometry:
            if name not in names:
                errors.append(f"reactions.{k}.stoichiometry: unknown species '{name}'")
        for j, f in enumerate(r.propensity.factors):
            species_dims = f.dims[:1] if f.coupled else f.dims
            for name in species_dims:
                if name not in names:
                    errors.append(
                        f"reactions.{k}.propensity.factors.{j}.dims: unknown species '{name}'"
                    )
            if f.coupled and f.dims[1] != param:
                errors.append(
                    f"reactions.{k}.propensity.factors.{j}.dims: "
                    f"'{f.dims[1]}' is not the declared parameter"
                )
    return errors
