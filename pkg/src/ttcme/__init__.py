"""Tensor-train solvers for chemical master equations."""

from ttcme.amen import AmenConfig, SolveReport, amen_solve
from ttcme.cme_model import assemble_cascade, assemble_cme
from ttcme.config import ModelConfig, load_config
from ttcme.tt_core import Tolerance, TTMatrix, TTVector


__all__ = [
    "AmenConfig",
    "ModelConfig",
    "SolveReport",
    "TTMatrix",
    "TTVector",
    "Tolerance",
    "amen_solve",
    "assemble_cascade",
    "assemble_cme",
    "load_config",
]
