"""Synthetic designs and registered experiments."""

from .experiments import load_registry, oracle_weights, resolve_params, run_experiment, write_outputs
from .generators import (
    ScenarioSpec,
    Truth,
    gen_highdim_shared,
    gen_indicator,
    gen_interaction,
    generate,
)

__all__ = [
    "ScenarioSpec",
    "Truth",
    "gen_highdim_shared",
    "gen_indicator",
    "gen_interaction",
    "generate",
    "load_registry",
    "oracle_weights",
    "resolve_params",
    "run_experiment",
    "write_outputs",
]
