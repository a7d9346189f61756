"""JSON run configuration: schema, validation and construction of the objects
it describes.

A config has up to six sections: ``game``, ``steps``, ``solver``,
``certify``, ``oracle`` and ``output``. Every section and every key is
optional except ``game.type``; unknown keys are rejected. Infinite box
bounds are written as ``null``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .certify import StepConfig
from .energynet import EIScenario, ParameterRanges, build_ei_gamespec, generate_scenario
from .game import (
    BoxSet,
    CouplingConstraint,
    Dimensions,
    GameError,
    GameSpec,
    QuadraticPayoff,
)
from .graph import ClusterTopology, GraphError, WeightedGraph
from .solver import SolverOptions

BENCHMARK_STEP = 0.002
BENCHMARK_GAIN = 70.0

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_num_or_list = {"oneOf": [_num, {"type": "array", "items": _num, "minItems": 1}]}
_pos_int = {"type": "integer", "minimum": 1}
_matrix = {"type": "array", "items": {"type": "array", "items": _num}}
_range = {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}

_graph = {
    "oneOf": [
        {"enum": ["complete", "ring", "path", "star"]},
        {
            "type": "object",
            "properties": {
                "edges": {"type": "array", "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 3}},
                "kind": {"enum": ["complete", "ring", "path", "star"]},
                "weight": _pos,
            },
            "additionalProperties": False,
        },
    ]
}

_topology = {
    "type": "object",
    "properties": {
        "inner": {"oneOf": [_graph, {"type": "array", "items": _graph}]},
        "leader": _graph,
        "weight": _pos,
    },
    "additionalProperties": False,
}

_bound = {"type": "array", "items": {"type": ["number", "null"]}}

SCHEMA = {
    "type": "object",
    "properties": {
        "game": {
            "type": "object",
            "properties": {
                "type": {"enum": ["energynet", "quadratic"]},
                # energynet
                "seed": {"type": "integer", "minimum": 0},
                "sizes": {"type": "array", "items": _pos_int, "minItems": 1},
                "w": {"type": "integer", "minimum": 0},
                "q_j": {"oneOf": [_pos_int, {"type": "array", "items": _pos_int, "minItems": 1}]},
                "ranges": {
                    "type": "object",
                    "properties": {k: _range for k in ("r", "b", "p", "d", "q", "Q", "A")} | {"o": _num},
                    "additionalProperties": False,
                },
                "data": {"type": "object"},
                # quadratic
                "strategy_dims": {"type": "array", "items": _pos_int, "minItems": 1},
                "hessians": {"type": "array", "items": _matrix},
                "linear": _matrix,
                "offsets": {"type": "array", "items": _num},
                "boxes": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "properties": {"lower": _bound, "upper": _bound},
                        "required": ["lower", "upper"],
                        "additionalProperties": False,
                    },
                },
                "A": {"type": "array", "items": _matrix},
                "b": _matrix,
                "topology": _topology,
            },
            "required": ["type"],
            "additionalProperties": False,
        },
        "steps": {
            "type": "object",
            "properties": {"rho": _num_or_list, "tau": _num_or_list, "sigma": _num_or_list, "nu": _num_or_list,
                           "c": _num},
            "additionalProperties": False,
        },
        "solver": {
            "type": "object",
            "properties": {
                "max_iters": _pos_int,
                "tol_fixed_point": _pos,
                "tol_consensus": _pos,
                "record_every": _pos_int,
                "realization": {"enum": ["compact", "agent", "both"]},
                "lockstep_tol": _pos,
            },
            "additionalProperties": False,
        },
        "certify": {
            "type": "object",
            "properties": {
                "mode": {"enum": ["exact", "sampled"]},
                "connectivity": {"enum": ["combined", "literal"]},
                "samples": _pos_int,
                "seed": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "oracle": {
            "type": "object",
            "properties": {"tol": _pos, "max_iters": _pos_int},
            "additionalProperties": False,
        },
        "output": {
            "type": "object",
            "properties": {"dir": {"type": "string"}},
            "additionalProperties": False,
        },
    },
    "additionalProperties": False,
}


class ConfigError(ValueError):
    pass


def validate(raw: dict) -> dict:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
    return raw


def load(path: str | Path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    return validate(raw)


def default_config(seed: int = 0) -> dict:
    return {
        "game": {"type": "energynet", "seed": int(seed)},
        "steps": {"rho": BENCHMARK_STEP, "tau": BENCHMARK_STEP, "sigma": BENCHMARK_STEP, "nu": BENCHMARK_STEP, "c": BENCHMARK_GAIN},
    }


# -- builders -----------------------------------------------------------------------------

def _graph_from(item, nodes: int, weight: float) -> WeightedGraph:
    if isinstance(item, str):
        kind, wt, edges = item, weight, None
    else:
        kind, wt, edges = item.get("kind"), item.get("weight", weight), item.get("edges")
    if edges is not None:
        return WeightedGraph.from_edges(nodes, edges)
    return getattr(WeightedGraph, kind or "complete")(nodes, wt)


def build_topology(section: dict | None, sizes) -> ClusterTopology:
    section = section or {}
    weight = section.get("weight", 1.0)
    inner = section.get("inner", "complete")
    if isinstance(inner, list):
        if len(inner) != len(sizes):
            raise ConfigError(f"topology.inner lists {len(inner)} graphs for {len(sizes)} clusters")
        graphs = [_graph_from(g, s, weight) for g, s in zip(inner, sizes)]
    else:
        graphs = [_graph_from(inner, s, weight) for s in sizes]
    leader = _graph_from(section.get("leader", "complete"), len(sizes), weight)
    return ClusterTopology(tuple(graphs), leader)


def _bounds(values, dim: int, fill: float) -> np.ndarray:
    if len(values) != dim:
        raise ConfigError(f"box bound needs {dim} entries")
    return np.array([fill if v is None else v for v in values], dtype=float)


@dataclass
class Built:
    spec: GameSpec
    scenario: EIScenario | None = None
    raw: dict = field(default_factory=dict)


def build_game(section: dict, seed_override: int | None = None) -> Built:
    try:
        if section["type"] == "energynet":
            return _build_energynet(section, seed_override)
        return _build_quadratic(section)
    except (GameError, GraphError) as exc:
        raise ConfigError(str(exc)) from None


def _build_energynet(section: dict, seed_override: int | None) -> Built:
    if "data" in section:
        sc = EIScenario.from_dict(section["data"])
    else:
        ranges = ParameterRanges.from_dict(section["ranges"]) if "ranges" in section else None
        seed = seed_override if seed_override is not None else section.get("seed", 0)
        kwargs = {k: section[k] for k in ("sizes", "w", "q_j") if k in section}
        sc = generate_scenario(seed, ranges=ranges, **kwargs)
    topo = build_topology(section.get("topology"), sc.dims.cluster_sizes)
    return Built(build_ei_gamespec(sc, topo), sc, section)


def _build_quadratic(section: dict) -> Built:
    for key in ("sizes", "strategy_dims", "hessians", "linear"):
        if key not in section:
            raise ConfigError(f"quadratic game needs game.{key}")
    w = section.get("w", 0)
    dims = Dimensions(tuple(section["sizes"]), tuple(section["strategy_dims"]), w)
    pay = QuadraticPayoff(dims, np.array(section["hessians"], dtype=float), np.array(section["linear"], dtype=float),
                          section.get("offsets"))
    if "boxes" in section:
        if len(section["boxes"]) != dims.n:
            raise ConfigError(f"game.boxes needs {dims.n} entries")
        boxes = []
        for (j, _), box in zip(dims.agents(), section["boxes"]):
            k = dims.strategy_dims[j]
            boxes.append(BoxSet(_bounds(box["lower"], k, -np.inf), _bounds(box["upper"], k, np.inf)))
    else:
        boxes = [BoxSet.free(dims.strategy_dims[j]) for j, _ in dims.agents()]
    if "A" in section or "b" in section:
        if "A" not in section or "b" not in section:
            raise ConfigError("game.A and game.b must be given together")
        A = tuple(np.array(a, dtype=float).reshape(w, dims.strategy_dims[j]) for j, a in enumerate(section["A"]))
        coupling = CouplingConstraint(A, tuple(np.array(v, dtype=float) for v in section["b"]))
    else:
        coupling = CouplingConstraint.none(dims)
    topo = build_topology(section.get("topology"), dims.cluster_sizes)
    return Built(GameSpec(dims, pay, boxes, coupling, topo), None, section)


def build_steps(section: dict | None, spec: GameSpec) -> StepConfig:
    section = section or {}
    try:
        return StepConfig.broadcast(spec, section.get("rho", BENCHMARK_STEP), section.get("tau", BENCHMARK_STEP),
                                    section.get("sigma", BENCHMARK_STEP), section.get("nu", BENCHMARK_STEP),
                                    section.get("c", BENCHMARK_GAIN))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def build_solver_options(section: dict | None, **overrides) -> SolverOptions:
    kw = dict(section or {})
    kw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return SolverOptions(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
