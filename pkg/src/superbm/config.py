"""Experiment configuration: one JSON file fully specifies any run.

Spec objects (test functions, weights, integrands, bases, targets,
functionals, initial measures) are plain dicts so that worker processes can
rebuild them without pickling closures.  Builders validate eagerly and report
errors with the offending field path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .measures import AtomicMeasure
from .paths import TimeGrid
from .simulate import SimParams
from .testfuncs import (AdaptedWeight, BoundedMap, ProductIntegrand, SchwartzTestFunction,
                        clip_map, const_map, gaussian_bump, hermite_bump, tanh_map)

EXPERIMENTS = ("simulate", "verify-mp", "verify-iso", "vderiv", "represent", "full-suite")


class ConfigError(ValueError):
    """Invalid configuration; message carries the field path."""


def _need(spec: dict, key: str, where: str):
    if key not in spec:
        raise ConfigError(f"{where}.{key}: missing required field")
    return spec[key]


def build_initial_measure(spec: dict, where: str = "initial_measure") -> AtomicMeasure:
    atoms = _need(spec, "atoms", where)
    if not isinstance(atoms, list) or not atoms:
        raise ConfigError(f"{where}.atoms: need a nonempty list")
    pairs = []
    for i, atom in enumerate(atoms):
        pos = _need(atom, "position", f"{where}.atoms[{i}]")
        mass = float(_need(atom, "mass", f"{where}.atoms[{i}]"))
        if mass < 0:
            raise ConfigError(f"{where}.atoms[{i}].mass: must be >= 0, got {mass}")
        pairs.append((pos, mass))
    return AtomicMeasure.from_atoms(pairs)


def build_test_function(spec: dict, where: str = "h") -> SchwartzTestFunction:
    family = _need(spec, "family", where)
    if family == "gaussian":
        return gaussian_bump(_need(spec, "center", where), float(_need(spec, "sigma", where)),
                             float(spec.get("amplitude", 1.0)))
    if family == "hermite":
        return hermite_bump(_need(spec, "center", where), float(_need(spec, "sigma", where)),
                            float(spec.get("amplitude", 1.0)), int(spec.get("degree", 1)),
                            int(spec.get("axis", 0)))
    raise ConfigError(f"{where}.family: unknown family {family!r} "
                      "(expected 'gaussian' or 'hermite')")


def build_bounded_map(spec: dict, where: str = "map") -> BoundedMap:
    kind = _need(spec, "kind", where)
    if kind == "const":
        return const_map(float(spec.get("value", 1.0)))
    if kind == "tanh":
        return tanh_map(float(spec.get("scale", 1.0)))
    if kind == "clip":
        return clip_map(float(_need(spec, "lo", where)), float(_need(spec, "hi", where)))
    raise ConfigError(f"{where}.kind: unknown map kind {kind!r}")


def build_weight(spec: dict | None, where: str = "weight") -> AdaptedWeight:
    if spec is None:
        from .testfuncs import unit_weight
        return unit_weight()
    return AdaptedWeight(
        float(spec.get("measure_time", 0.0)),
        build_test_function(_need(spec, "probe", where), f"{where}.probe"),
        build_bounded_map(_need(spec, "map", where), f"{where}.map"),
    )


def build_integrand(spec: dict, where: str = "integrand") -> ProductIntegrand:
    return ProductIntegrand(
        weight=build_weight(spec.get("weight"), f"{where}.weight"),
        window_start=float(spec.get("window_start", 0.0)),
        h=build_test_function(_need(spec, "h", where), f"{where}.h"),
        label=str(spec.get("label", "")),
    )


def build_basis(specs: list, where: str = "basis"):
    from .galerkin import IntegrandBasis
    if not isinstance(specs, list) or not specs:
        raise ConfigError(f"{where}: need a nonempty list of integrand specs")
    return IntegrandBasis(tuple(build_integrand(s, f"{where}[{i}]")
                                for i, s in enumerate(specs)))


def build_functional(spec: dict, where: str = "functional"):
    from .functionals import (ConstantFunctional, PairingFunctional,
                              ProductIntegralFunctional, SquaredPairingFunctional,
                              WeightFunctional)
    kind = _need(spec, "kind", where)
    if kind == "constant":
        return ConstantFunctional(float(spec.get("value", 0.0)))
    if kind == "pairing":
        return PairingFunctional(build_test_function(_need(spec, "h", where), f"{where}.h"))
    if kind == "squared_pairing":
        return SquaredPairingFunctional(
            build_test_function(_need(spec, "h", where), f"{where}.h"))
    if kind == "weight":
        return WeightFunctional(build_weight(_need(spec, "weight", where), f"{where}.weight"))
    if kind == "product_integral":
        return ProductIntegralFunctional(
            build_integrand(_need(spec, "integrand", where), f"{where}.integrand"))
    raise ConfigError(f"{where}.kind: unknown functional kind {kind!r}")


def build_target(spec: dict, where: str = "target") -> dict:
    """Validated target spec: either planted coefficients or a terminal functional."""
    kind = _need(spec, "kind", where)
    if kind == "planted":
        coeffs = _need(spec, "coefficients", where)
        if not isinstance(coeffs, list) or not coeffs:
            raise ConfigError(f"{where}.coefficients: need a nonempty list")
        return {"kind": "planted", "coefficients": [float(c) for c in coeffs]}
    if kind == "terminal_mass":
        return {"kind": "terminal_mass", "map": spec.get("map", "identity")}
    if kind == "terminal_pairing":
        build_test_function(_need(spec, "h", where), f"{where}.h")
        return {"kind": "terminal_pairing", "h": spec["h"], "map": spec.get("map", "identity")}
    raise ConfigError(f"{where}.kind: unknown target kind {kind!r}")


_TERMINAL_MAPS = {
    "identity": lambda v: v,
    "tanh": np.tanh,
    "square": lambda v: v * v,
}


def target_values_from_spec(spec: dict, terminal_pairings: np.ndarray | None,
                            terminal_mass: np.ndarray | None,
                            planted: np.ndarray | None) -> np.ndarray:
    """Evaluate a built target spec against per-path terminal statistics."""
    kind = spec["kind"]
    if kind == "planted":
        if planted is None:
            raise ConfigError("target.kind=planted requires basis integrals")
        return planted
    fn = _TERMINAL_MAPS.get(spec.get("map", "identity"))
    if fn is None:
        raise ConfigError(f"target.map: unknown map {spec.get('map')!r}")
    if kind == "terminal_mass":
        return fn(terminal_mass)
    if kind == "terminal_pairing":
        return fn(terminal_pairings)
    raise ConfigError(f"target.kind: unknown kind {kind!r}")


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one experiment from a single file."""

    experiment: str
    dimension: int = 1
    horizon: float = 1.0
    dt: float = 1e-3
    n_quantum: int = 2000
    replicates: int = 1000
    seed: int = 20260810
    branching_rate: float = 1.0
    cap_factor: float = 100.0
    threads: int = 0
    out_dir: str = "out"
    initial_measure: dict = field(default_factory=lambda: {
        "atoms": [{"position": [0.0], "mass": 1.0}]})
    basis: list = field(default_factory=list)
    phi: dict | None = None
    psi: dict | None = None
    functional: dict | None = None
    target: dict | None = None
    ridge: float | None = None
    record_states: bool = True
    record_events: bool = True
    tolerances: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(
                f"experiment: unknown experiment {self.experiment!r}, expected one of "
                f"{EXPERIMENTS}")
        if self.dimension < 1:
            raise ConfigError(f"dimension: must be >= 1, got {self.dimension}")
        if not self.horizon > 0:
            raise ConfigError(f"horizon: must be > 0, got {self.horizon}")
        if not self.dt > 0:
            raise ConfigError(f"dt: must be > 0, got {self.dt}")
        if self.n_quantum < 1:
            raise ConfigError(f"n_quantum: must be >= 1, got {self.n_quantum}")
        if self.replicates < 2:
            raise ConfigError(f"replicates: need >= 2 for standard errors, got {self.replicates}")
        # eager validation of the pieces so schema errors surface before any work
        self.grid()
        build_initial_measure(self.initial_measure)
        if self.basis:
            build_basis(self.basis)
        for name in ("phi", "psi"):
            spec = getattr(self, name)
            if spec is not None:
                build_integrand(spec, name)
        if self.functional is not None:
            build_functional(self.functional, "functional")
        if self.target is not None:
            build_target(self.target, "target")

    def grid(self) -> TimeGrid:
        try:
            return TimeGrid.from_step(self.horizon, self.dt)
        except Exception as exc:
            raise ConfigError(f"dt: {exc}") from exc

    def sim_params(self, seed: int | None = None) -> SimParams:
        return SimParams(n_quantum=self.n_quantum, dim=self.dimension, grid=self.grid(),
                         branching_rate=self.branching_rate,
                         seed=self.seed if seed is None else seed,
                         cap_factor=self.cap_factor)

    def measure(self) -> AtomicMeasure:
        return build_initial_measure(self.initial_measure)

    @staticmethod
    def from_dict(data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: top level must be an object")
        allowed = set(ExperimentConfig.__dataclass_fields__)
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"config: unknown fields {sorted(unknown)}")
        if "experiment" not in data:
            raise ConfigError("experiment: missing required field")
        try:
            return ExperimentConfig(**data)
        except TypeError as exc:
            raise ConfigError(f"config: {exc}") from exc

    @staticmethod
    def from_json(path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON in {path}: {exc}") from exc
        return ExperimentConfig.from_dict(data)

    def to_dict(self) -> dict:
        from dataclasses import asdict
        return asdict(self)


@dataclass
class RunManifest:
    """Run provenance: config echo, seed derivation, exclusions, checksums."""

    config: dict
    code_version: str = __version__
    seed_scheme: str = "philox key = (master seed, replicate index)"
    replicates_run: int = 0
    capped_replicates: int = 0
    capped_indices: list = field(default_factory=list)
    mass_rounded: bool = False
    wall_clock_seconds: float = 0.0
    artifact_checksums: dict = field(default_factory=dict)

    def write(self, path) -> None:
        from .storage import write_json
        from dataclasses import asdict
        write_json(path, asdict(self))
