"""Experiment configuration: nested dataclasses with JSON round-tripping and dotted overrides."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .neural import NetworkSpec, TrainConfig
from .phantom import PhantomConfig
from .solvers import SolverConfig, default_lambda_grid

SCENARIOS = ("inverse_crime", "model_error", "model_error_noise")
SHORT_NAMES = {"inverse_crime": "IC", "model_error": "ME", "model_error_noise": "N"}
ROOT_ENV = "DLRECON_ROOT"


@dataclass(frozen=True)
class Case:
    scenario: str
    angular_range: float

    @property
    def name(self) -> str:
        return f"{self.angular_range:g}D_{SHORT_NAMES[self.scenario]}"


@dataclass
class ExperimentConfig:
    scenarios: list[str] = field(default_factory=lambda: ["inverse_crime"])
    angular_ranges: list[float] = field(default_factory=lambda: [60.0])
    side: int = 64
    num_detectors: int = 64
    angle_start: float = 0.0
    n_train: int = 500
    n_val: int = 100
    n_test: int = 100
    noise_fraction: float = 0.02
    seed: int = 0
    n_outer: int = 5
    n_collect: int = 10
    stage2_inputs: str = "f_R"
    r_operator: str = "auto"
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    # stage-2 overrides of ``train`` fields, e.g. {"learning_rate": 3e-4}
    finetune: dict = field(default_factory=dict)
    lambda_grid: list[float] = field(default_factory=default_lambda_grid)
    lambda_selection: str = "validation"
    n_val_lambda: int = 10
    trace_image: int = 0
    dump_images: int = 4
    svd_truncation: float = 1e-10
    output_dir: str = "experiments/default"
    workers: int = 1
    log_every: int = 0

    def __post_init__(self):
        for s in self.scenarios:
            if s not in SCENARIOS:
                raise ValueError(f"unknown scenario {s!r}; choose from {SCENARIOS}")
        if not self.scenarios or not self.angular_ranges:
            raise ValueError("need at least one scenario and one angular range")
        if self.side < 2 or self.num_detectors < 1:
            raise ValueError("side must be >= 2 and num_detectors >= 1")
        if min(self.n_train, self.n_test) < 1 or self.n_val < 0:
            raise ValueError("train and test splits must be non-empty")
        if self.noise_fraction < 0:
            raise ValueError("noise_fraction must be non-negative")
        if self.lambda_selection not in ("validation", "oracle"):
            raise ValueError("lambda_selection must be 'validation' or 'oracle'")
        if self.lambda_selection == "validation" and self.n_val < 1:
            raise ValueError("validation lambda selection needs n_val >= 1")
        if not self.lambda_grid:
            raise ValueError("lambda_grid is empty")
        if self.r_operator not in ("auto", "ls_pinv", "ls_nn_pgd"):
            raise ValueError("r_operator must be auto, ls_pinv or ls_nn_pgd")
        bad = set(self.finetune) - {f.name for f in dataclasses.fields(TrainConfig)}
        if bad:
            raise ValueError(f"unknown finetune keys: {sorted(bad)}")
        self.stage2_train  # validates the merged values
        if not 0 <= self.trace_image < self.n_test:
            raise ValueError("trace_image must index the test split")

    @property
    def cases(self) -> list[Case]:
        """Every (scenario, angular range) pair, scenario-major."""
        return [Case(s, float(a)) for s in self.scenarios for a in self.angular_ranges]

    @property
    def stage2_train(self) -> TrainConfig:
        return dataclasses.replace(self.train, **self.finetune)

    def noise_for(self, case: Case) -> float:
        return self.noise_fraction if case.scenario == "model_error_noise" else 0.0

    def r_operator_for(self, case: Case) -> str:
        if self.r_operator != "auto":
            return self.r_operator
        return "ls_pinv" if case.scenario == "inverse_crime" else "ls_nn_pgd"

    def output_path(self) -> Path:
        out = Path(self.output_dir)
        if not out.is_absolute() and os.environ.get(ROOT_ENV):
            out = Path(os.environ[ROOT_ENV]) / out
        return out

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        nested = {"phantom": PhantomConfig.from_dict, "solver": lambda x: SolverConfig(**x),
                  "network": lambda x: NetworkSpec(**x), "train": lambda x: TrainConfig(**x)}
        for key, build in nested.items():
            if key in d and isinstance(d[key], dict):
                d[key] = build(d[key])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path | None, overrides: list[str] | None = None) -> "ExperimentConfig":
        d = json.loads(Path(path).read_text()) if path else {}
        for item in overrides or []:
            apply_override(d, item)
        return cls.from_dict(d)


def apply_override(d: dict, item: str) -> None:
    """Apply ``a.b=value`` to a nested dict; the value is parsed as JSON when possible."""
    if "=" not in item:
        raise ValueError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValueError(f"cannot override inside non-mapping key {p!r}")
    node[parts[-1]] = value
