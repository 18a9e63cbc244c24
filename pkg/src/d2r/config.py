"""Pipeline configuration: one dataclass, YAML round-trip, environment
override for the scorer endpoint."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

SCORER_URL_ENV = "D2R_SCORER_URL"


@dataclass
class PipelineConfig:
    # reconstruction
    fg_voxel: float = 0.005
    bg_voxel: float = 0.010
    truncation_factor: float = 4.0
    # rendering
    render_width: int = 224
    render_height: int = 224
    # candidate lattice
    position_step: float = 0.02
    orientation_set: str = "single"
    candidate_cap: int = 2_000_000
    # scoring
    scorer: str = "oracle"             # oracle | remote | replay
    endpoint: str | None = None
    replay_fixture: str | None = None
    record_fixture: str | None = None
    scorer_batch: int = 64
    timeout: float = 30.0
    max_retries: int = 2
    eps: float = 1e-4
    # smoothing; None means one position step
    sigma: float | None = None
    # physics
    clearance: float = 0.002
    drop: float = 0.010
    # misc
    rng_seed: int = 0
    workers: int = 1

    def smoothing_sigma(self) -> float:
        return self.position_step if self.sigma is None else self.sigma

    def resolved_endpoint(self) -> str | None:
        return os.environ.get(SCORER_URL_ENV) or self.endpoint


def load_config(path: str | Path) -> PipelineConfig:
    with open(path) as f:
        data = yaml.safe_load(f) or {}
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return PipelineConfig(**data)


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(asdict(cfg), f, sort_keys=True)
