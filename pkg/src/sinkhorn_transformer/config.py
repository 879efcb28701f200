"""Experiment configuration files (JSON), validated with pydantic."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .model import TrainConfig
from .transport import SinkhornConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SolverSettings(_Strict):
    epsilon: float = Field(1.0, gt=0)
    tol: float = Field(1e-9, gt=0)
    max_iters: int = Field(10_000, ge=1)
    log_domain: bool = True

    def sinkhorn(self) -> SinkhornConfig:
        return SinkhornConfig(self.epsilon, self.max_iters, self.tol, self.log_domain)


class DatasetSettings(_Strict):
    family: Literal["product", "planted-entropic", "block"] = "planted-entropic"
    n_train: int = Field(16, ge=1, le=1000)
    n_heldout: int = Field(8, ge=1, le=1000)
    n_min: int = Field(3, ge=1, le=16)
    n_max: int = Field(8, ge=1, le=16)
    dim: int = Field(2, ge=1, le=16)
    teacher_width: int = Field(2, ge=1, le=64)
    teacher_scale: float = Field(5.0, gt=0, le=50)
    block_k: int = Field(2, ge=1)

    @model_validator(mode="after")
    def _sizes(self):
        if self.n_min > self.n_max:
            raise ValueError("n_min must not exceed n_max")
        return self


class ArchitectureSettings(_Strict):
    d_out: int = Field(4, ge=1, le=256)
    n_layers: int = Field(1, ge=1, le=16)
    n_heads: int = Field(1, ge=1, le=16)
    k_h: int = Field(2, ge=1, le=256)
    hidden: int = Field(16, ge=1, le=4096)
    skip: bool = False
    shared: bool = False


class OptimizerSettings(_Strict):
    lr: float = Field(0.5, gt=0, le=100)
    iterations: int = Field(2000, ge=0, le=1_000_000)
    batch_size: int = Field(16, ge=1)
    momentum: float = Field(0.9, ge=0, lt=1)
    unroll: int = Field(50, ge=5, le=10_000)
    loss: Literal["kl", "frobenius"] = "kl"
    eval_every: int = Field(100, ge=1)


class TrainExperiment(_Strict):
    family: Literal["product", "planted-entropic", "block"] | None = None
    seed: int = Field(0, ge=0)
    dataset: DatasetSettings = DatasetSettings()
    architecture: ArchitectureSettings = ArchitectureSettings()
    optimizer: OptimizerSettings = OptimizerSettings()
    solver: SolverSettings = SolverSettings()

    def train_config(self) -> TrainConfig:
        o = self.optimizer
        return TrainConfig(seed=self.seed, lr=o.lr, iterations=o.iterations,
                           batch_size=o.batch_size, momentum=o.momentum, unroll=o.unroll,
                           epsilon=self.solver.epsilon, loss_kind=o.loss,
                           eval_every=o.eval_every, eval_tol=self.solver.tol)

    @property
    def resolved_family(self) -> str:
        return self.family or self.dataset.family


def load_train_experiment(path: str | Path | None, **overrides) -> TrainExperiment:
    """Parse a JSON experiment file (or defaults) and apply command-line overrides."""
    doc = {}
    if path is not None:
        with open(path) as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ValueError("config file must hold a JSON object")
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return TrainExperiment.model_validate(doc)
