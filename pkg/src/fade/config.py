"""Experiment configuration: one strict JSON document per experiment."""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .adapter import METHODS, AdapterConfig
from .data_stream import StreamSpec
from .federated import FED_METHODS, FedConfig
from .models import ModelSpec

MODES = ("sequential", "federated", "detect_only", "calibrate")
DEFAULT_METHODS = {
    "sequential": ("fade", "erm_continue"),
    "federated": ("fade_fed", "fedavg", "fedprox"),
    "detect_only": ("fade",),
    "calibrate": ("fade",),
}


class ShardSpec(BaseModel):
    """Source table and partitioning for federated experiments."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    source: Literal["gaussian", "csv"] = "gaussian"
    n: int = Field(default=2000, ge=8)
    d_x: int = Field(default=2, ge=1)
    n_classes: int = Field(default=2, ge=2)
    separation: float = Field(default=2.0, gt=0)
    csv_path: Optional[str] = None
    label_column: int = -1
    has_header: bool = False
    K: int = Field(default=8, ge=2)
    skew: Literal["label_skew", "feature_skew", "iid"] = "label_skew"
    concentration: float = Field(default=0.1, gt=0)

    @model_validator(mode="after")
    def _csv_needs_path(self):
        if self.source == "csv" and not self.csv_path:
            raise ValueError("csv_path is required when source is 'csv'")
        return self


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: Literal["sequential", "federated", "detect_only", "calibrate"]
    stream: Optional[StreamSpec] = None
    shards: Optional[ShardSpec] = None
    # None: logistic model sized from the data
    model: Optional[ModelSpec] = None
    methods: Optional[list[str]] = None
    adapter: AdapterConfig = Field(default_factory=AdapterConfig)
    fed: FedConfig = Field(default_factory=FedConfig)
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: str = "fade_output"
    # calibrate mode: number of leading batches to run (default: detector warmup + 1)
    calibrate_prefix: Optional[int] = Field(default=None, ge=2)

    @field_validator("seeds")
    @classmethod
    def _distinct(cls, v):
        seen = set()
        for s in v:
            if s in seen:
                raise ValueError(f"duplicate seed {s}; seeds must be distinct")
            seen.add(s)
        return v

    @model_validator(mode="after")
    def _mode_inputs(self):
        if self.mode == "federated":
            if self.shards is None:
                object.__setattr__(self, "shards", ShardSpec())
        elif self.stream is None:
            raise ValueError(f"stream is required in {self.mode} mode")
        if self.methods is None:
            object.__setattr__(self, "methods", list(DEFAULT_METHODS[self.mode]))
        if not self.methods:
            raise ValueError("methods must not be empty")
        return self

    def resolved(self):
        return json.loads(self.model_dump_json(by_alias=True))


class ConfigValidationError(Exception):
    """All problems found in a config, each as ``(json_pointer, message)``."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{p or '/'}: {m}" for p, m in self.errors))


def _pointer(loc):
    parts = []
    for part in loc:
        # pydantic inserts tagged-union / validator names that are not keys
        if isinstance(part, str) and part.startswith("function-"):
            continue
        parts.append(str(part).replace("~", "~0").replace("/", "~1"))
    return "/" + "/".join(parts) if parts else ""


def _method_errors(data):
    mode = data.get("mode")
    methods = data.get("methods")
    if not isinstance(methods, list):
        return []
    allowed = {"federated": FED_METHODS, "detect_only": ("fade",),
               "calibrate": ("fade",)}.get(mode, METHODS)
    return [(f"/methods/{i}", f"unknown method {m!r}; expected one of {', '.join(allowed)}")
            for i, m in enumerate(methods) if m not in allowed]


def validate_data(data) -> ExperimentConfig:
    """Validate a parsed JSON object, collecting every error with its pointer."""
    if not isinstance(data, dict):
        raise ConfigValidationError([("", "config must be a JSON object")])
    errors = _method_errors(data)
    if data.get("mode") in MODES and data.get("mode") != "federated" and data.get("stream") is None:
        errors.append(("/stream", f"required in {data['mode']} mode"))
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        for err in exc.errors():
            ptr = _pointer(err["loc"])
            msg = err["msg"].removeprefix("Value error, ")
            if ptr.startswith("/methods/") or (ptr == "" and msg.startswith("stream is required")):
                continue
            errors.append((ptr, msg))
        raise ConfigValidationError(errors) from None
    if errors:
        raise ConfigValidationError(errors)
    out = Path(cfg.output_dir)
    probe = out if out.exists() else next((p for p in out.parents if p.exists()), Path("."))
    if not os.access(probe, os.W_OK) or (out.exists() and not out.is_dir()):
        raise ConfigValidationError([("/output_dir", f"{cfg.output_dir} is not writable")])
    return cfg


def validate_config(path) -> ExperimentConfig:
    """Parse and validate a config file; raises :class:`ConfigValidationError`."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigValidationError([("", f"cannot read {path}: {exc.strerror}")]) from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigValidationError([("", f"{path} is not valid JSON: {exc.msg} at line {exc.lineno}")]) from None
    return validate_data(data)
