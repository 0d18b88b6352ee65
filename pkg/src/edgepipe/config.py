"""Run configuration: JSON document, schema, and the resolved dataclass."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

from jsonschema import Draft7Validator

from .errors import InvalidConfig
from .model import EncoderConfig
from .pipeline import StageCost

ARMS = ("single", "single-mbs", "pipeline", "confidant")
ROLES = ("all-in-one", "coordinator", "worker")

_cost = {
    "oneOf": [
        {
            "type": "object",
            "properties": {"a": {"type": "number"}, "b": {"type": "number"}},
            "additionalProperties": False,
        },
        {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
    ]
}

_lane = {
    "type": "object",
    "properties": {
        "id": {"type": "integer", "minimum": 0},
        "name": {"type": "string"},
        "kind": {"enum": ["simulated", "real"]},
        "cost": {
            "type": "object",
            "properties": {"fused": _cost, "per_head": _cost},
            "additionalProperties": False,
        },
        "contention": {"type": "number", "exclusiveMinimum": 0},
        "faulty": {"type": "boolean"},
        "speed": {"type": "number", "exclusiveMinimum": 0},
        "delay_ms_per_head": {"type": "number", "minimum": 0},
    },
    "additionalProperties": False,
}

SCHEMA: dict[str, Any] = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "edgepipe run configuration",
    "type": "object",
    "properties": {
        "role": {"enum": list(ROLES)},
        "stage": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "arm": {"enum": list(ARMS)},
        "model": {
            "type": "object",
            "properties": {
                "layers": {"type": "integer", "minimum": 1},
                "heads": {"type": "integer", "minimum": 1},
                "d_model": {"type": "integer", "minimum": 1},
                "d_ff": {"type": "integer", "minimum": 1},
                "vocab": {"type": "integer", "minimum": 2},
                "seq_len": {"type": "integer", "minimum": 1},
                "classes": {"type": "integer", "minimum": 2},
                "seed": {"type": "integer", "minimum": 0},
                "dtype": {"enum": ["float32", "float64"]},
                "scaled_attention": {"type": "boolean"},
            },
            "additionalProperties": False,
        },
        "train": {
            "type": "object",
            "properties": {
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "steps": {"type": "integer", "minimum": 1},
                "epoch_batches": {"type": "integer", "minimum": 1},
                "dataset_size": {"type": "integer", "minimum": 1},
            },
            "additionalProperties": False,
        },
        "scheduler": {
            "type": "object",
            "properties": {
                "epsilon_ms": {"type": "number", "exclusiveMinimum": 0},
                "sigma_ms": {"type": "number", "exclusiveMinimum": 0},
                "epsilon_frac": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "profile": {
            "type": "object",
            "properties": {
                "repetitions": {"type": "integer", "minimum": 3},
                "warmup": {"type": "integer", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "cost": {
            "type": "object",
            "properties": {
                "block_other_ms": {"type": "number", "minimum": 0},
                "backward_factor": {"type": "number", "minimum": 0},
                "link_ms": {"type": "number", "minimum": 0},
            },
            "additionalProperties": False,
        },
        "devices": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "properties": {
                    "name": {"type": "string"},
                    "endpoint": {"type": "string", "pattern": "^[^:]+:[0-9]+$"},
                    "lanes": {"type": "array", "minItems": 1, "items": _lane},
                },
                "required": ["lanes"],
                "additionalProperties": False,
            },
        },
        "output": {
            "type": "object",
            "properties": {"dir": {"type": "string"}},
            "additionalProperties": False,
        },
    },
    "required": ["devices"],
    "additionalProperties": False,
}


def validate(doc: Any) -> list[str]:
    """Every schema violation in ``doc`` as ``path: message`` strings (empty if valid)."""
    errors = sorted(Draft7Validator(SCHEMA).iter_errors(doc), key=lambda e: list(e.absolute_path))
    out = []
    for e in errors:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        out.append(f"{path}: {e.message}")
    if not out:
        reps = doc.get("profile", {}).get("repetitions", 5)
        if reps % 2 == 0:
            out.append("profile/repetitions: must be odd")
        model = doc.get("model", {})
        heads, d_model = model.get("heads", 12), model.get("d_model", 48)
        if d_model % heads:
            out.append(f"model: d_model {d_model} is not divisible by heads {heads}")
        if doc.get("role") == "worker" and "stage" not in doc:
            out.append("stage: required when role is worker")
        for i, dev in enumerate(doc.get("devices", [])):
            ids = [lane.get("id", j) for j, lane in enumerate(dev["lanes"])]
            if len(set(ids)) != len(ids):
                out.append(f"devices/{i}/lanes: duplicate lane ids {ids}")
    return out


@dataclass
class TrainSettings:
    lr: float = 0.02
    batch_size: int = 16
    steps: int = 200
    epoch_batches: int = 100
    dataset_size: int = 4096


@dataclass
class SchedulerSettings:
    epsilon_ms: Optional[float] = None
    sigma_ms: Optional[float] = None
    epsilon_frac: float = 0.05


@dataclass
class ProfileSettings:
    repetitions: int = 5
    warmup: int = 2


@dataclass
class DeviceConfig:
    name: str
    lanes: list[dict]
    endpoint: Optional[str] = None


@dataclass
class RunConfig:
    devices: list[DeviceConfig]
    role: str = "all-in-one"
    stage: Optional[int] = None
    seed: int = 0
    arm: str = "confidant"
    model: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    scheduler: SchedulerSettings = field(default_factory=SchedulerSettings)
    profile: ProfileSettings = field(default_factory=ProfileSettings)
    cost: StageCost = field(default_factory=StageCost)
    output_dir: str = "runs"

    @classmethod
    def from_dict(cls, doc: dict) -> RunConfig:
        problems = validate(doc)
        if problems:
            raise InvalidConfig("invalid run config:\n  " + "\n  ".join(problems))
        model = dict(doc.get("model", {}))
        model.setdefault("seed", doc.get("seed", 0))
        cost = doc.get("cost", {})
        return cls(
            devices=[
                DeviceConfig(d.get("name", f"device{i}"), d["lanes"], d.get("endpoint"))
                for i, d in enumerate(doc["devices"])
            ],
            role=doc.get("role", "all-in-one"),
            stage=doc.get("stage"),
            seed=doc.get("seed", 0),
            arm=doc.get("arm", "confidant"),
            model=EncoderConfig.from_dict(model),
            train=TrainSettings(**doc.get("train", {})),
            scheduler=SchedulerSettings(**doc.get("scheduler", {})),
            profile=ProfileSettings(**doc.get("profile", {})),
            cost=StageCost(
                other_ms_per_block=cost.get("block_other_ms", 0.0),
                backward_factor=cost.get("backward_factor", 2.0),
                link_ms=cost.get("link_ms", 0.0),
            ),
            output_dir=doc.get("output", {}).get("dir", "runs"),
        )

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: not valid JSON ({exc})") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        doc = {
            "role": self.role,
            "seed": self.seed,
            "arm": self.arm,
            "model": self.model.to_dict(),
            "train": vars(self.train).copy(),
            "scheduler": {k: v for k, v in vars(self.scheduler).items() if v is not None},
            "profile": vars(self.profile).copy(),
            "cost": {
                "block_other_ms": self.cost.other_ms_per_block,
                "backward_factor": self.cost.backward_factor,
                "link_ms": self.cost.link_ms,
            },
            "devices": [
                {"name": d.name, "lanes": d.lanes, **({"endpoint": d.endpoint} if d.endpoint else {})} for d in self.devices
            ],
            "output": {"dir": self.output_dir},
        }
        if self.stage is not None:
            doc["stage"] = self.stage
        return doc


def fixture(name: str = "reference_fleet") -> dict:
    """A config document shipped with the package."""
    text = resources.files("edgepipe").joinpath("fixtures").joinpath(f"{name}.json").read_text()
    return json.loads(text)
