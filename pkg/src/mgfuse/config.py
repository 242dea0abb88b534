"""Declarative experiment configs: JSON schema, preset policies, fingerprints.

A config document names a dataset preset, a fusion variant, loss weights,
and training settings. Resolution fills preset-policy defaults and validates
variant/weight consistency; the canonical resolved document is hashed into a
fingerprint stored in every artifact the run produces.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import jsonschema

from .losses import LossWeights
from .model import ModelConfig
from .synthio import ClassGeometry, SceneSpec, domain_presets
from .trainer import TrainConfig

VARIANTS = ("vanilla", "vanilla+mg", "mlp", "mlp+symal", "mlp+mg")
PRESETS = ("geo-shift", "night", "sensor")

# Guidance-mix policy per preset: bias the fusion toward the modality that
# stays reliable under that preset's shift, plus the alignment coefficients.
PRESET_POLICY = {
    "night": {"lambda_guide": 0.0, "lambda_source": 1.0, "lambda_target": 0.3},
    "sensor": {"lambda_guide": 1.0, "lambda_source": 0.5, "lambda_target": 0.5},
    "geo-shift": {"lambda_guide": 1.0, "lambda_source": 1.0, "lambda_target": 0.3},
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["name", "variant", "preset", "output_dir"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "variant": {"enum": list(VARIANTS)},
        "preset": {"enum": list(PRESETS)},
        "stages": {"enum": ["1", "1+2"]},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "output_dir": {"type": "string", "minLength": 1},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "num_source": {"type": "integer", "minimum": 1},
                "num_target": {"type": "integer", "minimum": 3},
                "val_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "seed": {"type": "integer"},
                "num_points": {"type": "integer", "minimum": 2},
                "num_classes": {"type": "integer", "minimum": 2},
                "feature_dim": {"type": "integer", "minimum": 2},
                "layout_seed": {"type": "integer"},
                "extent_jitter": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
        "weights": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lambda_guide": {"type": "number", "minimum": 0, "maximum": 1},
                "lambda_source": {"type": "number", "minimum": 0},
                "lambda_target": {"type": "number", "minimum": 0},
                "lambda_pl": {"type": "number", "minimum": 0},
                "guide_on_source": {"type": "boolean"},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "batch_size": {"type": "integer", "minimum": 1},
                "max_iterations": {"type": "integer", "minimum": 1},
                "lr_2d_head": {"type": "number", "exclusiveMinimum": 0},
                "lr_fusion": {"type": "number", "exclusiveMinimum": 0},
                "lr_3d": {"type": "number", "exclusiveMinimum": 0},
                "lr_milestones": {"type": "array", "items": {"type": "number"}},
                "lr_gamma": {"type": "number", "exclusiveMinimum": 0},
                "eval_every": {"type": "integer", "minimum": 1},
                "single_thread": {"type": "boolean"},
                "stage2_init": {"enum": ["scratch", "finetune"]},
                "pl_threshold": {"type": ["number", "null"]},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "encoder_width": {"type": "integer", "minimum": 1},
                "encoder_layers": {"type": "integer", "minimum": 1},
                "knn": {"type": "integer", "minimum": 1},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "bn_decay": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
        },
    },
}

GRID_SCHEMA = {
    "type": "object",
    "required": ["variants"],
    "properties": {
        "variants": {"type": "array", "items": {"enum": list(VARIANTS)}, "minItems": 1},
    },
}


class ConfigError(ValueError):
    def __init__(self, message: str, path: str = "$"):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


def _schema_check(document: dict, schema: dict) -> None:
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(document), key=lambda e: e.json_path)
    if errors:
        e = errors[0]
        raise ConfigError(e.message, e.json_path)


@dataclass
class DatasetConfig:
    preset: str
    num_source: int = 40
    num_target: int = 60
    val_fraction: float = 1 / 6
    test_fraction: float = 1 / 6
    seed: int = 1000
    num_points: int = 512
    num_classes: int = 6
    feature_dim: int = 64
    layout_seed: int = 7
    extent_jitter: float = 0.7

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(num_points=self.num_points, num_classes=self.num_classes,
                         layout_seed=self.layout_seed, feature_dim=self.feature_dim,
                         class_geometry=ClassGeometry.for_classes(
                             self.num_classes, self.extent_jitter))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class ExperimentConfig:
    name: str
    variant: str
    dataset: DatasetConfig
    weights: LossWeights
    train: TrainConfig
    model_overrides: dict = field(default_factory=dict)
    stages: str = "1"
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = "out"

    @property
    def guide_mode(self) -> str:
        if self.variant.endswith("+mg"):
            return "mg"
        if self.variant.endswith("+symal"):
            return "symal"
        return "none"

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_classes=self.dataset.num_classes,
            feature_dim=self.dataset.feature_dim,
            fusion="vanilla" if self.variant.startswith("vanilla") else "mlp",
            symal_head=self.variant == "mlp+symal",
            **self.model_overrides,
        )

    def to_canonical_dict(self) -> dict:
        return {
            "name": self.name,
            "variant": self.variant,
            "stages": self.stages,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "dataset": self.dataset.to_dict(),
            "weights": {k: getattr(self.weights, k) for k in self.weights.__dataclass_fields__},
            "train": self.train.to_dict(),
            "model": dict(sorted(self.model_overrides.items())),
        }

    def fingerprint(self) -> str:
        return fingerprint_of(self.to_canonical_dict())

    def cell_fingerprint(self, seed: int, stage: int) -> str:
        d = self.to_canonical_dict()
        d["seeds"] = [seed]
        d["stages"] = str(stage)
        d["train"]["seed"] = seed
        return fingerprint_of(d)

    def dataset_fingerprint(self, seed: int) -> str:
        d = self.dataset.to_dict()
        d["derived_seed"] = self.dataset.seed + seed
        return fingerprint_of(d)


def fingerprint_of(document: dict) -> str:
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def resolve_config(document: dict) -> ExperimentConfig:
    """Validate a parsed config document and fill preset-policy defaults."""
    _schema_check(document, CONFIG_SCHEMA)
    preset = document["preset"]
    variant = document["variant"]
    raw_weights = dict(document.get("weights", {}))

    if variant == "mlp+symal" and "lambda_guide" in raw_weights:
        raise ConfigError("symmetric alignment fixes the guidance mix at 0.5; "
                          "remove weights.lambda_guide", "$.weights.lambda_guide")
    if variant.endswith("+mg") and "lambda_guide" not in raw_weights:
        raise ConfigError(f"variant {variant!r} requires weights.lambda_guide",
                          "$.weights.lambda_guide")

    policy = dict(PRESET_POLICY[preset])
    if variant == "mlp+symal":
        policy.pop("lambda_guide")
        policy["lambda_guide"] = 0.5  # unused by the loss; fixed for bookkeeping
    policy.update(raw_weights)
    weights = LossWeights(**policy)

    dataset = DatasetConfig(preset=preset, **document.get("dataset", {}))
    train = TrainConfig(**document.get("train", {}))
    return ExperimentConfig(
        name=document["name"],
        variant=variant,
        dataset=dataset,
        weights=weights,
        train=train,
        model_overrides=dict(document.get("model", {})),
        stages=document.get("stages", "1"),
        seeds=list(document.get("seeds", [0])),
        output_dir=document["output_dir"],
    )


def resolve_grid(document: dict) -> list[ExperimentConfig]:
    """A grid document is a run config plus a ``variants`` list.

    Each cell copies the document with one variant; the guidance mix is
    dropped for cells that do not consume it.
    """
    _schema_check(document, GRID_SCHEMA)
    variants = document["variants"]
    if len(set(variants)) != len(variants):
        raise ConfigError("duplicate variants in grid", "$.variants")
    configs = []
    for variant in variants:
        cell = {k: (dict(v) if isinstance(v, dict) else v)
                for k, v in document.items() if k != "variants"}
        cell["variant"] = variant
        if not variant.endswith("+mg"):
            cell.get("weights", {}).pop("lambda_guide", None)
        configs.append(resolve_config(cell))
    return configs


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    with open(path) as f:
        return resolve_config(json.load(f))


def output_root(config: ExperimentConfig) -> str:
    """Config output_dir, optionally re-rooted by MGFUSE_OUTPUT_ROOT."""
    root = os.environ.get("MGFUSE_OUTPUT_ROOT")
    if root and not os.path.isabs(config.output_dir):
        return os.path.join(root, config.output_dir)
    return config.output_dir


def preset_domains(config: DatasetConfig):
    return domain_presets(config.preset)
