"""Run configuration: a YAML document validated against a strict schema
(unknown keys are rejected). ``--set section.key=value`` overrides are
applied before validation and recorded in the resolved config."""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .classifier import ClassifierConfig
from .networks import NetConfig
from .trainer import TrainConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class Paths(_Section):
    data_dir: str = "runs/data"
    out_dir: str = "runs/out"


class DataSection(_Section):
    image_size: int = Field(16, ge=8)
    n_train: int = Field(500, ge=2)
    n_negatives: int = Field(500, ge=1)
    n_test: int = Field(100, ge=2)
    texture_frequency: float = Field(3.0, gt=0)
    blur_sigma: float = Field(1.0, ge=0)
    modality_names: tuple[str, str] = ("smooth", "textured")
    normalization: Literal["per_image", "per_dataset"] = "per_image"


class ModelSection(_Section):
    latent_dim: int = Field(128, ge=1)
    base_channels: int = Field(8, ge=1)
    enc_hidden: int = Field(128, ge=1)
    critic_channels: int = Field(8, ge=1)
    seed_size: int = 2


class TrainSection(_Section):
    strategy: Literal["supervised", "unsupervised", "semi_supervised"] = "semi_supervised"
    total_iterations: int = Field(10000, ge=1)
    batch_size: int = Field(16, ge=1)
    learning_rate: float = Field(2e-4, ge=0)
    betas: tuple[float, float] = (0.5, 0.9)
    critic_steps_per_gen_step: int = Field(5, ge=1)
    lambda_gp: float = Field(10.0, ge=0)
    checkpoint_every: int = Field(1000, ge=1)
    order: Union[Literal["auto"], tuple[str, str]] = "auto"
    encoding_reg_weight: float = Field(0.0, ge=0)


class ComplexitySection(_Section):
    iterations: int = Field(3000, ge=1)
    n_generated: int = Field(500, ge=2)
    extractor_seed: int = 1234


class EvaluateSection(_Section):
    n_synthetic: int = Field(500, ge=10)
    synth_seed: int = 12345
    bins: int = Field(32, ge=2)
    groups: int = Field(10, ge=1)
    extractor_seed: int = 1234


class ClassifierSection(_Section):
    learning_rate: float = Field(0.01, gt=0)
    lr_decay_factor: float = Field(0.99, gt=0)
    lr_decay_every: int = Field(30, ge=1)
    batch_size: int = Field(64, ge=1)
    weight_decay: float = Field(1e-4, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    iterations: int = Field(2000, ge=1)
    runs: int = Field(5, ge=1)
    channels: int = Field(16, ge=1)
    n_synthetic_positives: int = Field(483, ge=1)


class RunConfig(_Section):
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    paths: Paths = Paths()
    data: DataSection = DataSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    complexity: ComplexitySection = ComplexitySection()
    evaluate: EvaluateSection = EvaluateSection()
    classifier: ClassifierSection = ClassifierSection()
    overrides: list[str] = []

    @field_validator("schema_version")
    @classmethod
    def _version(cls, v):
        if v != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {v} (expected {SCHEMA_VERSION})")
        return v

    # -- conversions -------------------------------------------------------

    def net_config(self) -> NetConfig:
        return NetConfig(image_size=self.data.image_size, **self.model.model_dump())

    def train_config(self, **changes) -> TrainConfig:
        t = self.train.model_dump()
        t.update(changes)
        order = t.pop("order")
        return TrainConfig(net=self.net_config(), seed=self.seed, order=order if order == "auto" else tuple(order), **t)

    def classifier_config(self) -> ClassifierConfig:
        c = self.classifier.model_dump()
        c.pop("n_synthetic_positives")
        return ClassifierConfig(seed=self.seed, **c)

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.model_dump(mode="json"), sort_keys=False))
        return path


def _parse_value(text: str):
    return yaml.safe_load(text)


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r}: {p!r} is not a section")
        node[parts[-1]] = _parse_value(value)
    return doc


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    doc = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    overrides = list(overrides or [])
    doc = apply_overrides(doc, overrides)
    doc["overrides"] = list(doc.get("overrides", [])) + overrides
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def reference_config() -> RunConfig:
    """The published operating point (64 px, batch 32, lr 1e-4, 40K iterations, 10K classifier steps)."""
    return RunConfig(
        data=DataSection(image_size=64, texture_frequency=6.0, blur_sigma=2.0, n_train=483, n_test=100),
        model=ModelSection(base_channels=32, enc_hidden=512, critic_channels=32, seed_size=4),
        train=TrainSection(total_iterations=40000, batch_size=32, learning_rate=1e-4),
        classifier=ClassifierSection(iterations=10000),
    )
