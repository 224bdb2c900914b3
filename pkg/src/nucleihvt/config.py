"""Run configuration: a YAML document validated against a JSON schema.

Relative data paths resolve against the directory holding the config file.
Validation collects every problem before failing so a user sees them all.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

from .datapipe import AugmentPolicy
from .losses import LossWeights
from .models import ModelConfig, StageSpec
from .trainer import DEFAULT_LR, TrainConfig


class ConfigError(ValueError):
    def __init__(self, source, problems: list[str]):
        self.problems = list(problems)
        lines = "\n".join(f"  - {p}" for p in self.problems)
        super().__init__(f"{source}: invalid configuration\n{lines}")


@lru_cache(maxsize=1)
def schema() -> dict:
    text = resources.files(__package__).joinpath("schema/run_config.schema.json").read_text()
    return json.loads(text)


@dataclass
class DataPaths:
    train: Path
    val: Path | None = None
    class_names: tuple[str, ...] | None = None


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    data: DataPaths
    augment: AugmentPolicy = field(default_factory=AugmentPolicy.disabled)
    seed: int = 0
    deterministic: bool = False
    threads: int | None = None
    source: str = "<config>"

    def with_seed(self, seed: int) -> "RunConfig":
        self.seed = seed
        self.model = self.model.replace(seed=seed)
        self.train.seed = seed
        return self


def _where(error: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in error.absolute_path) or "<root>"


def _schema_problems(doc) -> list[str]:
    validator = jsonschema.Draft202012Validator(schema())
    out = []
    for err in sorted(validator.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message)):
        if err.validator == "additionalProperties":
            allowed = set(err.schema.get("properties", {}))
            for key in sorted(set(err.instance) - allowed):
                where = _where(err)
                out.append(f"unknown key '{key}'" + ("" if where == "<root>" else f" in '{where}'"))
        else:
            out.append(f"{_where(err)}: {err.message}")
    return out


def _build_model(d: dict, seed: int) -> ModelConfig:
    d = dict(d)
    if "stages" in d:
        d["stages"] = tuple(StageSpec(**s) for s in d["stages"])
    return ModelConfig(seed=seed, **d)


def _build_train(d: dict, variant: str, seed: int) -> TrainConfig:
    d = dict(d)
    weights = d.pop("loss_weights", {})
    d.setdefault("base_lr", DEFAULT_LR[variant])
    return TrainConfig(seed=seed, loss_weights=LossWeights(**weights), **d)


def _build_augment(d: dict | None) -> AugmentPolicy:
    if d is None:
        return AugmentPolicy.disabled()
    d = dict(d)
    if "scale" in d:
        d["scale"] = tuple(d["scale"])
    base = {f.name: getattr(AugmentPolicy.disabled(), f.name) for f in fields(AugmentPolicy)}
    base.update(d)
    return AugmentPolicy(**base)


def _path_problems(data, base_dir: Path, check_paths: bool) -> tuple[dict[str, Path], list[str]]:
    paths, problems = {}, []
    if not isinstance(data, dict):
        return paths, problems
    for key in ("train", "val"):
        if isinstance(data.get(key), str):
            p = Path(data[key])
            p = p if p.is_absolute() else base_dir / p
            if check_paths and not (p / "dataset.txt").is_file():
                problems.append(f"data.{key}: {p} is not a prepared dataset (no dataset.txt)")
            paths[key] = p
    return paths, problems


def parse_config(doc, source="<config>", base_dir: Path | None = None, check_paths: bool = True) -> RunConfig:
    base_dir = Path(base_dir or ".")
    paths, path_problems = _path_problems(doc.get("data"), base_dir, check_paths)
    problems = _schema_problems(doc)
    if problems:
        raise ConfigError(source, problems + path_problems)
    seed = doc.get("seed", 0)
    model = train = augment = None
    builders = (
        ("model", lambda: _build_model(doc.get("model", {}), seed)),
        ("augment", lambda: _build_augment(doc.get("augment"))),
    )
    built = {}
    for name, build in builders:
        try:
            built[name] = build()
        except (ValueError, TypeError) as exc:
            problems.append(f"{name}: {exc}")
    model, augment = built.get("model"), built.get("augment")
    try:
        train = _build_train(doc["train"], model.variant if model else "nucleihvt", seed)
    except (ValueError, TypeError) as exc:
        problems.append(f"train: {exc}")

    data = doc["data"]
    problems += path_problems
    names = tuple(data["class_names"]) if "class_names" in data else None
    if names is not None and model is not None and len(names) != model.num_classes:
        problems.append(f"data.class_names: {len(names)} names for {model.num_classes} classes")
    if problems:
        raise ConfigError(source, problems)
    return RunConfig(
        model=model,
        train=train,
        data=DataPaths(paths["train"], paths.get("val"), names),
        augment=augment,
        seed=seed,
        deterministic=doc.get("deterministic", False),
        threads=doc.get("threads"),
        source=str(source),
    )


def load_config(path, check_paths: bool = True) -> RunConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(path, ["file does not exist"]) from None
    except yaml.YAMLError as exc:
        raise ConfigError(path, [f"not valid YAML: {exc}"]) from None
    if not isinstance(doc, dict):
        raise ConfigError(path, ["top level must be a mapping"])
    return parse_config(doc, path, path.parent, check_paths)
