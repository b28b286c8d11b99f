"""JSON experiment documents: one section per concern, unknown keys rejected."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .gridworld import GridConfig
from .harness import RunConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PretrainConfig:
    n_obs: int = 6000
    epochs: int = 60
    d_f: int = 16

    def __post_init__(self):
        if self.n_obs < 10:
            raise ValueError("n_obs must be at least 10")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")


@dataclass(frozen=True)
class ExperimentConfig:
    seeds: tuple = (0,)
    window: int = 10

    def __post_init__(self):
        seeds = self.seeds
        if isinstance(seeds, int):
            seeds = tuple(range(seeds))
        seeds = tuple(int(s) for s in seeds)
        if not seeds:
            raise ValueError("need at least one seed")
        if len(set(seeds)) != len(seeds):
            raise ValueError("seeds must be distinct")
        object.__setattr__(self, "seeds", seeds)
        if self.window < 1:
            raise ValueError("window must be at least 1")


@dataclass(frozen=True)
class Document:
    environment: GridConfig = field(default_factory=GridConfig)
    training: RunConfig = field(default_factory=RunConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def with_seed(self, seed: int) -> "Document":
        return replace(self, training=replace(self.training, seed=seed),
                       experiment=replace(self.experiment, seeds=(seed,)))


SECTIONS = ("environment", "training", "pretrain", "experiment")


def _strict(cls, section: str, d: dict):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    return d


def parse(doc: dict, base_dir: Path | None = None) -> Document:
    """Build a Document from a parsed JSON object; every value error becomes a ConfigError."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    try:
        env = _strict(GridConfig, "environment", doc.get("environment", {}))
        grid = GridConfig(**{k: (tuple(map(tuple, v)) if k in ("goals", "noisy_cells", "starts") and v is not None
                                 else v) for k, v in env.items()})
        train = dict(_strict(RunConfig, "training", doc.get("training", {})))
        if "grid" in train:
            raise ConfigError("put grid settings in the 'environment' section")
        if train.get("perception") and base_dir is not None:
            train["perception"] = str((base_dir / train["perception"]).resolve())
        training = RunConfig.from_dict({**train, "grid": grid})
        pre = PretrainConfig(**_strict(PretrainConfig, "pretrain", doc.get("pretrain", {})))
        exp = ExperimentConfig(**_strict(ExperimentConfig, "experiment", doc.get("experiment", {})))
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return Document(grid, training, pre, exp)


def load(path) -> Document:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {str(path)!r} does not exist")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {str(path)!r} is not valid JSON: {e}") from e
    return parse(doc, path.parent)


def default_document() -> dict:
    """The defaults as a JSON-ready object (useful as a starting template)."""
    d = Document()
    train = d.training.to_dict()
    train.pop("grid")
    return {
        "environment": d.environment.to_dict(),
        "training": train,
        "pretrain": {f.name: getattr(d.pretrain, f.name) for f in fields(PretrainConfig)},
        "experiment": {"seeds": list(d.experiment.seeds), "window": d.experiment.window},
    }
