"""Run configuration file: one JSON object with ``train``, ``model`` and ``flow`` sections."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .flow import TvL1Params
from ._strict import from_mapping, to_mapping
from .model import Rev2NetConfig
from .train import TrainConfig

SECTIONS = ("train", "model", "flow")


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: Rev2NetConfig = field(default_factory=Rev2NetConfig)
    flow: TvL1Params = field(default_factory=TvL1Params)
    path: Path | None = None

    @classmethod
    def from_dict(cls, data, path=None) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be a JSON object")
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(unknown[0], f"unknown section (expected {', '.join(SECTIONS)})")
        train = TrainConfig.from_dict(data.get("train"))
        model = Rev2NetConfig.from_dict(data.get("model"))
        flow = from_mapping(TvL1Params, data.get("flow"), "flow")
        return cls(train, model, flow, Path(path) if path is not None else None)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"{path} is not valid JSON: {exc}") from None
        return cls.from_dict(data, path)

    def to_dict(self) -> dict:
        return {"train": to_mapping(self.train), "model": to_mapping(self.model), "flow": to_mapping(self.flow)}

    def with_model(self, **changes) -> "RunConfig":
        return replace(self, model=replace(self.model, **changes))

    def resolve(self, value: str) -> Path:
        """Relative paths in a config file are taken relative to that file."""
        p = Path(value)
        if p.is_absolute() or self.path is None:
            return p
        return self.path.parent / p

    @property
    def out_dir(self) -> Path:
        return self.resolve(self.train.out_dir)

    @property
    def manifest_path(self) -> Path:
        if not self.train.manifest:
            raise ConfigError("train.manifest", "a dataset manifest path is required")
        return self.resolve(self.train.manifest)
