"""Run configuration: one JSON document covering data, model, training and sweeps."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

from .model import ModelConfig
from .robustness import KINDS
from .scene import SceneConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    root: str = "data"
    n_train: int = 200
    n_eval: int = 50
    seed: int = 0
    images: str = "keyframes"

    def __post_init__(self):
        if self.images not in ("all", "keyframes", "none"):
            raise ConfigError(f"data.images must be all, keyframes or none, got {self.images!r}")

    @property
    def eval_seed(self) -> int:
        return self.seed + 1


@dataclass(frozen=True)
class SweepConfig:
    kinds: tuple = ("extrinsics_rotation", "time_delay", "camera_miss")
    r_max: tuple = (0.0, 2.0, 4.0, 6.0, 8.0)
    delays: tuple = (0, 1, 2, 3, 4)
    seeds: tuple = (0,)
    miss_mode: str = "remove"

    def __post_init__(self):
        bad = [k for k in self.kinds if k not in KINDS]
        if bad:
            raise ConfigError(f"unknown sweep kinds {bad}")
        if any(r < 0 for r in self.r_max) or any(d < 0 for d in self.delays):
            raise ConfigError("sweep values must be nonnegative")
        if self.miss_mode not in ("remove", "zero"):
            raise ConfigError(f"unknown camera-miss mode {self.miss_mode!r}")


@dataclass(frozen=True)
class EvalConfig:
    batch_size: int = 8
    dump_predictions: bool = True
    dump_bev: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("eval.batch_size must be >= 1")


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _lists(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _build(cls, d, section: str):
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**_tuples(d))
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {section!r} section: {e}") from e


@dataclass(frozen=True)
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    out_dir: str = "runs/default"

    def __post_init__(self):
        if tuple(self.model.roi) != tuple(self.scene.roi):
            raise ConfigError("model.roi and scene.roi must agree")
        h, w = self.scene.image_h, self.scene.image_w
        if h % self.model.stride or w % self.model.stride:
            raise ConfigError(f"image {h}x{w} is not divisible by the encoder stride {self.model.stride}")

    SECTIONS = {"scene": SceneConfig, "model": ModelConfig, "train": TrainConfig, "data": DataConfig,
                "eval": EvalConfig, "sweep": SweepConfig}

    def to_dict(self) -> dict:
        out = {name: _lists(asdict(getattr(self, name))) for name in self.SECTIONS}
        out["out_dir"] = self.out_dir
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(cls.SECTIONS) - {"out_dir"}
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        kw = {name: _build(sec, d.get(name, {}), name) for name, sec in cls.SECTIONS.items()}
        if "roi" in d.get("scene", {}) and "roi" not in d.get("model", {}):
            kw["model"] = _build(ModelConfig, {**d.get("model", {}), "roi": d["scene"]["roi"]}, "model")
        try:
            return cls(**kw, out_dir=str(d.get("out_dir", "runs/default")))
        except ConfigError:
            raise
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.loads(text)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def preset_names() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("mv3d.configs").iterdir() if p.name.endswith(".json"))


def preset_text(name: str) -> str:
    """Raw JSON of a configuration shipped with the package (e.g. ``"benchmark"``)."""
    if name not in preset_names():
        raise ConfigError(f"no preset {name!r}; available: {', '.join(preset_names())}")
    return resources.files("mv3d.configs").joinpath(f"{name}.json").read_text()
