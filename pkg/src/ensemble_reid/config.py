"""Run configuration: one nested structure covering data, model, training,
augmentation, and re-ranking, with YAML round trips and dotted overrides.

Dataclass defaults are the full-scale settings (384x128 inputs, 80 epochs,
batch 32, step decay at 40/60). ``RunConfig.desk_default()`` is the small
synthetic profile every command falls back to when no config file is given.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import yaml

from .data import AugmentConfig, Dataset, load_dataset, make_synthetic_dataset
from .evaluation import RerankParams
from .model import ModelConfig
from .training import TrainConfig

DATA_LAYOUTS = ("synthetic", "market_style")


@dataclass(frozen=True)
class DataConfig:
    layout: str = "market_style"
    root: str | None = None
    num_ids: int = 20
    images_per_id: int = 8
    num_cams: int = 3
    image_size: tuple[int, int] = (64, 32)
    seed: int = 7

    def __post_init__(self):
        if self.layout not in DATA_LAYOUTS:
            raise ValueError(f"layout must be one of {DATA_LAYOUTS}, got {self.layout!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "DataConfig":
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)


def load_data(cfg: DataConfig) -> Dataset:
    """Materialize the dataset a DataConfig describes."""
    if cfg.layout == "market_style":
        if cfg.root is None:
            raise ValueError("market_style data needs data.root to point at the dataset")
        return load_dataset(cfg.root, "market_style")
    if cfg.root is not None:
        return load_dataset(cfg.root, "synthetic")
    return make_synthetic_dataset(cfg.num_ids, cfg.images_per_id, cfg.num_cams,
                                  cfg.image_size, cfg.seed)


_SECTIONS = {
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "augment": AugmentConfig,
    "rerank": RerankParams,
}


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig
    model: ModelConfig
    train: TrainConfig
    augment: AugmentConfig
    rerank: RerankParams
    eval_ranks: tuple[int, ...] = (1, 5, 10, 20)
    out_dir: str = "runs/latest"
    pretrained_weights: str | None = None

    def __post_init__(self):
        if not self.eval_ranks or any(k < 1 for k in self.eval_ranks):
            raise ValueError(f"eval_ranks must be positive, got {self.eval_ranks}")

    @classmethod
    def paper_default(cls) -> "RunConfig":
        """Full-scale profile: every section at its dataclass defaults."""
        return cls(data=DataConfig(), model=ModelConfig(), train=TrainConfig(),
                   augment=AugmentConfig(), rerank=RerankParams())

    @classmethod
    def desk_default(cls) -> "RunConfig":
        """Small synthetic profile that trains in seconds on a CPU."""
        return cls(
            data=DataConfig(layout="synthetic"),
            model=ModelConfig(num_branches=3, reduce_dim=64, last_stride=1,
                              pooling="AAP", num_classes=20, backbone="desk_scale",
                              input_size=(64, 32)),
            train=TrainConfig(epochs=10, batch_size=32, base_lr=0.01,
                              decay_epochs=(6, 8), seed=0),
            augment=AugmentConfig(target_size=(64, 32), pad_pixels=4),
            rerank=RerankParams(),
            out_dir="runs/desk",
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict, base: "RunConfig | None" = None) -> "RunConfig":
        """Build from a (possibly partial) nested dict, on top of ``base``.

        Unknown sections or options raise a configuration error naming them.
        """
        if not isinstance(d, dict):
            raise ValueError(f"run configuration must be a mapping, got {type(d).__name__}")
        merged = (base or cls.paper_default()).to_dict()
        for section, value in d.items():
            if section in _SECTIONS:
                if not isinstance(value, dict):
                    raise ValueError(f"section {section!r} must be a mapping")
                unknown = set(value) - set(merged[section])
                if unknown:
                    raise ValueError(f"unknown option(s) {sorted(unknown)} in section "
                                     f"{section!r}")
                merged[section].update(value)
            elif section in ("eval_ranks", "out_dir", "pretrained_weights"):
                merged[section] = value
            else:
                raise ValueError(f"unknown configuration section {section!r}")
        sections = {name: klass.from_dict(merged[name]) for name, klass in _SECTIONS.items()}
        eval_ranks = tuple(merged["eval_ranks"])
        return cls(**sections, eval_ranks=eval_ranks, out_dir=merged["out_dir"],
                   pretrained_weights=merged["pretrained_weights"])

    def to_yaml(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(_plain(self.to_dict()), fh, sort_keys=False)

    @classmethod
    def from_yaml(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            d = yaml.safe_load(fh)
        if isinstance(d, dict) and "config" in d and "command" in d:
            d = d["config"]  # accept snapshots written by the command line
        if d is None:
            d = {}
        return cls.from_dict(d, base=base)

    def with_overrides(self, overrides: list[str]) -> "RunConfig":
        """Apply ``section.key=value`` strings; values parse as YAML scalars."""
        if not overrides:
            return self
        patch: dict = {}
        for item in overrides:
            key, sep, raw = item.partition("=")
            if not sep or not key:
                raise ValueError(f"override {item!r} is not of the form key=value")
            value = yaml.safe_load(raw) if raw != "" else None
            section, dot, option = key.partition(".")
            if dot:
                if option == "" or "." in option:
                    raise ValueError(f"override key {key!r} must be section.option")
                patch.setdefault(section, {})[option] = value
            else:
                patch[key] = value
        return RunConfig.from_dict(patch, base=self)

    def replace_out_dir(self, out_dir: str) -> "RunConfig":
        return replace(self, out_dir=out_dir)


def _plain(value):
    """Recursively turn tuples into lists so YAML stays plain."""
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value
