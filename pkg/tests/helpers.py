"""Small builders shared across test modules."""

from __future__ import annotations

from ensemble_reid import (
    AugmentConfig,
    EnsembleNet,
    ModelConfig,
    TrainConfig,
    init_model,
    train,
)

DESK_SIZE = (64, 32)


def desk_model_cfg(**overrides) -> ModelConfig:
    base = dict(
        num_branches=2,
        reduce_dim=64,
        last_stride=1,
        pooling="AAP",
        num_classes=20,
        backbone="desk_scale",
        input_size=DESK_SIZE,
    )
    base.update(overrides)
    return ModelConfig(**base)


def desk_augment_cfg(**overrides) -> AugmentConfig:
    base = dict(target_size=DESK_SIZE, pad_pixels=4)
    base.update(overrides)
    return AugmentConfig(**base)


def desk_train_cfg(**overrides) -> TrainConfig:
    base = dict(epochs=3, batch_size=32, base_lr=0.01, decay_epochs=(2,), seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def build_desk_model(seed: int = 0, **cfg_overrides) -> EnsembleNet:
    model = EnsembleNet(desk_model_cfg(**cfg_overrides))
    init_model(model, seed=seed)
    return model


def quick_train(dataset, seed: int = 0, epochs: int = 3, **cfg_overrides):
    model = build_desk_model(seed=seed, num_classes=dataset.num_train_classes,
                             **cfg_overrides)
    decay = (max(1, epochs - 1),)
    train_cfg = desk_train_cfg(epochs=epochs, decay_epochs=decay, seed=seed)
    model, log, _ = train(model, dataset, train_cfg, desk_augment_cfg())
    return model, log
