from __future__ import annotations

import pytest

from ensemble_reid import extract_all, make_synthetic_dataset

from helpers import desk_augment_cfg, quick_train


@pytest.fixture(scope="session")
def desk_dataset():
    return make_synthetic_dataset()


@pytest.fixture(scope="session")
def trained_desk(desk_dataset):
    """A small trained model reused by read-only tests (do not re-init)."""
    model, log = quick_train(desk_dataset, seed=0, epochs=3)
    return model, log


@pytest.fixture(scope="session")
def desk_features(trained_desk, desk_dataset):
    model, _ = trained_desk
    cfg = desk_augment_cfg()
    query = extract_all(model, desk_dataset.query, cfg, batch_size=32)
    gallery = extract_all(model, desk_dataset.gallery, cfg, batch_size=32)
    return query, gallery
