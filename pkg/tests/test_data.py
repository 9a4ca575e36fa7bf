import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ensemble_reid import (
    AugmentConfig,
    Sample,
    augment,
    hflip,
    load_dataset,
    make_synthetic_dataset,
    parse_market_filename,
    resize_image,
    save_synthetic_manifest,
    standardize,
)
from ensemble_reid.data import _relabel_train


def test_parse_market_filename_examples():
    assert parse_market_filename("0001_c1s1_000151_00.jpg") == (1, 1)
    assert parse_market_filename("-1_c3s2_000001_00.jpg") == (-1, 3)
    assert parse_market_filename("0000_c6s4_000002_01.jpg") == (0, 6)
    assert parse_market_filename("1501_c12s1_0_0.png") == (1501, 12)


def test_parse_market_filename_strips_directories():
    assert parse_market_filename("/data/market/query/0042_c2s1_000000_00.jpg") == (42, 2)


@pytest.mark.parametrize("bad", ["readme.txt", "c1_0001.jpg", "0001-c1.jpg", "_c1.jpg"])
def test_parse_market_filename_rejects_malformed(bad):
    with pytest.raises(ValueError, match="file name"):
        parse_market_filename(bad)


def _write_market_image(path, color):
    import cv2

    img = np.zeros((48, 24, 3), dtype=np.uint8)
    img[:] = color[::-1]  # cv2 writes BGR
    assert cv2.imwrite(str(path), img)


@pytest.fixture()
def market_tree(tmp_path):
    for sub in ("bounding_box_train", "bounding_box_test", "query"):
        (tmp_path / sub).mkdir()
    train = tmp_path / "bounding_box_train"
    _write_market_image(train / "0005_c1s1_000001_00.png", (200, 30, 30))
    _write_market_image(train / "0005_c2s1_000002_00.png", (200, 40, 30))
    _write_market_image(train / "0009_c1s1_000003_00.png", (30, 200, 30))
    _write_market_image(train / "0012_c3s1_000004_00.png", (30, 30, 200))
    _write_market_image(train / "-1_c1s1_000005_00.png", (9, 9, 9))
    (train / "notes.txt").write_text("not an image")  # ignored extension
    query = tmp_path / "query"
    _write_market_image(query / "0005_c1s1_000006_00.png", (201, 31, 31))
    _write_market_image(query / "0009_c2s1_000007_00.png", (31, 201, 31))
    _write_market_image(query / "-1_c1s1_000008_00.png", (9, 9, 9))
    gallery = tmp_path / "bounding_box_test"
    _write_market_image(gallery / "0005_c2s1_000009_00.png", (199, 29, 29))
    _write_market_image(gallery / "0009_c1s1_000010_00.png", (29, 199, 29))
    _write_market_image(gallery / "0000_c1s1_000011_00.png", (120, 120, 120))
    _write_market_image(gallery / "-1_c2s1_000012_00.png", (8, 8, 8))
    return tmp_path


def test_market_layout_roles_and_relabeling(market_tree):
    ds = load_dataset(market_tree, layout="market_style")
    # junk dropped from train, remaining ids 5/9/12 relabeled to 0/1/2
    assert ds.num_train_classes == 3
    assert sorted({s.person_id for s in ds.train}) == [0, 1, 2]
    assert len(ds.train) == 4
    # query keeps only real identities
    assert sorted(s.person_id for s in ds.query) == [5, 9]
    # gallery keeps junk and distractor rows for the protocol to handle
    assert sorted(s.person_id for s in ds.gallery) == [-1, 0, 5, 9]


def test_market_images_are_rgb_unit_range(market_tree):
    ds = load_dataset(market_tree, layout="market_style")
    sample = next(s for s in ds.query if s.person_id == 5)
    assert sample.image.dtype == np.float32
    assert sample.image.shape == (48, 24, 3)
    # the stored color round-trips through the PNG (red channel first)
    np.testing.assert_allclose(sample.image[0, 0], [201 / 255, 31 / 255, 31 / 255],
                               atol=1e-6)
    assert sample.camera_id == 1


def test_market_layout_missing_directory(tmp_path):
    (tmp_path / "bounding_box_train").mkdir()
    (tmp_path / "query").mkdir()
    with pytest.raises(FileNotFoundError, match="gallery"):
        load_dataset(tmp_path, layout="market_style")


def test_load_dataset_rejects_unknown_layout(tmp_path):
    with pytest.raises(ValueError, match="layout"):
        load_dataset(tmp_path, layout="videos")


def test_synthetic_split_sizes_and_ids(desk_dataset):
    ds = desk_dataset
    assert len(ds.query) == 20
    assert len(ds.gallery) == 40
    assert len(ds.train) == 100
    assert ds.num_train_classes == 20
    assert sorted({s.person_id for s in ds.query}) == list(range(1, 21))
    assert {s.camera_id for s in ds.train} <= {1, 2, 3}
    # train labels are contiguous from zero
    assert sorted({s.person_id for s in ds.train}) == list(range(20))


def test_synthetic_every_query_has_cross_camera_match(desk_dataset):
    for q in desk_dataset.query:
        matches = [
            g
            for g in desk_dataset.gallery
            if g.person_id == q.person_id and g.camera_id != q.camera_id
        ]
        assert matches, f"query id {q.person_id} lacks a cross-camera gallery match"


def test_synthetic_bitwise_determinism():
    a = make_synthetic_dataset(num_ids=4, images_per_id=5, seed=7)
    b = make_synthetic_dataset(num_ids=4, images_per_id=5, seed=7)
    for split in ("train", "query", "gallery"):
        sa, sb = getattr(a, split), getattr(b, split)
        assert len(sa) == len(sb)
        for x, y in zip(sa, sb):
            assert x.person_id == y.person_id
            assert x.camera_id == y.camera_id
            assert x.image.tobytes() == y.image.tobytes()


def test_synthetic_seed_changes_pixels():
    a = make_synthetic_dataset(num_ids=4, images_per_id=5, seed=7)
    b = make_synthetic_dataset(num_ids=4, images_per_id=5, seed=8)
    assert any(
        x.image.tobytes() != y.image.tobytes() for x, y in zip(a.query, b.query)
    )


def test_synthetic_argument_validation():
    with pytest.raises(ValueError, match="num_cams"):
        make_synthetic_dataset(num_cams=1)
    with pytest.raises(ValueError, match="num_ids"):
        make_synthetic_dataset(num_ids=1)
    with pytest.raises(ValueError, match="images_per_id"):
        make_synthetic_dataset(images_per_id=1)


def test_synthetic_images_are_frozen(desk_dataset):
    img = desk_dataset.train[0].image
    with pytest.raises(ValueError):
        img[0, 0, 0] = 0.0


@pytest.mark.parametrize("as_directory", [False, True])
def test_manifest_round_trip(tmp_path, as_directory):
    if as_directory:
        target = tmp_path / "manifest.txt"
        load_from = tmp_path
    else:
        target = tmp_path / "desk.manifest"
        load_from = target
    save_synthetic_manifest(target, num_ids=5, images_per_id=6, num_cams=3,
                            size=(40, 20), seed=11)
    direct = make_synthetic_dataset(num_ids=5, images_per_id=6, num_cams=3,
                                    size=(40, 20), seed=11)
    loaded = load_dataset(load_from, layout="synthetic")
    assert loaded.num_train_classes == direct.num_train_classes
    for split in ("train", "query", "gallery"):
        for x, y in zip(getattr(direct, split), getattr(loaded, split)):
            assert (x.person_id, x.camera_id) == (y.person_id, y.camera_id)
            assert x.image.tobytes() == y.image.tobytes()


def test_manifest_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="manifest"):
        load_dataset(tmp_path / "nowhere", layout="synthetic")


def test_sample_rejects_non_rgb():
    with pytest.raises(ValueError, match=r"\(H, W, 3\)"):
        Sample(np.zeros((8, 4), dtype=np.float32), 1, 1, "x")


def test_hflip_is_an_involution():
    rng = np.random.default_rng(0)
    img = rng.random((10, 6, 3), dtype=np.float32)
    np.testing.assert_array_equal(hflip(hflip(img)), img)
    assert not np.array_equal(hflip(img), img)


def test_resize_image_shapes():
    img = np.random.default_rng(1).random((20, 10, 3), dtype=np.float32)
    up = resize_image(img, (40, 20))
    assert up.shape == (40, 20, 3)
    same = resize_image(img, (20, 10))
    np.testing.assert_array_equal(same, img)
    assert same is not img  # a copy, not an alias


def test_standardize_known_value():
    cfg = AugmentConfig()
    img = np.full((2, 2, 3), 0.5, dtype=np.float32)
    out = standardize(img, cfg)
    expected = (0.5 - np.array(cfg.norm_mean)) / np.array(cfg.norm_std)
    np.testing.assert_allclose(out[0, 0], expected, rtol=1e-6)
    assert out.dtype == np.float32


def _plain_sample(height=30, width=14):
    rng = np.random.default_rng(3)
    img = rng.random((height, width, 3)).astype(np.float32)
    return Sample(img, 1, 1, "synthetic-test")


def test_augment_shape_and_range():
    cfg = AugmentConfig(target_size=(64, 32), pad_pixels=4)
    rng = np.random.default_rng(0)
    for _ in range(20):
        out = augment(_plain_sample(), cfg, rng)
        assert out.shape == (64, 32, 3)
        assert out.dtype == np.float32
        assert out.min() >= 0.0 and out.max() <= 1.0


def test_augment_with_everything_disabled_is_plain_resize():
    cfg = AugmentConfig(target_size=(64, 32), crop_enabled=False,
                        flip_enabled=False, erase_enabled=False)
    sample = _plain_sample()
    out1 = augment(sample, cfg, np.random.default_rng(0))
    out2 = augment(sample, cfg, np.random.default_rng(99))
    np.testing.assert_array_equal(out1, out2)
    np.testing.assert_array_equal(out1, resize_image(sample.image, (64, 32)))


def test_augment_same_rng_state_is_deterministic():
    cfg = AugmentConfig(target_size=(64, 32), pad_pixels=4)
    sample = _plain_sample()
    out1 = augment(sample, cfg, np.random.default_rng(5))
    out2 = augment(sample, cfg, np.random.default_rng(5))
    np.testing.assert_array_equal(out1, out2)


def test_random_erase_writes_fill_color():
    cfg = AugmentConfig(target_size=(64, 32), crop_enabled=False, flip_enabled=False,
                        erase_probability=1.0)
    sample = _plain_sample(64, 32)
    out = augment(sample, cfg, np.random.default_rng(2))
    fill = np.asarray(cfg.norm_mean, dtype=np.float32)
    hit = np.all(np.isclose(out, fill.reshape(1, 1, 3)), axis=2)
    assert hit.any(), "expected an erased rectangle filled with the channel means"


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(erase_probability=1.5)
    with pytest.raises(ValueError):
        AugmentConfig(target_size=(0, 32))
    with pytest.raises(ValueError):
        AugmentConfig(pad_pixels=-1)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(min_value=-10**6, max_value=10**6).filter(lambda i: i != -1),
                min_size=1, max_size=30))
def test_relabel_train_is_order_preserving_bijection(ids):
    samples = [Sample(np.zeros((2, 2, 3), dtype=np.float32), pid, 1, str(k))
               for k, pid in enumerate(ids)]
    relabeled, n_classes = _relabel_train(samples)
    assert n_classes == len(set(ids))
    assert sorted({s.person_id for s in relabeled}) == list(range(n_classes))
    # equal originals map to equal labels, order of originals preserved
    mapping = {}
    for before, after in zip(samples, relabeled):
        mapping.setdefault(before.person_id, after.person_id)
        assert mapping[before.person_id] == after.person_id
    originals = sorted(mapping)
    assert [mapping[p] for p in originals] == sorted(mapping.values())
