import numpy as np
import pytest

from bdk.errors import IOFailure, MagicError, NotFoundError, ValidationError
from bdk.synth_data import (
    ATTRIBUTES,
    NEGATIVE,
    POSITIVE,
    UNDECIDED,
    SpriteConfig,
    attribute_oracle,
    attribute_score,
    generate_sprite_dataset,
    load_dataset,
    save_dataset,
)


@pytest.fixture(scope="module")
def thousand():
    return generate_sprite_dataset(SpriteConfig(seed=11), 1000)


def test_same_seed_is_bitwise_identical():
    a = generate_sprite_dataset(SpriteConfig(seed=5), 50)
    b = generate_sprite_dataset(SpriteConfig(seed=5), 50)
    np.testing.assert_array_equal(a.images, b.images)
    for k in ATTRIBUTES:
        np.testing.assert_array_equal(a.labels[k], b.labels[k])
    c = generate_sprite_dataset(SpriteConfig(seed=6), 50)
    assert not np.array_equal(a.images, c.images)


def test_range_and_balance(thousand):
    assert thousand.images.shape == (1000, 256)
    assert thousand.images.min() >= -1.0 and thousand.images.max() <= 1.0
    for k in ATTRIBUTES:
        assert 0.45 <= thousand.labels[k].mean() <= 0.55


def test_attributes_are_independent(thousand):
    y = np.stack([thousand.labels[k] for k in ATTRIBUTES]).astype(float)
    corr = np.corrcoef(y)
    assert np.all(np.abs(corr[np.triu_indices(3, 1)]) < 0.1)


@pytest.mark.parametrize("attr", ATTRIBUTES)
def test_oracle_is_sound_on_clean_images(thousand, attr):
    np.testing.assert_array_equal(attribute_oracle(thousand.images, attr), thousand.labels[attr])


@pytest.mark.parametrize("attr", ATTRIBUTES)
def test_oracle_is_robust_to_small_noise(thousand, attr, gen):
    noisy = thousand.images + 0.05 * gen.standard_normal(thousand.images.shape)
    assert np.mean(attribute_oracle(noisy, attr) == thousand.labels[attr]) >= 0.95


def test_flat_image_is_undecided():
    for attr in ATTRIBUTES:
        assert attribute_oracle(np.zeros(256), attr) == UNDECIDED


def test_oracle_codes():
    assert (POSITIVE, NEGATIVE, UNDECIDED) == (1, 0, -1)


def test_scores_shift_with_marker(thousand):
    s = attribute_score(thousand.images, "marker")
    y = thousand.labels["marker"]
    assert s[y == 1].min() > s[y == 0].max()


def test_three_channel_images():
    ds = generate_sprite_dataset(SpriteConfig(seed=2, channels=3), 40)
    assert ds.images.shape == (40, 768)
    for attr in ATTRIBUTES:
        np.testing.assert_array_equal(attribute_oracle(ds.images, attr), ds.labels[attr])


def test_config_and_argument_errors():
    with pytest.raises(ValidationError):
        generate_sprite_dataset(SpriteConfig(), 0)
    with pytest.raises(ValidationError):
        SpriteConfig(side=7)
    with pytest.raises(ValidationError):
        SpriteConfig(channels=2)
    with pytest.raises(ValidationError):
        SpriteConfig(attributes=())
    with pytest.raises(ValidationError):
        SpriteConfig(attributes=("smile",))
    with pytest.raises(NotFoundError):
        attribute_oracle(np.zeros(256), "smile")
    with pytest.raises(ValidationError):
        attribute_oracle(np.zeros(250), "marker")


def test_subset_of_attributes():
    ds = generate_sprite_dataset(SpriteConfig(seed=1, attributes=("marker",)), 20)
    assert set(ds.labels) == {"marker"}


def test_dataset_file_round_trip(tmp_path):
    ds = generate_sprite_dataset(SpriteConfig(seed=4, side=12), 30)
    path = tmp_path / "d.bdds"
    save_dataset(ds, path)
    back = load_dataset(path)
    np.testing.assert_array_equal(back.images, ds.images)
    assert back.config == ds.config
    for k in ds.labels:
        np.testing.assert_array_equal(back.labels[k], ds.labels[k])


def test_dataset_file_errors(tmp_path):
    ds = generate_sprite_dataset(SpriteConfig(seed=4), 10)
    path = tmp_path / "d.bdds"
    save_dataset(ds, path)
    raw = path.read_bytes()
    (tmp_path / "short.bdds").write_bytes(raw[:-5])
    with pytest.raises(IOFailure):
        load_dataset(tmp_path / "short.bdds")
    (tmp_path / "bad.bdds").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(MagicError):
        load_dataset(tmp_path / "bad.bdds")
    with pytest.raises(IOFailure):
        load_dataset(tmp_path / "missing.bdds")
