import numpy as np
import pytest

from oagdefense.data import (
    CLASS_NAMES,
    generate_synthetic_dataset,
    load_manifest,
    render_dataset,
    stratified_subset,
)
from oagdefense.tensor_core import ConfigError


def test_counts_and_splits():
    ds = render_dataset(classes=10, per_class=100, size=(16, 16), seed=0)
    assert len(ds.labels) == 1000
    assert [int(np.sum(ds.splits == s)) for s in ("train", "val", "test")] == [700, 100, 200]
    for c in range(10):
        assert np.sum(ds.labels == c) == 100
        assert np.sum((ds.labels == c) & (ds.splits == "test")) == 20


def test_integer_pixels_in_range():
    ds = render_dataset(classes=4, per_class=5, size=(20, 24), seed=1)
    assert ds.images.shape == (20, 3, 20, 24)
    assert np.all(ds.images == np.rint(ds.images))
    assert ds.images.min() >= 0 and ds.images.max() <= 255


def test_same_seed_same_bytes(tmp_path):
    generate_synthetic_dataset(tmp_path / "a", classes=3, per_class=4, size=(16, 16), seed=7)
    generate_synthetic_dataset(tmp_path / "b", classes=3, per_class=4, size=(16, 16), seed=7)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 3 * 4 + 2
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_different_seeds_differ():
    a = render_dataset(classes=2, per_class=3, size=(16, 16), seed=1)
    b = render_dataset(classes=2, per_class=3, size=(16, 16), seed=2)
    assert not np.array_equal(a.images, b.images)


def test_manifest_round_trip(tmp_path):
    ds = render_dataset(classes=3, per_class=10, size=(16, 16), seed=3)
    manifest = generate_synthetic_dataset(tmp_path, classes=3, per_class=10, size=(16, 16), seed=3)
    assert manifest.read_text().splitlines()[0] == "path,label,split"
    back = load_manifest(manifest)
    np.testing.assert_array_equal(back.images, ds.images)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.class_names == list(CLASS_NAMES[:3])
    assert back.paths == ds.paths


def test_manifest_validation(tmp_path):
    generate_synthetic_dataset(tmp_path, classes=2, per_class=2, size=(16, 16), seed=0)
    text = (tmp_path / "manifest.csv").read_text()
    (tmp_path / "m1.csv").write_text(text.replace("path,label,split", "file,label,split"))
    with pytest.raises(ConfigError, match="header"):
        load_manifest(tmp_path / "m1.csv")
    (tmp_path / "m2.csv").write_text(text.replace(",train", ",holdout", 1))
    with pytest.raises(ConfigError, match="split"):
        load_manifest(tmp_path / "m2.csv")
    (tmp_path / "m3.csv").write_text(text.replace(",1,", ",7,", 1))
    with pytest.raises(ConfigError, match="label"):
        load_manifest(tmp_path / "m3.csv")


def test_class_count_bounds():
    with pytest.raises(ConfigError):
        render_dataset(classes=1)
    with pytest.raises(ConfigError):
        render_dataset(classes=11)


def test_stratified_subset():
    labels = np.array([2, 0, 2, 1, 0, 2, 1])
    np.testing.assert_array_equal(stratified_subset(labels, 1), [0, 1, 3])
    np.testing.assert_array_equal(stratified_subset(labels, 2), [0, 1, 2, 3, 4, 6])
