import numpy as np
import pytest

from convitac import tensorfile
from convitac.errors import LoadError, ValidationError
from convitac.synthdata import (SynthSpec, arrays_from_samples, generate_dataset, generate_pair,
                                generate_samples, load_manifest, render_tactile, split_indices,
                                spec_with)

SMALL = SynthSpec(num_classes=4, pairs_per_class=8, image_size=16, radius_min=3.0, radius_max=4.5)


def test_noise_free_tactile_matches_renderer():
    spec = spec_with(SynthSpec(), noise_std=0.0)
    for i in range(10):
        pair = generate_pair(i % 8, spec, i)
        expected = render_tactile(pair.tactile_texture, pair.contact_radius, spec)
        assert pair.tactile.tobytes() == expected.tobytes()
        assert pair.tactile_texture == pair.visual_texture


def test_uncorrelated_tactile_class_is_uniform():
    spec = spec_with(SynthSpec(), rho=0.0)
    agree = [generate_pair(i % 8, spec, i).tactile_texture.class_index == i % 8 for i in range(1000)]
    assert abs(np.mean(agree) - 1 / 8) < 0.05


def test_generation_is_deterministic():
    a = generate_pair(3, SynthSpec(), 17)
    b = generate_pair(3, SynthSpec(), 17)
    assert a.visual.tobytes() == b.visual.tobytes()
    assert a.tactile.tobytes() == b.tactile.tobytes()
    c = generate_pair(3, spec_with(SynthSpec(), seed=1), 17)
    assert a.visual.tobytes() != c.visual.tobytes()


def test_default_sizes_and_value_range():
    samples = generate_samples(SynthSpec())
    v, t, y, m = arrays_from_samples(samples)
    assert len(samples) == 512
    assert v.shape == t.shape == (512, 32, 32, 3)
    assert np.bincount(y).tolist() == [64] * 8
    assert v.min() >= 0 and v.max() <= 1 and t.min() >= 0 and t.max() <= 1
    assert set(np.unique(m)) <= {0.0, 1.0}


def test_dataset_files_are_byte_identical(tmp_path):
    generate_dataset(SMALL, tmp_path / "a")
    generate_dataset(SMALL, tmp_path / "b")
    for name in ("manifest.csv", "train.csv", "test.csv", "visual/00005.cvt", "tactile/00031.cvt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    lines = (tmp_path / "a" / "manifest.csv").read_text().splitlines()
    assert lines[0] == "visual,tactile,label,mask"
    assert len(lines) == 33


def test_split_is_stratified_seventy_thirty():
    labels = np.repeat(np.arange(8), 64)
    train, test = split_indices(labels, 0.7, 0)
    assert len(train) + len(test) == 512
    assert not set(train) & set(test)
    assert np.bincount(labels[train]).tolist() == [45] * 8


def test_missing_file_names_row(tmp_path):
    generate_dataset(SMALL, tmp_path, train_fraction=None)
    (tmp_path / "tactile" / "00002.cvt").unlink()
    with pytest.raises(LoadError, match="row 3"):
        load_manifest(tmp_path / "manifest.csv").arrays()


def test_shape_mismatch_names_expected_shape(tmp_path):
    generate_dataset(SMALL, tmp_path, train_fraction=None)
    tensorfile.save_tensor(tmp_path / "visual" / "00004.cvt", np.zeros((8, 8, 3), np.float32))
    with pytest.raises(ValidationError, match="16x16x3"):
        load_manifest(tmp_path / "manifest.csv").arrays()


def test_loaded_arrays_match_generation(tmp_path):
    generate_dataset(SMALL, tmp_path, train_fraction=None)
    v, t, y, m = load_manifest(tmp_path / "manifest.csv").arrays()
    gv, gt, gy, gm = arrays_from_samples(generate_samples(SMALL))
    assert v.tobytes() == gv.tobytes() and t.tobytes() == gt.tobytes()
    np.testing.assert_array_equal(y, gy)


def test_tactile_pixels_carry_class_information():
    """A least-squares linear probe on raw tactile pixels beats chance on held-out pairs."""
    spec = spec_with(SynthSpec(), pairs_per_class=48)
    _, t, y, _ = arrays_from_samples(generate_samples(spec))
    x = np.fft.fft2(t.mean(axis=-1))
    feats = np.abs(x).reshape(len(t), -1)
    feats = np.hstack([feats, np.ones((len(t), 1))])
    train, test = split_indices(y, 0.7, 0)
    onehot = np.eye(8)[y[train]]
    w, *_ = np.linalg.lstsq(feats[train], onehot, rcond=1e-6)
    acc = np.mean(np.argmax(feats[test] @ w, axis=1) == y[test])
    assert acc > 1 / 8 + 0.2


def test_spec_validation():
    with pytest.raises(ValidationError):
        spec_with(SynthSpec(), rho=1.5)
    with pytest.raises(ValidationError):
        spec_with(SynthSpec(), radius_max=20.0)
