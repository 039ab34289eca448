import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from mdlkit.datasets import (LabeledDataset, SyntheticSpec, generate_synthetic, inject_label_noise, load_dataset,
                             load_image_dir, save_dataset, subsample)


def small(n=100, classes=4, seed=0, **kw):
    return generate_synthetic(SyntheticSpec(classes=classes, size=16, **kw), n, seed)


def test_balanced_generation():
    assert small(100).class_counts() == [25, 25, 25, 25]
    counts = small(103).class_counts()
    assert max(counts) - min(counts) <= 1


def test_generation_is_deterministic_per_seed():
    a, b = small(40, seed=3), small(40, seed=3)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tolist() == b.labels.tolist()
    c = small(40, seed=4)
    assert a.images.tobytes() != c.images.tobytes()
    assert a.class_counts() == c.class_counts()


def test_shifted_domain_differs_in_pixel_distribution():
    src = small(200, texture=1)
    tgt = small(200, texture=2, hue_shift=150)
    gap = np.abs(src.images.mean(axis=(0, 2, 3)) - tgt.images.mean(axis=(0, 2, 3))).max()
    hist_s = np.histogram(src.images, bins=20, range=(0, 1))[0] / src.images.size
    hist_t = np.histogram(tgt.images, bins=20, range=(0, 1))[0] / tgt.images.size
    assert gap > 0.01 or np.abs(hist_s - hist_t).sum() > 0.1


def test_generation_errors():
    with pytest.raises(ValueError, match="at least one sample"):
        small(3)
    with pytest.raises(ValueError):
        SyntheticSpec(classes=1)
    with pytest.raises(ValueError):
        SyntheticSpec(texture=9)


def test_dataset_validation():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 3, 4, 4), np.float32), np.array([0, 5]), 3)
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 3, 4, 4), np.float32), np.array([0]), 3)


# --------------------------------------------------------------------------
# image directories


def _write_dir(root, names=("flowers", "aircraft"), per=3, size=(20, 10)):
    rng = np.random.default_rng(0)
    for name in names:
        d = root / name
        d.mkdir()
        for i in range(per):
            arr = rng.integers(0, 255, (size[1], size[0], 3), dtype=np.uint8)
            Image.fromarray(arr).save(d / f"{i}.{'png' if i % 2 else 'ppm'}")


def test_load_image_dir(tmp_path):
    _write_dir(tmp_path)
    ds = load_image_dir(tmp_path, 72)
    assert ds.images.shape == (6, 3, 72, 72) and ds.images.dtype == np.float32
    assert ds.labels.tolist() == [0, 0, 0, 1, 1, 1]  # aircraft < flowers
    assert 0 <= ds.images.min() and ds.images.max() <= 1


def test_load_image_dir_errors(tmp_path):
    _write_dir(tmp_path)
    (tmp_path / "aircraft" / "broken.png").write_bytes(b"not an image")
    with pytest.raises(ValueError, match="broken.png"):
        load_image_dir(tmp_path)
    empty = tmp_path / "zzz"
    (tmp_path / "aircraft" / "broken.png").unlink()
    empty.mkdir()
    with pytest.raises(ValueError, match="empty"):
        load_image_dir(tmp_path)


# --------------------------------------------------------------------------
# transforms


def test_subsample_identity_and_floor_rule():
    ds = small(100)
    full = subsample(ds, 1.0, 0)
    assert full.images.tobytes() == ds.images.tobytes()
    half = subsample(ds, 0.5, 0)
    expected = sum(max(1, int(np.floor(0.5 * c))) for c in ds.class_counts())
    assert len(half) == expected == 48
    assert half.class_counts() == [12, 12, 12, 12]
    odd = small(103)
    tenth = subsample(odd, 0.1, 1)
    assert tenth.class_counts() == [max(1, int(0.1 * c)) for c in odd.class_counts()]


def test_subsample_deterministic_and_pure():
    ds = small(60)
    snapshot = ds.labels.copy()
    a, b = subsample(ds, 0.25, 5), subsample(ds, 0.25, 5)
    assert a.images.tobytes() == b.images.tobytes()
    assert ds.labels.tolist() == snapshot.tolist()
    for bad in (0, -0.1, 1.5):
        with pytest.raises(ValueError):
            subsample(ds, bad, 0)


def test_label_noise_contract():
    ds = small(400)
    assert inject_label_noise(ds, 0.0, 0).labels.tolist() == ds.labels.tolist()
    noisy = inject_label_noise(ds, 0.25, 0)
    assert int((noisy.labels != ds.labels).sum()) == 100
    assert noisy.images is ds.images or noisy.images.tobytes() == ds.images.tobytes()
    assert inject_label_noise(ds, 0.25, 0).labels.tolist() == noisy.labels.tolist()


def test_label_noise_errors():
    ds = LabeledDataset(np.zeros((4, 1, 2, 2), np.float32), np.zeros(4, np.int64), 1)
    with pytest.raises(ValueError, match="two classes"):
        inject_label_noise(ds, 0.5, 0)
    with pytest.raises(ValueError):
        inject_label_noise(small(20), 1.0, 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(8, 120), st.sampled_from([2, 3, 4]), st.floats(0.0, 0.9), st.integers(0, 1000))
def test_label_noise_changes_exact_count(n, classes, frac, seed):
    labels = np.arange(n) % classes
    ds = LabeledDataset(np.zeros((n, 1, 1, 1), np.float32), labels.astype(np.int64), classes)
    out = inject_label_noise(ds, frac, seed)
    assert int((out.labels != labels).sum()) == int(np.floor(frac * n))


def test_subsample_then_noise_reproducible():
    ds = small(80)
    a = inject_label_noise(subsample(ds, 0.5, 1), 0.15, 2)
    b = inject_label_noise(subsample(ds, 0.5, 1), 0.15, 2)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tolist() == b.labels.tolist()


def test_dataset_cache_round_trip(tmp_path):
    ds = small(20)
    save_dataset(ds, tmp_path / "d.bin")
    back = load_dataset(tmp_path / "d.bin")
    assert back.images.tobytes() == ds.images.tobytes()
    assert back.labels.tolist() == ds.labels.tolist() and back.provenance == ds.provenance
    assert back.mean.tobytes() == ds.mean.tobytes()
