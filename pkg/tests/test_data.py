import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caplab.data import (CORRUPTION_TABLE, CORRUPTIONS, CorruptionSpec, PgmError, PhantomSpec, corrupt,
                         encode_pgm, generate_phantoms, parse_pgm, pgm_read, pgm_write, read_dataset,
                         write_dataset)


@pytest.fixture(scope="module")
def phantoms():
    return generate_phantoms(PhantomSpec(num_samples=500, seed=1))


def lung_mean_oracle(data):
    f = np.array([im[m].mean() for im, m in zip(data.images, data.lung_masks)])
    return max(((f > th) == data.labels).mean() for th in np.unique(f))


def test_lung_mean_threshold_is_informative_but_imperfect(phantoms):
    acc = lung_mean_oracle(phantoms)
    assert 0.7 <= acc < 1.0


def test_balance_and_containment(phantoms):
    assert abs(phantoms.labels.sum() - 250) <= 1
    assert not np.any(phantoms.lesion_masks & ~phantoms.lung_masks)
    pos = phantoms.labels == 1
    assert phantoms.lesion_masks[pos].any(axis=(1, 2)).all()
    assert not phantoms.lesion_masks[~pos].any()
    assert phantoms.images.dtype == np.float32
    assert phantoms.images.min() >= 0 and phantoms.images.max() <= 1


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 40), st.floats(0, 1), st.integers(0, 10**6))
def test_balance_property(n, frac, seed):
    d = generate_phantoms(PhantomSpec(image_size=16, num_samples=n, positive_fraction=frac, seed=seed))
    assert abs(d.labels.sum() - frac * n) <= 1


def test_no_positives():
    d = generate_phantoms(PhantomSpec(num_samples=20, positive_fraction=0.0))
    assert d.labels.sum() == 0 and not d.lesion_masks.any()


def test_same_seed_same_data():
    a = generate_phantoms(PhantomSpec(num_samples=10, seed=3))
    b = generate_phantoms(PhantomSpec(num_samples=10, seed=3))
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = generate_phantoms(PhantomSpec(num_samples=10, seed=4))
    assert not np.array_equal(a.images, c.images)


@pytest.mark.parametrize("kw", [dict(image_size=8), dict(positive_fraction=1.5), dict(num_samples=-1),
                                dict(lesion_count_range=(0, 2))])
def test_spec_validation(kw):
    with pytest.raises(ValueError):
        PhantomSpec(**kw)


@pytest.mark.parametrize("kind", CORRUPTIONS)
def test_corruption_range_and_determinism(kind, phantoms):
    x = phantoms.images[:8]
    for s in range(1, 6):
        a = corrupt(x, CorruptionSpec(kind, s), seed=2)
        assert a.dtype == x.dtype and a.shape == x.shape
        assert a.min() >= 0 and a.max() <= 1
        np.testing.assert_array_equal(a, corrupt(x, CorruptionSpec(kind, s), seed=2))


def test_brightness_is_table_lookup():
    x = np.full((4, 4), 0.5)
    for s in range(1, 6):
        np.testing.assert_allclose(corrupt(x, CorruptionSpec("brightness", s)), 0.5 + CORRUPTION_TABLE["brightness"][s - 1])
    np.testing.assert_array_equal(corrupt(np.ones((2, 2)), CorruptionSpec("brightness", 5)), 1.0)


def test_gaussian_noise_variance_grows():
    x = np.full((64, 64), 0.5)
    v1 = corrupt(x, CorruptionSpec("gaussian_noise", 1)).var()
    v5 = corrupt(x, CorruptionSpec("gaussian_noise", 5)).var()
    assert v5 > v1


@pytest.mark.parametrize("kind", CORRUPTIONS)
def test_distortion_grows_with_severity(kind, phantoms):
    x = phantoms.images[:50].astype(np.float64)
    d = [np.abs(corrupt(x, CorruptionSpec(kind, s)) - x).mean() for s in range(1, 6)]
    assert all(b >= a for a, b in zip(d, d[1:]))


@pytest.mark.parametrize("kw", [dict(kind="fog", severity=1), dict(kind="contrast", severity=0),
                                dict(kind="contrast", severity=6)])
def test_corruption_spec_validation(kw):
    with pytest.raises(ValueError):
        CorruptionSpec(**kw)


def test_pgm_round_trip(tmp_path, rng):
    img = rng.random((7, 5))
    p = tmp_path / "a.pgm"
    pgm_write(p, img)
    back = pgm_read(p)
    assert back.shape == (7, 5) and np.abs(back - img).max() <= 1 / 255 / 2 + 1e-12
    pgm_write(p, back)
    np.testing.assert_array_equal(pgm_read(p), back)


def test_pgm_header_format():
    raw = encode_pgm(np.array([[0.0, 1.0]]))
    assert raw == b"P5\n2 1\n255\n\x00\xff"


def test_pgm_comments_are_tolerated():
    raw = b"P5\n# made by hand\n2 # width\n1\n255\n\x00\x80"
    np.testing.assert_allclose(parse_pgm(raw), [[0.0, 128 / 255]])


def test_pgm_maxval_scaling():
    np.testing.assert_allclose(parse_pgm(b"P5 1 1 15 \x0f"), [[1.0]])


@pytest.mark.parametrize("raw,offset,match", [
    (b"P2\n1 1\n255\n0", 0, "P2"),
    (b"P6\n1 1\n255\n\x00", 0, "magic"),
    (b"P5\n2 2\n255\n\x00", 12, "truncated pixel"),
    (b"P5\n2 x\n255\n\x00", 5, "integer"),
    (b"P5\n2 2\n999\n\x00", 7, "maxval"),
    (b"P5\n2", 4, "truncated header"),
])
def test_pgm_errors_carry_offsets(raw, offset, match):
    with pytest.raises(PgmError, match=match) as err:
        parse_pgm(raw)
    assert err.value.offset == offset


def test_dataset_directory_round_trip(tmp_path):
    d = generate_phantoms(PhantomSpec(num_samples=6, seed=2))
    manifest = write_dataset(tmp_path, d)
    lines = manifest.read_text().splitlines()
    assert lines[0] == "path,label" and lines[1] == f"images/00000.pgm,{d.labels[0]}"
    back, ids = read_dataset(tmp_path)
    assert ids == [f"{i:05d}" for i in range(6)]
    np.testing.assert_array_equal(back.labels, d.labels)
    np.testing.assert_array_equal(back.lesion_masks, d.lesion_masks)
    assert np.abs(back.images - d.images).max() <= 1 / 255
