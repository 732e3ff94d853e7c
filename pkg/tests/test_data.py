import math

import numpy as np
import pytest

from dabdunet import data as D
from dabdunet.dtf import DTFError


def test_single_blob_area_bounds():
    spec = D.DatasetSpec(n_train=50, n_val=0, size=32, blobs=(1, 1), radius=(4.0, 4.0))
    lo, hi = math.pi * 16 * 0.7, math.pi * 16 * 1.3
    for s in D.generate_dataset(spec).train:
        assert lo <= s.mask.sum() <= hi
        assert s.meta["blobs"] == 1


def test_sample_invariants():
    for s in D.generate_dataset(D.DatasetSpec(n_train=20, n_val=5)).train:
        assert s.image.shape == s.mask.shape == (1, 32, 32)
        assert set(np.unique(s.mask)) <= {0.0, 1.0}
        assert np.all(np.isfinite(s.image)) and s.image.min() >= 0 and s.image.max() <= 1


def test_no_signal_without_contrast_or_noise():
    spec = D.DatasetSpec(n_train=5, n_val=0, contrast=0.0, noise=0.0)
    for i, s in enumerate(D.generate_dataset(spec).train):
        # the background alone, regenerated without any blobs, is the same image
        bare = D.make_sample(D.DatasetSpec(contrast=0.0, noise=0.0, blobs=(0, 0)), "train", i)
        np.testing.assert_array_equal(s.image, bare.image)
        assert s.mask.sum() > 0


def test_radius_must_fit():
    with pytest.raises(D.SpecError):
        D.generate_dataset(D.DatasetSpec(size=16, radius=(3.0, 8.0)))
    with pytest.raises(D.SpecError):
        D.DatasetSpec.from_dict({"sizes": 3})


def test_determinism_and_disjoint_splits():
    spec = D.DatasetSpec(n_train=10, n_val=10)
    a, b = D.generate_dataset(spec), D.generate_dataset(spec)
    for x, y in zip(a.train + a.val, b.train + b.val):
        assert x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()
    train_seeds = {s.seed for s in a.train}
    assert not train_seeds & {s.seed for s in a.val}
    assert all(x.image.tobytes() != y.image.tobytes() for x, y in zip(a.train, a.val))


def test_files_round_trip_and_regenerate_identically(tmp_path):
    spec = D.DatasetSpec(n_train=3, n_val=2, size=16, radius=(2.0, 4.0))
    ds = D.generate_dataset(spec)
    D.write_dataset(ds, tmp_path / "a", emit_pgm=True)
    D.write_dataset(D.generate_dataset(spec), tmp_path / "b")
    back = D.read_dataset(tmp_path / "a")
    assert back.spec == spec
    for x, y in zip(ds.train + ds.val, back.train + back.val):
        assert x.image.tobytes() == y.image.tobytes() and x.seed == y.seed
    for rel in ("train/0.img.dtf", "val/1.mask.dtf", "dataset.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert (tmp_path / "a/train/0.img.pgm").exists()
    assert not (tmp_path / "b/train/0.img.pgm").exists()


def test_pgm_header_and_body(tmp_path):
    img = np.linspace(0, 1, 12).reshape(3, 4)
    D.write_pgm(tmp_path / "x.pgm", img)
    raw = (tmp_path / "x.pgm").read_bytes()
    header = b"P5\n4 3\n255\n"
    assert raw.startswith(header) and len(raw) == len(header) + 12
    np.testing.assert_allclose(D.read_pgm(tmp_path / "x.pgm"), img, atol=0.5 / 255)


def test_truncated_sample_is_rejected(tmp_path):
    D.write_sample(tmp_path, 0, D.make_sample(D.DatasetSpec(), "train", 0))
    path = tmp_path / "0.mask.dtf"
    path.write_bytes(path.read_bytes()[:100])
    with pytest.raises(DTFError):
        D.read_sample(tmp_path, 0)


def test_overlay_marks_boundary_only():
    mask = np.zeros((7, 7))
    mask[2:5, 2:5] = 1
    b = D.boundary(mask)
    assert b.sum() == 8 and not b[3, 3]
    out = D.overlay(np.zeros((7, 7)), mask)
    assert out.sum() == 8
