import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from spineseg.data import (BODY, CANAL, DISC, PALETTE, AugmentSpec, PhantomSpec, augment, colorize,
                           export_slices, generate_phantom, read_volume, rotate90, to_gray,
                           write_volume)
from spineseg.errors import ConfigError, FormatError, GeometryError, TruncationError


def test_empty_phantom():
    vol, lab = generate_phantom(PhantomSpec(dims=(8, 8, 8), n_vertebrae=0), seed=3)
    assert vol.shape == lab.shape == (8, 8, 8)
    assert not lab.any()


def test_phantom_deterministic():
    spec = PhantomSpec(dims=(16, 16, 16))
    a = generate_phantom(spec, 5)
    b = generate_phantom(spec, 5)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    c = generate_phantom(spec, 6)
    assert c[0].tobytes() != a[0].tobytes()


@pytest.mark.parametrize("seed", range(4))
def test_phantom_class_counts(seed):
    _, lab = generate_phantom(PhantomSpec(dims=(32, 32, 32), n_vertebrae=3), seed)
    counts = np.bincount(lab.ravel(), minlength=4)
    assert counts[BODY] > 0 and counts[DISC] > 0 and counts[CANAL] > 0
    assert set(np.unique(lab)) <= {0, 1, 2, 3}
    comp, n = ndimage.label(lab == BODY)
    assert n == 3
    sizes = np.bincount(comp.ravel())[1:]
    for size in sizes:
        assert abs(3 * size - counts[BODY]) <= 0.2 * counts[BODY]


def test_phantom_too_small():
    with pytest.raises(GeometryError):
        generate_phantom(PhantomSpec(dims=(6, 16, 16), n_vertebrae=1), 0)
    with pytest.raises(GeometryError):
        generate_phantom(PhantomSpec(dims=(16, 16, 8), n_vertebrae=3), 0)
    with pytest.raises(GeometryError):
        PhantomSpec(dims=(0, 4, 4))


def test_bodies_brighter_than_discs():
    vol, lab = generate_phantom(PhantomSpec(dims=(24, 24, 24)), 1)
    assert vol[lab == BODY].mean() > vol[lab == DISC].mean() > vol[lab == CANAL].mean()


# -- augmentation --------------------------------------------------------------

def test_augment_identity(rng):
    vol = rng.normal(size=(6, 6, 5))
    lab = rng.integers(0, 4, size=(6, 6, 5)).astype(np.uint8)
    v, l = augment(vol, lab, AugmentSpec())
    assert v.tobytes() == vol.tobytes() and l.tobytes() == lab.tobytes()


@pytest.mark.parametrize("axes", [(0, 1), (0, 2), (1, 2)])
def test_rotation_group(rng, axes):
    x = rng.normal(size=(5, 5, 5))
    assert np.array_equal(rotate90(rotate90(x, 1, axes), 1, axes), rotate90(x, 2, axes))
    assert np.array_equal(rotate90(x, 4, axes), x)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**6), st.floats(0, 360))
def test_rotation_keeps_label_histogram(seed, deg):
    r = np.random.default_rng(seed)
    lab = r.integers(0, 4, size=(5, 5, 5)).astype(np.uint8)
    vol = r.normal(size=lab.shape)
    v, l = augment(vol, lab, AugmentSpec(rotate_max_deg=deg, seed=seed))
    assert np.array_equal(np.bincount(l.ravel(), minlength=4), np.bincount(lab.ravel(), minlength=4))
    # labels and intensities move together
    assert sorted(v.ravel().tolist()) == sorted(vol.ravel().tolist())


def test_crop_pads_with_background(rng):
    lab = np.ones((8, 8, 8), dtype=np.uint8)
    vol = np.ones((8, 8, 8))
    v, l = augment(vol, lab, AugmentSpec(crop_fraction=0.5, seed=3))
    assert l.shape == lab.shape and int(l.sum()) == 64
    assert float(v.sum()) == 64.0
    with pytest.raises(GeometryError):
        augment(vol, lab, AugmentSpec(crop_fraction=0.01))
    with pytest.raises(ConfigError):
        AugmentSpec(crop_fraction=0.0)


def test_gamma_and_denoise_leave_labels(rng):
    lab = rng.integers(0, 4, size=(6, 6, 6)).astype(np.uint8)
    vol = rng.uniform(size=lab.shape)
    v, l = augment(vol, lab, AugmentSpec(contrast_gamma_range=(0.5, 2.0), denoise=True, seed=1))
    assert np.array_equal(l, lab)
    assert not np.array_equal(v, vol)
    assert v.min() >= vol.min() - 1e-12 and v.max() <= vol.max() + 1e-12


# -- SSV1 ---------------------------------------------------------------------

def test_volume_round_trip(tmp_path, rng):
    vol = rng.normal(size=(3, 4, 5))
    lab = rng.integers(0, 4, size=(3, 4, 5)).astype(np.uint8)
    write_volume(tmp_path / "v.ssv", vol)
    write_volume(tmp_path / "l.ssv", lab)
    assert read_volume(tmp_path / "v.ssv").tobytes() == vol.tobytes()
    back = read_volume(tmp_path / "l.ssv")
    assert back.dtype == np.uint8 and np.array_equal(back, lab)


def test_volume_bad_magic(tmp_path):
    p = tmp_path / "bad.ssv"
    write_volume(p, np.zeros((2, 2, 2)))
    blob = bytearray(p.read_bytes())
    blob[:4] = b"NOPE"
    p.write_bytes(bytes(blob))
    with pytest.raises(FormatError) as err:
        read_volume(p)
    assert err.value.offset == 0


def test_volume_truncated(tmp_path):
    p = tmp_path / "short.ssv"
    write_volume(p, np.zeros((2, 2, 2)))
    blob = p.read_bytes()
    p.write_bytes(blob[:-8])
    with pytest.raises(TruncationError) as err:
        read_volume(p)
    assert err.value.offset == len(blob) - 8
    p.write_bytes(blob + b"\0" * 8)
    with pytest.raises(TruncationError):
        read_volume(p)


# -- slice export --------------------------------------------------------------

def test_palette_background_black():
    assert tuple(PALETTE[0]) == (0, 0, 0)
    assert len({tuple(c) for c in PALETTE[:4]}) == 4
    assert colorize(np.array([[0, 2]])).shape == (1, 2, 3)


def _read_pnm(path):
    blob = open(path, "rb").read()
    magic, dims, maxval, data = blob.split(b"\n", 3)
    w, h = map(int, dims.split())
    chans = 3 if magic == b"P6" else 1
    return magic, np.frombuffer(data, dtype=np.uint8).reshape(h, w, chans).squeeze()


def test_export_identical_truth_pred(tmp_path, rng):
    vol = rng.normal(size=(6, 7, 8))
    lab = rng.integers(0, 4, size=vol.shape)
    paths = export_slices(vol, lab, lab.copy(), axis=2, out_dir=str(tmp_path))
    assert len(paths) == 3
    truth = [p for p in paths if p.endswith("_truth.ppm")][0]
    pred = [p for p in paths if p.endswith("_pred.ppm")][0]
    assert open(truth, "rb").read() == open(pred, "rb").read()
    magic, img = _read_pnm(truth)
    assert magic == b"P6" and img.shape == (6, 7, 3)
    assert np.array_equal(img, PALETTE[lab[:, :, 4]])


def test_export_gray_ramp(tmp_path):
    i = np.arange(10, dtype=np.float64)
    vol = np.broadcast_to(i[:, None, None], (10, 4, 3)).copy()
    path = export_slices(vol, None, None, axis=2, out_dir=str(tmp_path), indices=[1])[0]
    magic, img = _read_pnm(path)
    assert magic == b"P5" and img.shape == (10, 4)
    col = img[:, 0].astype(int)
    assert np.all(np.diff(col) > 0)
    assert col[0] == 0 and col[-1] == 255
    assert np.array_equal(col, np.round(i / 9 * 255).astype(int))


def test_export_bad_axis(tmp_path):
    with pytest.raises(ValueError):
        export_slices(np.zeros((2, 2, 2)), None, None, axis=3, out_dir=str(tmp_path))


def test_to_gray_constant():
    assert not to_gray(np.full((2, 2), 3.0)).any()
