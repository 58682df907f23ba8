import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from infarctseg.core import LabelMask, LabelSchema, Spacing, Volume
from infarctseg.errors import ConfigurationError, ContractError, DataError
from infarctseg.preprocess import (
    DatasetFingerprint,
    PatchRecord,
    PreprocessConfig,
    compute_fingerprint,
    load_preprocessed,
    normalize_array,
    pad_value,
    preprocess_case,
    resample_image_slice,
    resample_labels_slice,
    resample_mask_slice,
    resampled_shape,
    restore_from_patch,
    restore_prediction,
    save_preprocessed,
    shape_to_patch,
)


def vol(data, spacing=Spacing(1, 1, 1)):
    return Volume(np.asarray(data, dtype=np.float32), spacing, "v")


def percentile_oracle(values, q):
    s = sorted(values)
    rank = q / 100 * (len(s) - 1)
    lo = int(rank)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (rank - lo)


# fingerprint


def test_constant_fingerprint():
    fp = compute_fingerprint([vol(np.full((2, 3, 3), 7.0))])
    assert (fp.p_low, fp.p_high, fp.mean, fp.std) == (7.0, 7.0, 7.0, 0.0)


def test_percentiles_of_range():
    fp = compute_fingerprint([vol(np.arange(1000.0).reshape(10, 10, 10))])
    assert fp.p_low == pytest.approx(4.995, abs=1e-9)
    assert fp.p_high == pytest.approx(994.005, abs=1e-9)


@given(arrays(np.float32, (2, 4, 5), elements=st.floats(-1000, 1000, width=32)))
def test_fingerprint_matches_oracle(data):
    fp = compute_fingerprint([vol(data)])
    values = [float(v) for v in data.ravel()]
    lo, hi = percentile_oracle(values, 0.5), percentile_oracle(values, 99.5)
    assert fp.p_low == pytest.approx(lo, abs=1e-6)
    assert fp.p_high == pytest.approx(hi, abs=1e-6)
    clipped = [min(max(v, lo), hi) for v in values]
    mean = sum(clipped) / len(clipped)
    assert fp.mean == pytest.approx(mean, abs=1e-6)


def test_duplication_invariance_on_range():
    v = vol(np.arange(1000.0).reshape(10, 10, 10))
    one, two = compute_fingerprint([v]), compute_fingerprint([v, v])
    assert (one.p_low, one.p_high) == pytest.approx((two.p_low, two.p_high), abs=1e-9)
    assert one.mean == pytest.approx(two.mean, rel=1e-12)


def test_duplicated_volume_invariance(rng):
    v = vol(rng.normal(30, 20, (3, 8, 8)))
    one, two = compute_fingerprint([v]), compute_fingerprint([v, v])
    # closest-rank interpolation is not exactly duplication invariant: the
    # doubled percentile stays between the same neighbouring order statistics
    s = np.sort(v.data.ravel().astype(np.float64))
    for q, a, b in ((0.5, one.p_low, two.p_low), (99.5, one.p_high, two.p_high)):
        k = int(q / 100 * (s.size - 1))
        lo, hi = s[max(k - 1, 0)], s[min(k + 2, s.size - 1)]
        assert lo <= a <= hi and lo <= b <= hi


def test_empty_population():
    with pytest.raises(DataError):
        compute_fingerprint([])


def test_fingerprint_validation():
    with pytest.raises(ContractError):
        DatasetFingerprint(10, 0, 0, 1)


# normalisation


def test_normalize_arithmetic():
    fp = DatasetFingerprint(-100, 300, 40, 80)
    assert normalize_array(np.array([120.0]), fp)[0] == pytest.approx((120 - 40) / (80 + 1e-8), abs=1e-6)


def test_constant_at_mean_is_zero():
    fp = DatasetFingerprint(5, 5, 5, 0)
    assert not normalize_array(np.full((3, 3), 5.0), fp).any()


def test_clipping_saturates():
    fp = DatasetFingerprint(-100, 300, 40, 80)
    out = normalize_array(np.array([300.0, 450.0, -100.0, -900.0]), fp)
    assert out[0] == out[1] and out[2] == out[3]
    assert pad_value(fp) == out[2]


@given(arrays(np.float64, 50, elements=st.floats(-500, 500)))
def test_normalization_monotone(values):
    fp = DatasetFingerprint(-200, 200, 10, 30)
    order = np.argsort(values, kind="stable")
    out = normalize_array(values, fp)[order]
    assert np.all(np.diff(out.astype(np.float64)) >= 0)


def test_population_mean_near_zero(rng):
    vols = [vol(rng.normal(40, 25, (3, 16, 16))) for _ in range(4)]
    fp = compute_fingerprint(vols)
    normed = np.concatenate([normalize_array(v.data, fp).ravel() for v in vols]).astype(np.float64)
    assert abs(normed.mean()) < 1e-3


# resampling


def test_resampled_shape():
    assert resampled_shape((512, 512), (0.5, 0.5), (1, 1)) == (256, 256)
    with pytest.raises(ConfigurationError):
        resampled_shape((1, 1), (0.1, 0.1), (1, 1))


def test_identity_resample_is_exact(rng):
    img = rng.normal(size=(17, 19)).astype(np.float32)
    assert np.array_equal(resample_image_slice(img, (1, 1), (1, 1)), img)
    m = (rng.random((17, 19)) > 0.5).astype(np.uint8)
    assert np.array_equal(resample_mask_slice(m, (1, 1), (1, 1)), m)


def test_halving_extent():
    out = resample_image_slice(np.zeros((512, 512), np.float32), (0.5, 0.5), (1.0, 1.0))
    assert out.shape == (256, 256)


@pytest.mark.parametrize("order", [1, 3])
def test_linear_ramp_reproduced(order):
    # f(r, c) = 2r + 3c sampled on an 8x8 grid; upsample 2x
    r, c = np.mgrid[0:8, 0:8]
    img = (2.0 * r + 3.0 * c).astype(np.float32)
    out = resample_image_slice(img, (1.0, 1.0), (0.5, 0.5), order=order)
    j = (np.arange(16) + 0.5) * 0.5 - 0.5
    rr, cc = np.meshgrid(j, j, indexing="ij")
    interior = (rr >= 0) & (rr <= 7) & (cc >= 0) & (cc <= 7)
    assert np.abs(out[interior] - (2 * rr + 3 * cc)[interior]).max() < 1e-5
    # outside the sample hull the edge value is held
    assert out[0, 0] == pytest.approx(img[0, 0], abs=1e-9)


def test_all_ones_mask_stays_ones():
    out = resample_mask_slice(np.ones((13, 11), np.uint8), (0.7, 0.45), (1, 1))
    assert out.all()


def bilinear_oracle(img, out_shape):
    """Pixel-centre bilinear sampling with edge clamping, written as explicit loops."""
    h, w = img.shape
    oh, ow = out_shape
    out = np.zeros(out_shape)
    for i in range(oh):
        y = min(max((i + 0.5) * h / oh - 0.5, 0), h - 1)
        y0 = min(int(y), h - 2)
        for j in range(ow):
            x = min(max((j + 0.5) * w / ow - 0.5, 0), w - 1)
            x0 = min(int(x), w - 2)
            fy, fx = y - y0, x - x0
            out[i, j] = (
                img[y0, x0] * (1 - fy) * (1 - fx)
                + img[y0 + 1, x0] * fy * (1 - fx)
                + img[y0, x0 + 1] * (1 - fy) * fx
                + img[y0 + 1, x0 + 1] * fy * fx
            )
    return out


def test_square_downsample_matches_oracle():
    m = np.zeros((100, 100), np.uint8)
    m[45:55, 45:55] = 1
    out = resample_mask_slice(m, (0.5, 0.5), (1.0, 1.0))
    expected = (bilinear_oracle(m.astype(float), (50, 50)) >= 0.5).astype(np.uint8)
    assert np.array_equal(out, expected)
    rows, cols = np.nonzero(out.any(axis=1))[0], np.nonzero(out.any(axis=0))[0]
    assert abs(len(rows) - 5) <= 2 and abs(len(cols) - 5) <= 2
    # 6x6 bounding box minus the four corners, whose bilinear weight is 0.25
    assert int(out.sum()) == 32


def test_mask_resample_rejects_multilabel():
    with pytest.raises(ContractError):
        resample_mask_slice(np.array([[0, 2]], np.uint8), (1, 1), (0.5, 0.5))


def test_labels_resample_keeps_ids():
    m = np.zeros((20, 20), np.uint8)
    m[2:8, 2:8] = 1
    m[12:18, 12:18] = 3
    out = resample_labels_slice(m, (1, 1), (2, 2))
    assert set(np.unique(out).tolist()) == {0, 1, 3}


# patch shaping


def test_patch_identity():
    img = np.zeros((512, 512))
    out, rec = shape_to_patch(img)
    assert out.shape == (512, 512) and rec.is_identity


def test_patch_pad_500():
    img = np.arange(500 * 500, dtype=float).reshape(500, 500)
    out, rec = shape_to_patch(img, pad_value=-3)
    assert rec.pad_before == (6, 6) and rec.pad_after == (6, 6)
    assert out[0, 0] == -3 and out[6, 6] == img[0, 0]
    assert np.array_equal(restore_from_patch(out, rec), img)


def test_patch_crop_600():
    img = np.zeros((600, 600))
    img[300, 300] = 1
    out, rec = shape_to_patch(img)
    assert rec.crop_start == (44, 44)
    assert out[256, 256] == 1
    back = restore_from_patch(out, rec)
    assert back.shape == (600, 600) and back[300, 300] == 1 and back.sum() == 1


@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 32), st.integers(1, 32))
def test_patch_round_trip_inside_patch(h, w, ph, pw):
    img = np.arange(h * w, dtype=float).reshape(h, w) + 1
    out, rec = shape_to_patch(img, (ph, pw))
    assert out.shape == (ph, pw)
    back = restore_from_patch(out, rec)
    r0, c0 = rec.crop_start
    kept = back[r0 : r0 + min(h, ph), c0 : c0 + min(w, pw)]
    assert np.array_equal(kept, img[r0 : r0 + min(h, ph), c0 : c0 + min(w, pw)])
    assert PatchRecord.from_json(rec.to_json()) == rec


# whole case


def test_preprocess_case_and_restore(tmp_path, phantom_pair):
    volume, mask = phantom_pair
    volume = Volume(volume.data, Spacing(0.8, 0.8, 5.0), "p")
    binary = LabelMask((mask.data > 0).astype(np.uint8), LabelSchema.binary())
    fp = compute_fingerprint([volume])
    cfg = PreprocessConfig(patch_size=(64, 64))
    case = preprocess_case(volume, binary, fp, cfg)
    assert case.image.shape == (3, 64, 64) and case.mask.shape == (3, 64, 64)
    assert case.sidecar["resampled_shape"] == [51, 51]
    save_preprocessed(case, tmp_path)
    back = load_preprocessed(tmp_path, "p")
    assert np.allclose(back.image, case.image, atol=1e-6)
    assert np.array_equal(back.mask, case.mask)
    restored = restore_prediction(back.mask, back.sidecar)
    assert restored.shape == volume.shape
    inter = np.logical_and(restored, binary.data).sum()
    assert 2 * inter / (restored.sum() + binary.data.sum()) > 0.9
    with pytest.raises(DataError):
        load_preprocessed(tmp_path, "missing")
