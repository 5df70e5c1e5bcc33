import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cinema import dataio
from cinema.dataio import GridSpec


def test_constant_image_resamples_to_constant():
    out = dataio.resample(np.full((8, 6, 3), 2.5, np.float32), (1.0, 1.0, 2.0), (2.0, 0.5, 1.0))
    assert out.shape == (4, 12, 6)
    np.testing.assert_allclose(out, 2.5)


def test_ramp_resample_matches_linear_interpolation():
    ramp = np.array([0.0, 1.0, 2.0, 3.0])
    out = dataio.resample(ramp, (2.0,), (1.0,))
    centres_in = (np.arange(4) + 0.5) * 2.0
    centres_out = (np.arange(8) + 0.5) * 1.0
    np.testing.assert_allclose(out, np.interp(centres_out, centres_in, ramp), atol=1e-12)
    np.testing.assert_allclose(out, [0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0])


def test_resample_nearest_keeps_labels():
    labels = np.random.default_rng(0).integers(0, 4, (10, 10)).astype(np.uint8)
    out = dataio.resample(labels, (1.0, 1.0), (0.7, 1.3), nearest=True)
    assert out.dtype == np.uint8 and set(np.unique(out)) <= set(np.unique(labels))


def test_resample_carries_trailing_axes():
    x = np.random.default_rng(0).random((6, 6, 5)).astype(np.float32)
    out = dataio.resample(x, (2.0, 2.0), (1.0, 1.0))
    assert out.shape == (12, 12, 5)
    for t in range(5):
        np.testing.assert_allclose(out[..., t], dataio.resample(x[..., t], (2.0, 2.0), (1.0, 1.0)))


def test_resample_round_trip_error_shrinks_with_finer_spacing():
    def smooth(n, sp):
        c = (np.arange(n) + 0.5) * sp
        return np.sin(c / 9.0)[:, None] * np.cos(c / 7.0)[None, :]

    errs = []
    for sp in (2.0, 1.0, 0.5):
        n = int(64 / sp)
        x = smooth(n, sp)
        back = dataio.resample(dataio.resample(x, (sp, sp), (sp * 1.5, sp * 1.5)), (sp * 1.5, sp * 1.5), (sp, sp))
        m = max(4, n // 8)
        errs.append(np.abs(back - x)[m:-m, m:-m].max())
    assert errs[0] > errs[1] > errs[2]


def test_resample_errors():
    with pytest.raises(ValueError):
        dataio.resample(np.zeros((4, 4)), (1.0, 0.0), (1.0, 1.0))
    with pytest.raises(ValueError):
        dataio.resample(np.zeros((1, 4)), (1.0, 1.0), (0.5, 1.0))


def test_crop_or_pad_examples():
    x = np.arange(20, dtype=float).reshape(4, 5) + 1
    assert np.array_equal(dataio.crop_or_pad(x, (4, 5)), x)
    padded = dataio.crop_or_pad(x, (6, 5))
    assert np.all(padded[0] == 0) and np.all(padded[-1] == 0)
    assert np.array_equal(padded[1:5], x)
    cropped = dataio.crop_or_pad(x, GridSpec((1.0, 1.0), (4, 4)))
    assert np.array_equal(cropped, x[:, :4])
    odd = dataio.crop_or_pad(x, (4, 6))
    assert np.array_equal(odd[:, :5], x) and np.all(odd[:, 5] == 0)


def test_crop_with_center():
    x = np.arange(100).reshape(10, 10)
    out = dataio.crop_or_pad(x, (3, 3), center=(2, 7))
    assert np.array_equal(out, x[1:4, 6:9])
    assert dataio.window_start((10, 10), (3, 3), (2, 7)) == [1, 6]


@settings(max_examples=60, deadline=None)
@given(
    x=hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=3, min_side=1, max_side=9), elements=st.floats(-5, 5, width=32)),
    grow=st.lists(st.integers(0, 5), min_size=3, max_size=3),
)
def test_pad_then_crop_recovers(x, grow):
    bigger = tuple(n + g for n, g in zip(x.shape, grow))
    assert np.array_equal(dataio.crop_or_pad(dataio.crop_or_pad(x, bigger), x.shape), x)


def test_normalize_examples():
    assert np.all(dataio.normalize_intensity(np.full((5, 5), 3.0)) == 0)
    vals = np.arange(101, dtype=float)
    lo, hi = np.sort(vals)[[1, 99]]  # percentile oracle: 101 samples, p1 and p99 land on ranks 1 and 99
    out = dataio.normalize_intensity(vals)
    assert (lo, hi) == (1.0, 99.0)
    assert out[0] == pytest.approx(0.0) and out[100] == pytest.approx(1.0)
    assert out[50] == pytest.approx(0.5)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, st.integers(2, 50), elements=st.floats(-1e3, 1e3)))
def test_normalize_range(x):
    out = dataio.normalize_intensity(x)
    assert out.min() >= 0 and out.max() <= 1


dtypes = st.sampled_from([np.float32, np.uint8, np.int64, np.float64, np.int16])


@settings(max_examples=50, deadline=None)
@given(
    st.dictionaries(
        st.text("abcxyz/_", min_size=1, max_size=6),
        dtypes.flatmap(lambda dt: hnp.arrays(dt, hnp.array_shapes(min_dims=0, max_dims=3, max_side=5))),
        max_size=4,
    )
)
def test_container_round_trip(arrays):
    back = dataio.decode_container(dataio.encode_container(arrays, meta={"k": 1}))
    assert back.meta == {"k": 1}
    assert set(back) == set(arrays)
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_empty_container_and_file_io(tmp_path):
    path = tmp_path / "empty.cmrc"
    dataio.write_container({}, path)
    assert dict(dataio.read_container(path)) == {}
    assert list(tmp_path.iterdir()) == [path]


def _payload_start(data: bytes) -> int:
    _, _, hlen = struct.unpack_from("<4sIQ", data)
    return 16 + hlen


def test_container_checksum_detects_corruption():
    arr = np.arange(32, dtype=np.float32)
    data = bytearray(dataio.encode_container({"a": arr}))
    start = _payload_start(bytes(data))
    header = dataio.decode_container(bytes(data))
    assert header["a"].tobytes() == arr.tobytes()
    data[start + 5] ^= 0xFF
    with pytest.raises(dataio.ChecksumError):
        dataio.decode_container(bytes(data))
    # structurally still readable without verification
    out = dataio.decode_container(bytes(data), verify=False)
    assert zlib.crc32(out["a"].tobytes()) != zlib.crc32(arr.tobytes())


def test_container_structural_errors():
    good = dataio.encode_container({"a": np.zeros(8, np.int64), "b": np.ones(3, np.uint8)})
    with pytest.raises(dataio.BadMagicError):
        dataio.decode_container(b"XXXX" + good[4:])
    with pytest.raises(dataio.VersionMismatchError):
        dataio.decode_container(good[:4] + struct.pack("<I", 2) + good[8:])
    with pytest.raises(dataio.TruncatedPayloadError):
        dataio.decode_container(good[:-2])
    # rewrite header so that b starts inside a
    import json

    start = _payload_start(good)
    header = json.loads(good[16:start])
    header["arrays"][1]["offset"] = 4
    hb = json.dumps(header).encode()
    bad = struct.pack("<4sIQ", b"CMRC", 1, len(hb)) + hb + good[start:]
    with pytest.raises(dataio.OffsetOverlapError):
        dataio.decode_container(bad)
    for cls in (dataio.BadMagicError, dataio.VersionMismatchError, dataio.TruncatedPayloadError, dataio.OffsetOverlapError):
        assert issubclass(cls, dataio.ContainerError)


def test_duplicate_names_rejected():
    with pytest.raises(dataio.ContainerError, match="duplicate"):
        dataio.encode_container([("a", np.zeros(1)), ("a", np.ones(1))])


def test_nifti_round_trip(tmp_path):
    x = np.random.default_rng(0).random((5, 4, 3)).astype(np.float32)
    dataio.write_nifti(tmp_path / "x.nii", x, (1.5, 1.5, 8.0))
    y, sp = dataio.read_nifti(tmp_path / "x.nii")
    assert np.array_equal(x, y) and sp == (1.5, 1.5, 8.0)
    (tmp_path / "bad.nii").write_bytes(b"\0" * 100)
    with pytest.raises(dataio.NiftiError):
        dataio.read_nifti(tmp_path / "bad.nii")


def test_study_round_trip_and_preprocess(tmp_path, desk_study):
    dataio.write_study(desk_study, tmp_path / "s.cmrc")
    back = dataio.read_study(tmp_path / "s.cmrc")
    for v in desk_study.images:
        assert np.array_equal(back.images[v], desk_study.images[v])
    assert back.gt_scalars == desk_study.gt_scalars
    grid_sax, grid_lax = GridSpec((2.0, 2.0, 10.0), (64, 64, 4)), GridSpec((2.0, 2.0), (64, 64))
    pre = dataio.preprocess_study(back, grid_sax, grid_lax)
    assert pre.sax.shape[:3] == (64, 64, 4) and pre.lax_4c.shape[:2] == (64, 64)
    assert pre.sax.min() >= 0 and pre.sax.max() <= 1
    # the LV is kept in the SAX window at end-diastole
    assert (pre.gt_masks["sax"][..., 0] == 3).sum() > 0.9 * (desk_study.gt_masks["sax"][..., 0] == 3).sum() * (
        np.prod(desk_study.spacing_sax) / np.prod(grid_sax.spacing)
    )
    # landmarks follow the crop
    lm = pre.gt_landmarks["lax_4c"][0]
    px = np.floor(lm / np.asarray(grid_lax.spacing)).astype(int)
    assert np.all(px >= 0) and np.all(px < 64)
