import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from diffbridge import codec
from diffbridge.codec import CodecSpec, LatentFormatError, Waveform


def hand_dct4():
    """Orthonormal DCT-II for W = 4 written out from its definition."""
    W = 4
    m = np.zeros((W, W))
    for k in range(W):
        a = math.sqrt(1 / W) if k == 0 else math.sqrt(2 / W)
        for n in range(W):
            m[k, n] = a * math.cos(math.pi * (n + 0.5) * k / W)
    return m


def test_basis_matches_definition():
    np.testing.assert_allclose(codec.dct_basis(4), hand_dct4(), atol=1e-15)


def test_single_frame_matches_hand_product():
    spec = CodecSpec(frame_size=4, kept_coefficients=2)
    x = np.array([0.5, -0.25, 1.0, 0.125])
    lat = codec.encode(spec, Waveform(16000, x))
    B = hand_dct4()
    for k in range(2):
        assert lat[k, 0] == pytest.approx(sum(B[k, n] * x[n] for n in range(4)), abs=1e-15)
    back = codec.decode(spec, lat).samples
    want = [sum(B[k, n] * lat[k, 0] for k in range(2)) for n in range(4)]
    np.testing.assert_allclose(back, want, atol=1e-15)


def test_zero_waveform_gives_zero_latent():
    spec = CodecSpec()
    assert not codec.encode(spec, Waveform(16000, np.zeros(300))).any()


def test_encode_shape_pads_tail():
    spec = CodecSpec(frame_size=64, kept_coefficients=32)
    assert codec.encode(spec, Waveform(16000, np.ones(130))).shape == (32, 3)


@given(st.integers(1, 5), hnp.arrays(np.float64, st.integers(1, 200), elements=st.floats(-1, 1)))
def test_full_rank_round_trip(exp, x):
    W = 2**exp
    spec = CodecSpec(frame_size=W, kept_coefficients=W)
    out = codec.decode(spec, codec.encode(spec, Waveform(8000, x))).samples
    padded = np.zeros(spec.num_frames(len(x)) * W)
    padded[: len(x)] = x
    assert np.max(np.abs(out - padded)) <= 1e-6


def test_truncated_codec_is_a_projection(rng):
    spec = CodecSpec()
    x = rng.uniform(-1, 1, 640)
    once = codec.decode(spec, codec.encode(spec, Waveform(16000, x)))
    twice = codec.decode(spec, codec.encode(spec, once))
    np.testing.assert_allclose(twice.samples, once.samples, atol=1e-12)


def test_codec_is_linear(rng):
    spec = CodecSpec()
    a, b = rng.uniform(-1, 1, (2, 256))
    lhs = codec.encode(spec, Waveform(16000, a + 2 * b))
    rhs = codec.encode(spec, Waveform(16000, a)) + 2 * codec.encode(spec, Waveform(16000, b))
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@pytest.mark.parametrize("kwargs", [{"kept_coefficients": 0}, {"kept_coefficients": 65}, {"frame_size": 0}])
def test_bad_spec(kwargs):
    with pytest.raises(ValueError):
        CodecSpec(**kwargs)


def test_non_orthonormal_basis_rejected():
    with pytest.raises(ValueError):
        CodecSpec(frame_size=2, kept_coefficients=2, basis=np.array([[1.0, 1.0], [0.0, 1.0]]))


def test_waveform_validation():
    with pytest.raises(ValueError):
        Waveform(16000, np.zeros((2, 5)))
    with pytest.raises(ValueError):
        Waveform(16000, np.array([0.0, np.nan]))
    with pytest.raises(ValueError):
        Waveform(0, np.zeros(3))


def test_decode_rejects_wrong_rows():
    with pytest.raises(ValueError):
        codec.decode(CodecSpec(), np.zeros((31, 4)))


def test_latent_file_round_trip(tmp_path, rng):
    lat = rng.standard_normal((32, 11)).astype(np.float32)
    p = tmp_path / "x.vblt"
    codec.write_latent_file(p, lat)
    back = codec.read_latent_file(p)
    assert back.dtype == np.float32
    assert back.tobytes() == lat.tobytes()


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=2, max_dims=2, max_side=20), elements=st.floats(-1e6, 1e6, width=32)))
def test_latent_file_round_trip_property(tmp_path_factory, lat):
    p = tmp_path_factory.mktemp("lat") / "x.vblt"
    codec.write_latent_file(p, lat)
    assert codec.read_latent_file(p).tobytes() == lat.tobytes()


def test_truncated_latent_file(tmp_path, rng):
    p = tmp_path / "x.vblt"
    codec.write_latent_file(p, rng.standard_normal((4, 4)))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(LatentFormatError):
        codec.read_latent_file(p)
    p.write_bytes(b"VB")
    with pytest.raises(LatentFormatError):
        codec.read_latent_file(p)


def test_bad_magic(tmp_path, rng):
    p = tmp_path / "x.vblt"
    codec.write_latent_file(p, rng.standard_normal((2, 2)))
    p.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(LatentFormatError):
        codec.read_latent_file(p)


def test_nan_payload_rejected(tmp_path):
    p = tmp_path / "x.vblt"
    codec.write_latent_file(p, np.zeros((2, 2)))
    raw = bytearray(p.read_bytes())
    raw[-4:] = np.array([np.nan], dtype="<f4").tobytes()
    p.write_bytes(bytes(raw))
    with pytest.raises(LatentFormatError):
        codec.read_latent_file(p)
    with pytest.raises(LatentFormatError):
        codec.write_latent_file(p, np.array([[np.inf]]))


@pytest.mark.parametrize("subtype,tol", [("float", 1e-7), ("pcm16", 0.5 / 32767 + 1e-12)])
def test_wav_round_trip(tmp_path, rng, subtype, tol):
    wf = Waveform(16000, rng.uniform(-0.9, 0.9, 1000))
    codec.write_wav(tmp_path / "a.wav", wf, subtype)
    back = codec.read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 16000
    assert np.max(np.abs(back.samples - wf.samples)) <= tol
