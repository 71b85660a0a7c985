import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from diffbridge import guidance
from diffbridge.codec import Waveform
from diffbridge.guidance import AlignmentError, AlignmentMap


def test_single_full_segment_is_all_ones():
    a = AlignmentMap([(0.0, 1.0, 5)], 1.0)
    np.testing.assert_array_equal(guidance.rasterize(a, 10, 10.0), np.ones(10))


def test_empty_alignment_is_all_zero():
    assert not guidance.rasterize(AlignmentMap([], 1.0), 10, 10.0).any()


def test_two_segments_hand_rasterized():
    # frame centres at 0.05, 0.15, ..., 0.95 s; ids scaled by max id 4
    a = AlignmentMap([(0.1, 0.38, 2), (0.5, 0.8, 4)], 1.0)
    want = [0, 0.5, 0.5, 0.5, 0, 1, 1, 1, 0, 0]
    np.testing.assert_array_equal(guidance.rasterize(a, 10, 10.0), want)


def test_constant_inputs_give_zero_track():
    assert not guidance.build_guidance(np.full(8, 0.3), np.full(8, -2.0)).any()


def test_build_guidance_scalar_oracle():
    raster = [0, 1, 1, 0, 0.5, 0.5, 0, 0]
    prior = [-3.0, -1.0, -0.5, -2.0, -1.5, -1.2, -4.0, -3.5]

    def z(v):
        m = sum(v) / len(v)
        s = math.sqrt(sum((x - m) ** 2 for x in v) / len(v))
        return [(x - m) / s for x in v]

    want = [math.tanh(a + b) for a, b in zip(z(raster), z(prior))]
    np.testing.assert_allclose(guidance.build_guidance(raster, prior), want, rtol=1e-12)


@given(
    hnp.arrays(np.float64, 16, elements=st.floats(-1e3, 1e3)),
    hnp.arrays(np.float64, 16, elements=st.floats(-1e3, 1e3)),
)
def test_guidance_is_bounded(raster, prior):
    g = guidance.build_guidance(raster, prior)
    assert np.all(np.abs(g) <= 1.0)
    assert np.all(np.isfinite(g))


def test_build_guidance_length_mismatch():
    with pytest.raises(ValueError):
        guidance.build_guidance(np.zeros(3), np.zeros(4))


def test_rms_match_examples():
    y = np.full(4, 2.0)
    assert guidance.rms(guidance.rms_match(y, np.ones(9), 0.1)) == pytest.approx(0.1)
    assert not guidance.rms_match(y, np.ones(9), 0.0).any()
    with pytest.raises(ValueError):
        guidance.rms_match(y, np.ones(9), -0.1)


@given(
    hnp.arrays(np.float64, 12, elements=st.floats(-10, 10)).filter(lambda y: np.sqrt(np.mean(y * y)) > 1e-3),
    hnp.arrays(np.float64, (3, 12), elements=st.floats(-10, 10)),
    st.floats(0, 2),
)
def test_rms_match_property(y, ref, gamma):
    out = guidance.rms_match(y, ref, gamma)
    want = gamma * math.sqrt(sum(float(v) ** 2 for v in ref.ravel()) / ref.size)
    assert abs(math.sqrt(sum(float(v) ** 2 for v in out) / len(out)) - want) <= 1e-9 * max(1.0, want)


def test_acoustic_prior_frames():
    x = np.concatenate([np.full(4, 0.5), np.zeros(4), np.full(2, 1.0)])
    p = guidance.acoustic_prior(Waveform(100, x), 4)
    np.testing.assert_allclose(p, np.log([0.5 + 1e-5, 1e-5, math.sqrt(0.5) + 1e-5]))


def test_missing_alignment_gives_absent_track():
    wf = Waveform(16000, np.ones(640))
    t = guidance.guidance_from_alignment(None, wf, 64, 10)
    assert not t.present and not t.values.any()
    t = guidance.guidance_from_alignment(AlignmentMap([], 0.0), wf, 64, 10)
    assert not t.present


def test_guidance_from_alignment_present(rng):
    wf = Waveform(16000, rng.uniform(-1, 1, 6400))
    a = AlignmentMap([(0.05, 0.2, 3), (0.25, 0.4, 1)])
    t = guidance.guidance_from_alignment(a, wf, 64, 100)
    assert t.present and t.values.shape == (100,)


@pytest.mark.parametrize(
    "segments",
    [[(0.2, 0.3, 1), (0.1, 0.15, 2)], [(0.1, 0.3, 1), (0.2, 0.4, 2)], [(0.3, 0.3, 1)], [(-0.1, 0.2, 1)], [(0.1, 0.2, -1)]],
)
def test_invalid_alignments(segments):
    with pytest.raises(AlignmentError):
        AlignmentMap(segments)


def test_alignment_file_round_trip(tmp_path):
    a = AlignmentMap([(0.0, 0.1, 1), (0.125, 0.3333333333333333, 7), (0.4, 0.5, 2)])
    guidance.write_alignment_file(tmp_path / "a.txt", a)
    b = guidance.load_alignment_file(tmp_path / "a.txt")
    assert b.segments == a.segments


def test_empty_alignment_file(tmp_path):
    (tmp_path / "a.txt").write_text("")
    a = guidance.load_alignment_file(tmp_path / "a.txt")
    assert a.segments == []


def test_out_of_order_file(tmp_path):
    (tmp_path / "a.txt").write_text("0.2\t0.3\t1\n0.0\t0.1\t2\n")
    with pytest.raises(AlignmentError):
        guidance.load_alignment_file(tmp_path / "a.txt")
    (tmp_path / "b.txt").write_text("0.2 0.3 1\n")
    with pytest.raises(AlignmentError):
        guidance.load_alignment_file(tmp_path / "b.txt")
