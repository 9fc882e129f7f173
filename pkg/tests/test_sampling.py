import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from echocotr.errors import ConfigError, DataError
from echocotr.sampling import (Mode, SampleSpec, VideoClip, mirrored_indices, pad_video,
                               required_length, sample_clip, sample_es_ed, sample_mirrored,
                               sample_uniform, uniform_indices)

from samplingsuite import check_annotated_modes, check_uniform_grid, mirrored_oracle


def video(T, H=2, W=2, value=1.0):
    return VideoClip(np.full((T, H, W), value), "vid")


@pytest.mark.parametrize("N,f,L", [(36, 4, 141), (2, 1, 2), (32, 2, 63), (40, 6, 235)])
def test_required_length(N, f, L):
    assert required_length(SampleSpec(N, f)) == L


def test_spec_invariants():
    assert SampleSpec(36, 4, Mode.ES_ED).num_frames == 2
    with pytest.raises(ConfigError):
        SampleSpec(1, 4)
    with pytest.raises(ConfigError):
        SampleSpec(36, 0)
    with pytest.raises(ConfigError):
        SampleSpec(36, 4, start=-1)
    with pytest.raises(ValueError):
        SampleSpec(36, 4, "bogus")
    with pytest.raises(ConfigError):
        required_length(SampleSpec(mode=Mode.MIRRORED))


def test_pad_video():
    v = video(141)
    assert pad_video(v, 141) is v
    p = pad_video(video(20), 141)
    assert p.num_frames == 141 and p.padded_from == 20
    assert (p.frames[20:] == 0).all() and (p.frames[:20] == 1).all()
    with pytest.raises(DataError):
        VideoClip(np.zeros((0, 2, 2)))


def test_uniform_examples():
    spec = SampleSpec(36, 4)
    starts = {uniform_indices(200, spec, np.random.default_rng(s))[1] for s in range(400)}
    assert min(starts) == 0 and max(starts) == 59
    idx, start, _ = uniform_indices(200, spec.fixed(59))
    assert start == 59 and idx[0] == 59 and idx[-1] == 199

    clip, start = sample_uniform(video(20), spec, np.random.default_rng(0))
    assert start == 0
    np.testing.assert_array_equal(clip.indices, np.arange(0, 141, 4))
    assert clip.padded_from == 20
    assert (clip.frames[clip.indices >= 20] == 0).all()
    assert (clip.frames[clip.indices < 20] == 1).all()

    clip, _ = sample_uniform(video(141), spec.fixed(0))
    np.testing.assert_array_equal(clip.indices, np.arange(0, 141, 4))
    assert clip.padded_from is None


def test_uniform_fixed_start_errors():
    with pytest.raises(DataError):
        uniform_indices(141, SampleSpec(36, 4, start=1))
    with pytest.raises(ConfigError):
        uniform_indices(141, SampleSpec(36, 4))  # random start without rng


def test_uniform_reproducible():
    spec = SampleSpec(32, 2)
    a = [uniform_indices(300, spec, np.random.default_rng(9))[1] for _ in range(3)]
    assert len(set(a)) == 1


def test_uniform_exhaustive_grid():
    assert check_uniform_grid() == 4 * 4 * 300 * 5


def test_es_ed_examples():
    v = VideoClip(np.arange(60, dtype=float).reshape(60, 1, 1))
    np.testing.assert_array_equal(sample_es_ed(v, 46, 15).frames.reshape(-1), [15, 46])
    v2 = VideoClip(np.arange(2, dtype=float).reshape(2, 1, 1))
    np.testing.assert_array_equal(sample_es_ed(v2, 0, 1).frames.reshape(-1), [0, 1])
    with pytest.raises(DataError):
        sample_es_ed(v, 46, 46)
    with pytest.raises(DataError):
        sample_es_ed(v, 60, 3)
    with pytest.raises(DataError):
        sample_es_ed(v, -1, 3)


def test_mirrored_examples():
    np.testing.assert_array_equal(mirrored_indices(0, 2, 7), [0, 1, 2, 1, 0, 1, 2])
    np.testing.assert_array_equal(mirrored_indices(4, 3, 5), [3, 4, 3, 4, 3])
    np.testing.assert_array_equal(mirrored_indices(10, 15, 6), np.arange(10, 16))
    with pytest.raises(ConfigError):
        mirrored_indices(0, 9, 5)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 80), st.data())
def test_mirrored_properties(T, data):
    es = data.draw(st.integers(0, T - 1))
    ed = data.draw(st.integers(0, T - 1).filter(lambda v: v != es))
    lo, hi = sorted((es, ed))
    target = data.draw(st.integers(hi - lo + 1, 150))
    frames = np.random.default_rng(T).normal(size=(T, 2, 2))
    clip = sample_mirrored(VideoClip(frames), es, ed, target)
    assert clip.num_frames == target
    np.testing.assert_array_equal(clip.indices, mirrored_oracle(es, ed, target))
    # continuity: consecutive frames are neighbours in the source
    assert (np.abs(np.diff(clip.indices)) == 1).all()
    cycle = frames[lo:hi + 1]
    for f in clip.frames:
        assert any(np.array_equal(f, c) for c in cycle)


def test_annotated_modes_match_oracles():
    assert check_annotated_modes() == 400


def test_sample_clip_dispatch():
    v = video(50)
    assert sample_clip(v, SampleSpec(8, 2), np.random.default_rng(0)).num_frames == 8
    with pytest.raises(DataError):
        sample_clip(v, SampleSpec(mode=Mode.ES_ED))
    assert sample_clip(v, SampleSpec(10, 1, Mode.MIRRORED), None, 5, 1).num_frames == 10
