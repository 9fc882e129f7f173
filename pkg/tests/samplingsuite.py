"""Exhaustive sampling checks shared by the unit tests and the acceptance run."""
import numpy as np

from echocotr.sampling import (Mode, SampleSpec, VideoClip, sample_clip, sample_uniform)

T_RANGE = range(1, 301)
NUM_FRAMES = (2, 32, 36, 40)
FREQUENCIES = (1, 2, 4, 6)


def numbered_video(T: int) -> VideoClip:
    """1x1 frames holding 1..T, so a sampled value names its source frame (0 = padding)."""
    return VideoClip(np.arange(1, T + 1, dtype=np.float64).reshape(T, 1, 1), f"v{T}")


def check_uniform_grid(seeds=(0, 1, 2)) -> int:
    """Assert the uniform-mode contract over the whole grid; returns clips checked."""
    checked = 0
    for N in NUM_FRAMES:
        for f in FREQUENCIES:
            L = (N - 1) * f + 1
            for T in T_RANGE:
                video = numbered_video(T)
                t_pad = max(T, L)
                starts = [None] * len(seeds) + [0, t_pad - L]
                for k, start in enumerate(starts):
                    spec = SampleSpec(N, f, Mode.UNIFORM, start)
                    rng = np.random.default_rng(seeds[k]) if start is None else None
                    clip, s = sample_uniform(video, spec, rng)
                    idx = clip.indices
                    assert idx.shape == (N,)
                    assert 0 <= s <= t_pad - L
                    assert idx[0] == s and 0 <= idx.min() and idx.max() < t_pad
                    assert (np.diff(idx) == f).all()
                    # padding iff the video is short, and exactly to L
                    assert (clip.padded_from is not None) == (T < L)
                    if T < L:
                        assert clip.padded_from == T and t_pad == L
                    expected = np.where(idx < T, idx + 1, 0.0)
                    assert (clip.frames.reshape(-1) == expected).all()
                    checked += 1
    return checked


def mirrored_oracle(es: int, ed: int, target_len: int) -> np.ndarray:
    """Triangle-wave walk over the annotated cycle."""
    lo, hi = sorted((es, ed))
    span = hi - lo
    k = np.arange(target_len) % (2 * span)
    return lo + np.where(k <= span, k, 2 * span - k)


def check_annotated_modes(trials: int = 400, seed: int = 0) -> int:
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        T = int(rng.integers(2, 120))
        es, ed = (int(v) for v in rng.choice(T, size=2, replace=False))
        video = VideoClip(rng.normal(size=(T, 3, 2)), "s")
        clip = sample_clip(video, SampleSpec(mode=Mode.ES_ED), None, es, ed)
        lo, hi = min(es, ed), max(es, ed)
        assert clip.frames.shape[0] == 2
        assert np.array_equal(clip.frames, video.frames[[lo, hi]])
        target = int(rng.integers(hi - lo + 1, 200))
        clip = sample_clip(video, SampleSpec(target, 1, Mode.MIRRORED), None, es, ed)
        oracle = mirrored_oracle(es, ed, target)
        assert np.array_equal(clip.indices, oracle)
        assert np.array_equal(clip.frames, video.frames[oracle])
    return trials
