"""Clip construction: fixed-stride uniform clips, ES/ED pairs and mirrored cycles."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError


class Mode(str, enum.Enum):
    UNIFORM = "uniform"
    ES_ED = "es_ed"
    MIRRORED = "mirrored"


@dataclass(frozen=True)
class SampleSpec:
    """How to cut a clip out of a video.

    ``start`` is ``None`` for a seeded random clip start, or a fixed frame
    index. EsEd mode always yields two frames and ignores ``frequency``.
    """

    num_frames: int = 36
    frequency: int = 4
    mode: Mode = Mode.UNIFORM
    start: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.mode is Mode.ES_ED:
            object.__setattr__(self, "num_frames", 2)
        if self.mode is Mode.UNIFORM and (self.num_frames < 2 or self.frequency < 1):
            raise ConfigError("uniform sampling needs num_frames >= 2 and frequency >= 1")
        if self.num_frames < 1:
            raise ConfigError("num_frames must be positive")
        if self.start is not None and self.start < 0:
            raise ConfigError("fixed clip start must be >= 0")

    def fixed(self, start: int = 0) -> "SampleSpec":
        return replace(self, start=start)

    def random(self) -> "SampleSpec":
        return replace(self, start=None)


@dataclass
class VideoClip:
    """Grayscale frames [T, H, W]; frames at index >= ``padded_from`` are zero padding."""

    frames: np.ndarray
    source_id: str = ""
    padded_from: Optional[int] = None
    indices: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 3 or min(self.frames.shape) < 1:
            raise DataError(f"video must be [T,H,W] with all sizes >= 1, got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


def required_length(spec: SampleSpec) -> int:
    """Minimum source length admitting one clip: (N-1)*f + 1."""
    if spec.mode is not Mode.UNIFORM:
        raise ConfigError("required_length only applies to uniform sampling")
    return (spec.num_frames - 1) * spec.frequency + 1


def pad_video(video: VideoClip, target_len: int) -> VideoClip:
    """Append zero frames up to ``target_len``; longer videos come back unchanged."""
    if target_len < 1:
        raise ConfigError("target_len must be >= 1")
    T = video.num_frames
    if T >= target_len:
        return video
    pad = np.zeros((target_len - T,) + video.frames.shape[1:], dtype=video.frames.dtype)
    return VideoClip(np.concatenate([video.frames, pad]), video.source_id, padded_from=T)


def uniform_indices(num_source_frames: int, spec: SampleSpec,
                    rng: Optional[np.random.Generator] = None) -> tuple[np.ndarray, int, int]:
    """Frame indices of one uniform clip.

    Returns ``(indices, start, padded_length)``. The start is drawn from the
    inclusive range [0, T_padded - L], where L = (N-1)*f + 1, so the last index
    is always in bounds.
    """
    L = required_length(spec)
    T = max(num_source_frames, L)
    hi = T - L
    if spec.start is None:
        if rng is None:
            raise ConfigError("random clip start needs an rng")
        start = int(rng.integers(0, hi + 1))
    else:
        if spec.start > hi:
            raise DataError(f"fixed start {spec.start} leaves no room for {L} frames in {T}")
        start = spec.start
    return start + spec.frequency * np.arange(spec.num_frames), start, T


def sample_uniform(video: VideoClip, spec: SampleSpec,
                   rng: Optional[np.random.Generator] = None) -> tuple[VideoClip, int]:
    idx, start, T = uniform_indices(video.num_frames, spec, rng)
    padded = pad_video(video, T)
    clip = VideoClip(padded.frames[idx], video.source_id, padded_from=padded.padded_from,
                     indices=idx)
    return clip, start


def _check_annotations(T: int, es_idx: int, ed_idx: int) -> None:
    for name, i in (("es", es_idx), ("ed", ed_idx)):
        if not 0 <= i < T:
            raise DataError(f"{name} index {i} outside video of {T} frames")
    if es_idx == ed_idx:
        raise DataError(f"es and ed frames coincide at {es_idx}")


def sample_es_ed(video: VideoClip, es_idx: int, ed_idx: int) -> VideoClip:
    """The two annotated frames, earliest first."""
    _check_annotations(video.num_frames, es_idx, ed_idx)
    idx = np.array(sorted((es_idx, ed_idx)))
    return VideoClip(video.frames[idx], video.source_id, indices=idx)


def mirrored_indices(es_idx: int, ed_idx: int, target_len: int) -> np.ndarray:
    """Palindromic tiling of the annotated cycle: forward, reversed, forward, ...

    Seams never repeat a frame, e.g. cycle (0, 1, 2) to length 7 gives
    0 1 2 1 0 1 2.
    """
    lo, hi = sorted((es_idx, ed_idx))
    cycle = np.arange(lo, hi + 1)
    if target_len < cycle.size:
        raise ConfigError(f"target length {target_len} shorter than annotated cycle {cycle.size}")
    out = list(cycle)
    forward = False
    while len(out) < target_len:
        seg = cycle[1:] if forward else cycle[::-1][1:]
        out.extend(seg[: target_len - len(out)])
        forward = not forward
    return np.asarray(out)


def sample_mirrored(video: VideoClip, es_idx: int, ed_idx: int, target_len: int) -> VideoClip:
    _check_annotations(video.num_frames, es_idx, ed_idx)
    idx = mirrored_indices(es_idx, ed_idx, target_len)
    return VideoClip(video.frames[idx], video.source_id, indices=idx)


def sample_clip(video: VideoClip, spec: SampleSpec, rng: Optional[np.random.Generator] = None,
                es_idx: Optional[int] = None, ed_idx: Optional[int] = None) -> VideoClip:
    """Dispatch on ``spec.mode``; the annotated modes need ES/ED indices."""
    if spec.mode is Mode.UNIFORM:
        return sample_uniform(video, spec, rng)[0]
    if es_idx is None or ed_idx is None:
        raise DataError(f"{spec.mode.value} sampling needs ES/ED indices for {video.source_id!r}")
    if spec.mode is Mode.ES_ED:
        return sample_es_ed(video, es_idx, ed_idx)
    return sample_mirrored(video, es_idx, ed_idx, spec.num_frames)
