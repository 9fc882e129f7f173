"""Study manifests, the raw ``ECV1`` video container, normalization and a
synthetic beating-ellipse dataset with analytic ejection-fraction labels."""
from __future__ import annotations

import csv
import enum
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .sampling import VideoClip

logger = logging.getLogger(__name__)

VIDEO_MAGIC = b"ECV1"
VIDEO_SUFFIX = ".ecv"
MANIFEST_COLUMNS = ("FileName", "EF", "ESV", "EDV", "FrameHeight", "FrameWidth", "FPS",
                    "NumberOfFrames", "Split")
EF_TOLERANCE = 1.0


class Split(str, enum.Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"
    TEST = "TEST"

    @classmethod
    def parse(cls, value: str) -> "Split":
        try:
            return cls(value.strip().upper())
        except ValueError:
            raise DataError(f"unknown split {value!r}") from None


@dataclass
class StudyRecord:
    file_name: str
    ef: float
    num_frames: int
    frame_size: tuple
    fps: float
    split: Split
    esv: Optional[float] = None
    edv: Optional[float] = None
    es_idx: Optional[int] = None
    ed_idx: Optional[int] = None

    def validate(self) -> None:
        if not 0 < self.ef < 100:
            raise DataError(f"{self.file_name}: EF {self.ef} outside (0, 100)")
        if self.esv is not None and self.edv is not None:
            if not self.edv > self.esv > 0:
                raise DataError(f"{self.file_name}: need EDV > ESV > 0, got {self.edv}, {self.esv}")
            implied = 100.0 * (self.edv - self.esv) / self.edv
            if abs(self.ef - implied) > EF_TOLERANCE:
                raise DataError(f"{self.file_name}: EF {self.ef} inconsistent with volumes "
                                f"(implies {implied:.2f})")
        if self.es_idx is not None and self.ed_idx is not None:
            if self.es_idx == self.ed_idx:
                raise DataError(f"{self.file_name}: ES and ED frames coincide")
            if max(self.es_idx, self.ed_idx) >= self.num_frames or min(self.es_idx, self.ed_idx) < 0:
                raise DataError(f"{self.file_name}: ES/ED index outside {self.num_frames} frames")


@dataclass
class DatasetManifest:
    records: list
    root: Path
    rejected: list = field(default_factory=list)

    def __post_init__(self):
        names = [r.file_name for r in self.records]
        if len(set(names)) != len(names):
            raise DataError("duplicate FileName entries in manifest")

    def split(self, split: Union[Split, str]) -> list:
        split = Split.parse(split) if isinstance(split, str) else split
        return [r for r in self.records if r.split is split]

    def split_sizes(self) -> dict:
        return {s.value: len(self.split(s)) for s in Split}

    def video_path(self, record: StudyRecord) -> Path:
        name = record.file_name
        if not name.endswith(VIDEO_SUFFIX):
            name = Path(name).stem + VIDEO_SUFFIX if Path(name).suffix else name + VIDEO_SUFFIX
        return self.root / name


def _opt_float(v: str) -> Optional[float]:
    v = v.strip()
    return float(v) if v else None


def load_manifest(csv_path: Union[str, Path], root: Union[str, Path, None] = None,
                  es_ed_path: Union[str, Path, None] = None) -> DatasetManifest:
    """Read an EchoNet-Dynamic style file list.

    Rows that fail to parse or violate the record invariants land in
    ``manifest.rejected`` as ``(line_number, reason)``; a missing column is fatal.
    """
    csv_path = Path(csv_path)
    records, rejected = [], []
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise FormatError(f"{csv_path}: missing columns {missing}")
        for line, row in enumerate(reader, start=2):
            try:
                rec = StudyRecord(
                    file_name=row["FileName"].strip(),
                    ef=float(row["EF"]),
                    esv=_opt_float(row["ESV"]),
                    edv=_opt_float(row["EDV"]),
                    frame_size=(int(row["FrameHeight"]), int(row["FrameWidth"])),
                    fps=float(row["FPS"]),
                    num_frames=int(row["NumberOfFrames"]),
                    split=Split.parse(row["Split"]),
                )
                rec.validate()
            except (ValueError, TypeError) as exc:
                rejected.append((line, str(exc)))
                continue
            records.append(rec)
    manifest = DatasetManifest(records, Path(root) if root else csv_path.parent, rejected)
    if rejected:
        logger.warning("%s: rejected %d rows", csv_path, len(rejected))
    if es_ed_path is not None:
        attach_es_ed(manifest, load_es_ed(es_ed_path))
    return manifest


def load_es_ed(path: Union[str, Path]) -> dict:
    """FileName -> (es_idx, ed_idx) from a FileName,ESFrame,EDFrame sidecar."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not {"FileName", "ESFrame", "EDFrame"} <= set(reader.fieldnames or []):
            raise FormatError(f"{path}: expected columns FileName,ESFrame,EDFrame")
        for row in reader:
            try:
                out[row["FileName"].strip()] = (int(row["ESFrame"]), int(row["EDFrame"]))
            except ValueError as exc:
                raise FormatError(f"{path}: bad frame index in {row}") from exc
    return out


def attach_es_ed(manifest: DatasetManifest, indices: dict) -> None:
    for rec in manifest.records:
        if rec.file_name in indices:
            rec.es_idx, rec.ed_idx = indices[rec.file_name]
            rec.validate()


def write_manifest(records: Iterable[StudyRecord], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in records:
            w.writerow([r.file_name, repr(float(r.ef)),
                        "" if r.esv is None else repr(float(r.esv)),
                        "" if r.edv is None else repr(float(r.edv)),
                        r.frame_size[0], r.frame_size[1], r.fps, r.num_frames, r.split.value])


def write_es_ed(records: Iterable[StudyRecord], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("FileName", "ESFrame", "EDFrame"))
        for r in records:
            if r.es_idx is not None and r.ed_idx is not None:
                w.writerow([r.file_name, r.es_idx, r.ed_idx])


# ---------------------------------------------------------------- raw video container

def write_video(path: Union[str, Path], frames: np.ndarray) -> None:
    """``ECV1``, u32 T, H, W (little endian), then T*H*W bytes frame-major.

    Float frames are taken to be in [0, 1] and quantized with round(x * 255).
    """
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise DataError(f"expected [T,H,W] frames, got {frames.shape}")
    if frames.dtype != np.uint8:
        frames = np.clip(np.rint(frames * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(VIDEO_MAGIC)
        fh.write(struct.pack("<3I", *frames.shape))
        fh.write(np.ascontiguousarray(frames).tobytes())


def read_video_bytes(path: Union[str, Path]) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != VIDEO_MAGIC:
        raise FormatError(f"{path}: bad video magic")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    T, H, W = struct.unpack("<3I", raw[4:16])
    payload = raw[16:]
    if len(payload) != T * H * W:
        raise FormatError(f"{path}: header declares {T}x{H}x{W} = {T * H * W} bytes, "
                          f"payload has {len(payload)}")
    if min(T, H, W) < 1:
        raise FormatError(f"{path}: empty video")
    return np.frombuffer(payload, dtype=np.uint8).reshape(T, H, W)


def load_video(path: Union[str, Path], source_id: Optional[str] = None) -> VideoClip:
    """Read an ``ECV1`` file into a clip with values in [0, 1]."""
    frames = read_video_bytes(path).astype(np.float32) / np.float32(255.0)
    return VideoClip(frames, source_id if source_id is not None else Path(path).stem)


def normalize(clip: VideoClip, mean: float = 0.5, std: float = 0.25) -> VideoClip:
    if std <= 0:
        raise ConfigError(f"std must be > 0, got {std}")
    frames = (clip.frames - np.float32(mean)) / np.float32(std)
    return VideoClip(frames.astype(clip.frames.dtype, copy=False), clip.source_id,
                     clip.padded_from, clip.indices)


def denormalize(clip: VideoClip, mean: float = 0.5, std: float = 0.25) -> VideoClip:
    if std <= 0:
        raise ConfigError(f"std must be > 0, got {std}")
    return VideoClip(clip.frames * np.float32(std) + np.float32(mean), clip.source_id,
                     clip.padded_from, clip.indices)


# ---------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SynthSpec:
    height: int = 32
    width: int = 32
    frames_per_cycle: int = 16
    num_cycles: int = 3
    ef_range: tuple = (20.0, 80.0)
    noise_sigma: float = 0.05
    split_fractions: tuple = (0.7, 0.15, 0.15)
    fps: float = 50.0

    def validate(self) -> None:
        lo, hi = self.ef_range
        if not 5 < lo < hi < 95:
            raise ConfigError(f"ef_range {self.ef_range} must lie inside (5, 95)")
        if self.frames_per_cycle < 8:
            raise ConfigError("frames_per_cycle must be >= 8")
        if self.num_cycles < 1 or self.noise_sigma < 0:
            raise ConfigError("num_cycles >= 1 and noise_sigma >= 0 required")
        if min(self.height, self.width) < 8:
            raise ConfigError("frames must be at least 8x8 to hold an ellipse")
        if len(self.split_fractions) != 3 or abs(sum(self.split_fractions) - 1) > 1e-9:
            raise ConfigError("split_fractions must be three values summing to 1")


def area_curve(t: np.ndarray, a_ed: float, a_es: float, period: int) -> np.ndarray:
    """A(t) = A_ed - (A_ed - A_es) * (1 - cos(2 pi t / P)) / 2."""
    return a_ed - (a_ed - a_es) * (1.0 - np.cos(2.0 * np.pi * t / period)) / 2.0


def render_ellipse(height: int, width: int, cy: float, cx: float, ry: float, rx: float) -> np.ndarray:
    """Binary mask of pixels whose centres fall inside the ellipse."""
    yy = np.arange(height)[:, None] + 0.5
    xx = np.arange(width)[None, :] + 0.5
    return (((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0).astype(np.float32)


def _split_counts(count: int, fractions: Sequence[float]) -> list[int]:
    n_val = int(round(count * fractions[1]))
    n_test = int(round(count * fractions[2]))
    return [count - n_val - n_test, n_val, n_test]


def synth_video(index: int, spec: SynthSpec, seed: int) -> tuple[np.ndarray, StudyRecord]:
    """One beating-ellipse video (u8 frames) and its record.

    The generator for video ``index`` is seeded from ``(seed, index)`` alone, so
    videos can be produced in any order or in parallel.
    """
    rng = np.random.default_rng([seed, index])
    H, W, P = spec.height, spec.width, spec.frames_per_cycle
    ef = float(rng.uniform(*spec.ef_range))
    # ED semi-axes: between 65% and 85% of the half-frame, leaving a margin
    ry_ed = float(rng.uniform(0.65, 0.85)) * (H / 2 - 1)
    rx_ed = float(rng.uniform(0.65, 0.85)) * (W / 2 - 1)
    cy = H / 2 + float(rng.uniform(-0.1, 0.1)) * (H / 2 - ry_ed)
    cx = W / 2 + float(rng.uniform(-0.1, 0.1)) * (W / 2 - rx_ed)
    if ry_ed < 2 or rx_ed < 2 or cy - ry_ed < 0 or cx - rx_ed < 0 or cy + ry_ed > H or cx + rx_ed > W:
        raise ConfigError(f"ellipse does not fit a {H}x{W} frame")
    a_ed = math.pi * ry_ed * rx_ed
    a_es = a_ed * (1.0 - ef / 100.0)
    phase = int(rng.integers(0, P))
    T = P * spec.num_cycles
    t = np.arange(T) + phase
    areas = area_curve(t, a_ed, a_es, P)
    frames = np.empty((T, H, W), dtype=np.float32)
    for i, a in enumerate(areas):
        s = math.sqrt(a / a_ed)
        frames[i] = render_ellipse(H, W, cy, cx, ry_ed * s, rx_ed * s)
    frames += rng.normal(0.0, spec.noise_sigma, size=frames.shape).astype(np.float32)
    u8 = np.clip(np.rint(frames * 255.0), 0, 255).astype(np.uint8)
    rec = StudyRecord(
        file_name=f"synth_{index:05d}", ef=ef, num_frames=T, frame_size=(H, W), fps=spec.fps,
        split=Split.TRAIN, esv=a_es, edv=a_ed,
        es_idx=int(np.argmin(areas)), ed_idx=int(np.argmax(areas)),
    )
    return u8, rec


def synth_generate(count: int, spec: SynthSpec = SynthSpec(), seed: int = 0,
                   splits: Optional[Sequence[Union[Split, str]]] = None,
                   ) -> tuple[list[VideoClip], list[StudyRecord]]:
    """``count`` synthetic studies.

    Splits are assigned in index order (train block, then val, then test) from
    ``spec.split_fractions`` unless ``splits`` gives one split per video.
    """
    spec.validate()
    if count < 0:
        raise ConfigError("count must be >= 0")
    if splits is None:
        n_train, n_val, n_test = _split_counts(count, spec.split_fractions)
        splits = [Split.TRAIN] * n_train + [Split.VAL] * n_val + [Split.TEST] * n_test
    elif len(splits) != count:
        raise ConfigError("need one split per generated video")
    videos, records = [], []
    for i in range(count):
        u8, rec = synth_video(i, spec, seed)
        rec.split = Split.parse(splits[i]) if isinstance(splits[i], str) else splits[i]
        rec.validate()
        videos.append(VideoClip(u8.astype(np.float32) / np.float32(255.0), rec.file_name))
        records.append(rec)
    return videos, records


def write_dataset(out_dir: Union[str, Path], videos: Sequence[VideoClip],
                  records: Sequence[StudyRecord]) -> Path:
    """Write videos, ``manifest.csv`` and ``es_ed.csv``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for clip, rec in zip(videos, records):
        write_video(out / (rec.file_name + VIDEO_SUFFIX), clip.frames)
    write_manifest(records, out / "manifest.csv")
    write_es_ed(records, out / "es_ed.csv")
    return out / "manifest.csv"
