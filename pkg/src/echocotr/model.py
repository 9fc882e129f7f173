"""The convolution + transformer hybrid regressor.

Four stages. Stages 1-2 mix tokens locally (depthwise-conv affinity), stages
3-4 globally (multi-head self-attention). Every block is

    x = x + DPE(x);  x = x + MHRA(norm(x));  x = x + FFN(norm(x))

followed at the end by layer norm, average pooling over (T, H, W) and a
linear head producing one ejection-fraction value per clip.
"""
from __future__ import annotations

import dataclasses
import io
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .engine import ops
from .engine.ops import conv_output_size
from .engine.serialize import read_array, write_tensor
from .engine.tensor import Tensor
from .errors import ConfigError, DimensionError, FormatError
from .nn import (BatchNorm3d, ChannelLayerNorm, Conv3d, DropPath, LayerNorm, Linear, Module)

STAGE1_KERNEL = (3, 4, 4)
STAGE1_STRIDE = (2, 4, 4)
STAGE1_PADDING = (1, 0, 0)
DOWN_KERNEL = (1, 2, 2)


@dataclass(frozen=True)
class ModelConfig:
    stage_depths: tuple = (3, 4, 8, 3)
    stage_dims: tuple = (64, 128, 320, 512)
    head_dim: int = 64
    ffn_ratio: float = 4.0
    drop_path_max: float = 0.1
    dpe_kernel: int = 3
    local_window: int = 5
    in_channels: int = 1
    input_size: tuple = (36, 112, 112)

    def __post_init__(self):
        object.__setattr__(self, "stage_depths", tuple(int(d) for d in self.stage_depths))
        object.__setattr__(self, "stage_dims", tuple(int(d) for d in self.stage_dims))
        object.__setattr__(self, "input_size", tuple(int(d) for d in self.input_size))
        if len(self.stage_depths) != 4 or len(self.stage_dims) != 4:
            raise ConfigError("stage_depths and stage_dims need exactly 4 entries")
        if any(d < 0 for d in self.stage_depths) or any(d < 1 for d in self.stage_dims):
            raise ConfigError("stage depths must be >= 0 and widths >= 1")
        if self.head_dim < 1 or any(d % self.head_dim for d in self.stage_dims[2:]):
            raise ConfigError(f"head_dim {self.head_dim} must divide global stage widths "
                              f"{self.stage_dims[2:]}")
        if not 0.0 <= self.drop_path_max < 1.0:
            raise ConfigError("drop_path_max must be in [0, 1)")
        if self.dpe_kernel % 2 == 0 or self.local_window % 2 == 0:
            raise ConfigError("dpe_kernel and local_window must be odd")
        if self.ffn_ratio <= 0 or self.in_channels < 1 or len(self.input_size) != 3:
            raise ConfigError("ffn_ratio > 0, in_channels >= 1 and a 3-d input_size are required")

    def hidden_dim(self, dim: int) -> int:
        return int(round(self.ffn_ratio * dim))

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={','.join(map(str, v)) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        kinds = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            if key not in kinds:
                raise ConfigError(f"unknown model config key {key!r}")
            kw[key] = parse_config_value(key, value)
        return cls(**kw)


def parse_config_value(key: str, value: str):
    """Parse one ``ModelConfig`` field from its text form."""
    if key in ("stage_depths", "stage_dims", "input_size"):
        return tuple(int(v) for v in value.split(","))
    if key in ("ffn_ratio", "drop_path_max"):
        return float(value)
    return int(value)


PRESETS = {
    "S": ModelConfig(stage_depths=(3, 4, 8, 3), drop_path_max=0.1),
    "B": ModelConfig(stage_depths=(5, 8, 20, 7), drop_path_max=0.3),
}


def preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name.upper()]
    except (KeyError, AttributeError):
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def tiny_config(**overrides) -> ModelConfig:
    """Desk-scale configuration used throughout the tests."""
    base = dict(stage_depths=(1, 1, 1, 1), stage_dims=(8, 16, 32, 64), head_dim=16,
                drop_path_max=0.1, input_size=(16, 32, 32))
    base.update(overrides)
    return ModelConfig(**base)


# ---------------------------------------------------------------- shapes

def stage_grids(cfg: ModelConfig, input_size) -> list[tuple[int, int, int]]:
    """Token grid (T, H, W) at the output of each of the four embeddings."""
    T, H, W = input_size
    if T < 2:
        raise DimensionError(f"need at least 2 frames, got {T}")
    if H < 4 or W < 4:
        raise ConfigError(f"frames must be at least 4x4, got {H}x{W}")
    grid = tuple(conv_output_size(d, k, s, p) for d, k, s, p in
                 zip((T, H, W), STAGE1_KERNEL, STAGE1_STRIDE, STAGE1_PADDING))
    grids = [grid]
    for _ in range(3):
        t, h, w = grids[-1]
        if h < 2 or w < 2:
            raise DimensionError(f"grid {grids[-1]} too small to downsample; use larger frames")
        grids.append((t, conv_output_size(h, 2, 2, 0), conv_output_size(w, 2, 2, 0)))
    return grids


# ---------------------------------------------------------------- blocks

class DPE(Module):
    """Positional embedding as a residual depthwise 3-D convolution (shape preserving)."""

    def __init__(self, dim: int, kernel: int, rng, dtype=np.float32):
        super().__init__()
        self.conv = Conv3d(dim, dim, kernel, 1, kernel // 2, rng, groups=dim, zero=True, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.conv(x)


class LocalMHRA(Module):
    """Pointwise value projection, static learnable neighbourhood affinity, pointwise output."""

    def __init__(self, dim: int, window: int, drop_path: float, rng, dtype=np.float32,
                 zero_proj: bool = False):
        super().__init__()
        self.norm = BatchNorm3d(dim, dtype=dtype)
        self.value = Conv3d(dim, dim, 1, 1, 0, rng, dtype=dtype)
        self.affinity = Conv3d(dim, dim, window, 1, window // 2, rng, groups=dim, dtype=dtype)
        self.proj = Conv3d(dim, dim, 1, 1, 0, rng, zero=zero_proj, dtype=dtype)
        self.drop_path = DropPath(drop_path)

    def branch(self, x: Tensor) -> Tensor:
        return self.proj(self.affinity(self.value(x)))

    def forward(self, x: Tensor) -> Tensor:
        return x + self.drop_path(self.branch(self.norm(x)))


class GlobalMHRA(Module):
    """Multi-head scaled dot-product self-attention over all T*H*W tokens of a clip."""

    def __init__(self, dim: int, head_dim: int, drop_path: float, rng, dtype=np.float32,
                 zero_proj: bool = False):
        super().__init__()
        self.heads = dim // head_dim
        self.head_dim = head_dim
        self.norm = LayerNorm(dim, dtype=dtype)
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.k = Linear(dim, dim, rng, dtype=dtype)
        self.v = Linear(dim, dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, zero=zero_proj, dtype=dtype)
        self.drop_path = DropPath(drop_path)
        self.last_attention: Optional[np.ndarray] = None

    def _split(self, t: Tensor) -> Tensor:
        N, L, _ = t.shape
        t = ops.reshape(t, (N, L, self.heads, self.head_dim))
        return ops.transpose_axes(t, (0, 2, 1, 3))

    def attention(self, x: Tensor) -> Tensor:
        """Attention sub-operation on tokens [N, L, C], without norm or residual."""
        N, L, C = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = ops.scale(ops.matmul(q, ops.transpose_axes(k, (0, 1, 3, 2))),
                           1.0 / math.sqrt(self.head_dim))
        weights = ops.softmax(scores, axis=-1)
        self.last_attention = weights.data
        out = ops.matmul(weights, v)
        out = ops.reshape(ops.transpose_axes(out, (0, 2, 1, 3)), (N, L, C))
        return self.proj(out)

    def forward(self, tokens: Tensor) -> Tensor:
        return tokens + self.drop_path(self.attention(self.norm(tokens)))


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng, dtype=np.float32, zero_proj: bool = False):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, zero=zero_proj, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class FFN(Module):
    """Pre-norm two-layer MLP with residual, on channels-last tokens."""

    def __init__(self, dim: int, hidden: int, drop_path: float, rng, dtype=np.float32,
                 zero_proj: bool = False):
        super().__init__()
        self.norm = LayerNorm(dim, dtype=dtype)
        self.mlp = MLP(dim, hidden, rng, dtype, zero_proj)
        self.drop_path = DropPath(drop_path)

    def forward(self, tokens: Tensor) -> Tensor:
        return tokens + self.drop_path(self.mlp(self.norm(tokens)))


class LocalFFN(Module):
    """Same MLP for [N, C, T, H, W] grids, with batch norm in front."""

    def __init__(self, dim: int, hidden: int, drop_path: float, rng, dtype=np.float32,
                 zero_proj: bool = False):
        super().__init__()
        self.norm = BatchNorm3d(dim, dtype=dtype)
        self.mlp = MLP(dim, hidden, rng, dtype, zero_proj)
        self.drop_path = DropPath(drop_path)

    def forward(self, x: Tensor) -> Tensor:
        y = ops.transpose_axes(self.norm(x), (0, 2, 3, 4, 1))
        y = ops.transpose_axes(self.mlp(y), (0, 4, 1, 2, 3))
        return x + self.drop_path(y)


class LocalBlock(Module):
    def __init__(self, cfg: ModelConfig, dim: int, drop_path: float, rng, dtype=np.float32,
                 zero_proj: bool = False):
        super().__init__()
        self.dpe = DPE(dim, cfg.dpe_kernel, rng, dtype)
        self.mhra = LocalMHRA(dim, cfg.local_window, drop_path, rng, dtype, zero_proj)
        self.ffn = LocalFFN(dim, cfg.hidden_dim(dim), drop_path, rng, dtype, zero_proj)

    def forward(self, x: Tensor) -> Tensor:
        return self.ffn(self.mhra(self.dpe(x)))


class GlobalBlock(Module):
    def __init__(self, cfg: ModelConfig, dim: int, drop_path: float, rng, dtype=np.float32,
                 zero_proj: bool = False):
        super().__init__()
        self.dpe = DPE(dim, cfg.dpe_kernel, rng, dtype)
        self.mhra = GlobalMHRA(dim, cfg.head_dim, drop_path, rng, dtype, zero_proj)
        self.ffn = FFN(dim, cfg.hidden_dim(dim), drop_path, rng, dtype, zero_proj)

    def forward(self, x: Tensor) -> Tensor:
        x = self.dpe(x)
        N, C, T, H, W = x.shape
        tokens = ops.transpose_axes(ops.reshape(x, (N, C, T * H * W)), (0, 2, 1))
        tokens = self.ffn(self.mhra(tokens))
        return ops.reshape(ops.transpose_axes(tokens, (0, 2, 1)), (N, C, T, H, W))


class PatchEmbed(Module):
    def __init__(self, c_in: int, c_out: int, kernel, stride, padding, rng, dtype=np.float32):
        super().__init__()
        self.conv = Conv3d(c_in, c_out, kernel, stride, padding, rng, dtype=dtype)
        self.norm = ChannelLayerNorm(c_out, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.norm(self.conv(x))


# ---------------------------------------------------------------- network

class EchoCoTrModel(Module):
    def __init__(self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None,
                 dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        object.__setattr__(self, "config", cfg)
        dims, depths = cfg.stage_dims, cfg.stage_depths
        rates = np.linspace(0.0, cfg.drop_path_max, max(sum(depths), 1))
        self.embeds = [PatchEmbed(cfg.in_channels, dims[0], STAGE1_KERNEL, STAGE1_STRIDE,
                                  STAGE1_PADDING, rng, dtype)] + [
            PatchEmbed(dims[i - 1], dims[i], DOWN_KERNEL, DOWN_KERNEL, 0, rng, dtype)
            for i in range(1, 4)]
        stages, k, last = [], 0, sum(depths) - 1
        for i, depth in enumerate(depths):
            block_cls = LocalBlock if i < 2 else GlobalBlock
            blocks = []
            for _ in range(depth):
                # the network's final block starts as an identity map
                blocks.append(block_cls(cfg, dims[i], float(rates[k]), rng, dtype,
                                        zero_proj=k == last))
                k += 1
            stages.append(blocks)
            if blocks:
                setattr(self, f"stage{i + 1}", blocks)
        object.__setattr__(self, "stages", stages)
        self.norm = LayerNorm(dims[3], dtype=dtype)
        self.head = Linear(dims[3], 1, rng, dtype=dtype)
        object.__setattr__(self, "last_grids", [])
        self.set_drop_path_rng(np.random.default_rng(0))

    def set_drop_path_rng(self, rng: Optional[np.random.Generator]) -> None:
        for m in self.modules():
            if isinstance(m, DropPath):
                m.rng = rng

    def forward(self, clip: Tensor) -> Tensor:
        """[N, C_in, T, H, W] -> predicted ejection fraction [N] (percent)."""
        if clip.ndim != 5 or clip.shape[1] != self.config.in_channels:
            raise DimensionError(f"expected [N,{self.config.in_channels},T,H,W], got {clip.shape}")
        expected = stage_grids(self.config, clip.shape[2:])
        if np.abs(clip.data).max() > 50:
            warnings.warn("input values look unnormalized", stacklevel=2)
        grids = []
        x = clip
        for embed, blocks, grid in zip(self.embeds, self.stages, expected):
            x = embed(x)
            if x.shape[2:] != grid:
                raise DimensionError(f"token grid {x.shape[2:]} != expected {grid}")
            for block in blocks:
                x = block(x)
            grids.append(tuple(x.shape[2:]))
        object.__setattr__(self, "last_grids", grids)
        N, C = x.shape[:2]
        tokens = ops.transpose_axes(ops.reshape(x, (N, C, -1)), (0, 2, 1))
        pooled = ops.mean_over_axes(self.norm(tokens), axes=1)
        return ops.reshape(self.head(pooled), (N,))


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for ``cfg`` (weights, biases and norm affines)."""
    dims, depths = cfg.stage_dims, cfg.stage_depths
    k1 = int(np.prod(STAGE1_KERNEL))
    total = cfg.in_channels * dims[0] * k1 + dims[0] + 2 * dims[0]
    for i in range(1, 4):
        total += dims[i - 1] * dims[i] * 4 + dims[i] + 2 * dims[i]
    for i, (c, depth) in enumerate(zip(dims, depths)):
        h = cfg.hidden_dim(c)
        dpe = c * cfg.dpe_kernel ** 3 + c
        ffn = 2 * c + (c * h + h) + (h * c + c)
        if i < 2:
            mhra = 2 * c + 2 * (c * c + c) + c * cfg.local_window ** 3 + c
        else:
            mhra = 2 * c + 4 * (c * c + c)
        total += depth * (dpe + mhra + ffn)
    return total + 2 * dims[3] + dims[3] + 1


# ---------------------------------------------------------------- weights file

WEIGHTS_MAGIC = b"ECW1"


def save_weights(model: EchoCoTrModel, path: Union[str, Path]) -> None:
    """``ECW1``, u32 config length, config text, u32 count, then (u16 name length,
    name, ECT1 tensor) per parameter/buffer in traversal order."""
    buf = io.BytesIO()
    buf.write(WEIGHTS_MAGIC)
    text = model.config.to_text().encode()
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    named = list(model.named_tensors())
    buf.write(struct.pack("<I", len(named)))
    for name, arr in named:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_tensor(buf, arr)
    Path(path).write_bytes(buf.getvalue())


def load_weights(path: Union[str, Path], dtype=None) -> EchoCoTrModel:
    stream = io.BytesIO(Path(path).read_bytes())

    def take(n):
        b = stream.read(n)
        if len(b) != n:
            raise FormatError(f"truncated weights file {path}")
        return b

    if take(4) != WEIGHTS_MAGIC:
        raise FormatError(f"{path} is not an ECW1 weights file")
    (n_text,) = struct.unpack("<I", take(4))
    cfg = ModelConfig.from_text(take(n_text).decode())
    (count,) = struct.unpack("<I", take(4))
    arrays = []
    for _ in range(count):
        (n_name,) = struct.unpack("<H", take(2))
        arrays.append((take(n_name).decode(), read_array(stream)))
    dtype = dtype or (arrays[0][1].dtype if arrays else np.float32)
    model = EchoCoTrModel(cfg, dtype=dtype)
    load_state(model, arrays)
    return model


def state_arrays(model: Module) -> list[tuple[str, np.ndarray]]:
    return [(n, a.copy()) for n, a in model.named_tensors()]


def load_state(model: Module, arrays) -> None:
    """Copy (name, array) pairs into ``model``; names and shapes must match exactly."""
    expected = list(model.named_tensors())
    arrays = list(arrays)
    if [n for n, _ in expected] != [n for n, _ in arrays]:
        raise FormatError("weights do not match the model layout for this config")
    for (name, dst), (_, src) in zip(expected, arrays):
        if dst.shape != src.shape:
            raise FormatError(f"{name}: shape {src.shape} != expected {dst.shape}")
        dst[...] = src
