"""Closed-form multiply-accumulate count for a model configuration.

One multiply-accumulate counts as one FLOP. Convolutions, linear layers and
the two attention matmuls are counted; normalization, activations, softmax,
residual additions and pooling are not.
"""
from __future__ import annotations

import numpy as np

from .model import ModelConfig, STAGE1_KERNEL, stage_grids


def conv_flops(out_elems: int, kernel, c_in_per_group: int) -> int:
    return int(out_elems) * int(np.prod(kernel)) * int(c_in_per_group)


def linear_flops(tokens: int, d_in: int, d_out: int) -> int:
    return int(tokens) * int(d_in) * int(d_out)


def count_flops(cfg: ModelConfig, input_shape=None) -> int:
    """FLOPs of one forward pass.

    ``input_shape`` is (T, H, W), (C, T, H, W) or (N, C, T, H, W); it defaults
    to the config's ``input_size`` with batch 1.
    """
    shape = tuple(cfg.input_size) if input_shape is None else tuple(int(s) for s in input_shape)
    n = 1
    if len(shape) == 5:
        n, shape = shape[0], shape[2:]
    elif len(shape) == 4:
        shape = shape[1:]
    grids = stage_grids(cfg, shape)
    dims = cfg.stage_dims
    total = 0
    c_prev = cfg.in_channels
    for i, (grid, c, depth) in enumerate(zip(grids, dims, cfg.stage_depths)):
        L = int(np.prod(grid))
        kernel = STAGE1_KERNEL if i == 0 else (1, 2, 2)
        total += conv_flops(L * c, kernel, c_prev)
        dpe = conv_flops(L * c, (cfg.dpe_kernel,) * 3, 1)
        ffn = 2 * linear_flops(L, c, cfg.hidden_dim(c))
        if i < 2:
            mhra = 2 * linear_flops(L, c, c) + conv_flops(L * c, (cfg.local_window,) * 3, 1)
        else:
            # q, k, v and output projections, then QK^T and AV
            mhra = 4 * linear_flops(L, c, c) + 2 * L * L * c
        total += depth * (dpe + mhra + ffn)
        c_prev = c
    total += dims[3]  # regression head
    return n * total


def format_flops(count: int) -> str:
    return f"{count / 1e9:.3f}G"
