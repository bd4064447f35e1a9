"""Layer initialisation and the small conv backbone shared by experts and gates."""

from __future__ import annotations

import math
from typing import Dict, Iterable, List, Sequence

import numpy as np

from .tensor import DTYPE, Parameter, Tensor, conv2d, max_pool2d, relu

ParamDict = Dict[str, Parameter]


def he_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / max(1, fan_in))
    return rng.uniform(-limit, limit, size=tuple(shape)).astype(DTYPE)


def init_conv(
    params: ParamDict,
    name: str,
    rng: np.random.Generator,
    in_channels: int,
    out_channels: int,
    kernel: int = 3,
) -> None:
    params[f"{name}.weight"] = Parameter(
        he_uniform(rng, (out_channels, in_channels, kernel, kernel), in_channels * kernel * kernel),
        f"{name}.weight",
    )
    params[f"{name}.bias"] = Parameter(np.zeros(out_channels, dtype=DTYPE), f"{name}.bias")


def init_dense(
    params: ParamDict,
    name: str,
    rng: np.random.Generator | None,
    in_features: int,
    out_features: int,
) -> None:
    """Dense weights shaped ``(in, out)``; ``rng=None`` gives an all-zero layer."""
    if rng is None:
        weight = np.zeros((in_features, out_features), dtype=DTYPE)
    else:
        weight = he_uniform(rng, (in_features, out_features), in_features)
    params[f"{name}.weight"] = Parameter(weight, f"{name}.weight")
    params[f"{name}.bias"] = Parameter(np.zeros(out_features, dtype=DTYPE), f"{name}.bias")


def init_backbone(
    params: ParamDict,
    rng: np.random.Generator,
    in_channels: int,
    channels: Sequence[int],
    prefix: str = "backbone",
) -> None:
    prev = in_channels
    for i, ch in enumerate(channels):
        init_conv(params, f"{prefix}.conv{i}", rng, prev, int(ch))
        prev = int(ch)


def backbone_forward(params: ParamDict, x: Tensor, depth: int, prefix: str = "backbone") -> Tensor:
    """``depth`` blocks of 3x3 conv (pad 1) -> relu -> 2x2 max pool."""
    for i in range(depth):
        x = conv2d(x, params[f"{prefix}.conv{i}.weight"], params[f"{prefix}.conv{i}.bias"], stride=1, padding=1)
        x = relu(x)
        x = max_pool2d(x, 2)
    return x


def backbone_stride(channels: Sequence[int]) -> int:
    return 2 ** len(channels)


def trainable(params: ParamDict, names: Iterable[str] | None = None) -> List[Parameter]:
    """Parameters in sorted-name order, optionally restricted to ``names``."""
    keys = sorted(params) if names is None else sorted(names)
    return [params[k] for k in keys]


def freeze(params: ParamDict) -> ParamDict:
    return {name: p.copy(trainable=False) for name, p in params.items()}

