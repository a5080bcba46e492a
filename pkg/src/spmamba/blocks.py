"""Composite layers: positional encoding, Mamba blocks, subsequence partitioning, MLP."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from . import tensor as T
from .sfc import SerializationOrder, SerializationPattern
from .sparse import submconv3d
from .ssm import SSMParams, init_ssm_params, selective_scan
from .tensor import ParamStore, ShapeError, Tensor

Params = Mapping[str, Tensor]


@dataclass(frozen=True)
class BlockConfig:
    channels: int
    expand: int = 2
    conv_width: int = 4
    d_state: int = 16
    bidirectional: bool = False
    pattern: SerializationPattern = SerializationPattern.Z
    sub_len: int = 1024
    pre_norm: bool = True
    mlp_ratio: int = 4
    zoh_exact: bool = True
    use_d_skip: bool = True
    cpe: bool = True
    eps: float = 1e-5

    def __post_init__(self):
        if self.channels <= 0:
            raise ValueError("channels must be positive")
        if self.conv_width < 1:
            raise ValueError("conv_width must be >= 1")
        if self.mlp_ratio < 1:
            raise ValueError("mlp_ratio must be >= 1")

    @property
    def inner(self) -> int:
        return self.expand * self.channels


# -- subsequences ---------------------------------------------------------------

@dataclass(frozen=True)
class SubsequenceLayout:
    n_points: int
    sub_len: int
    starts: np.ndarray
    src: np.ndarray  # slot -> sequence position (padded slots replicate earlier positions)
    valid_mask: np.ndarray

    @property
    def num_subsequences(self) -> int:
        return self.starts.size

    @property
    def num_padded(self) -> int:
        return int((~self.valid_mask).sum())


def partition_subsequences(n_points: int, sub_len: int) -> SubsequenceLayout:
    """Split a length-``n_points`` sequence into equal windows of ``sub_len``.

    Sequences no longer than ``sub_len`` form a single unpadded window. Otherwise
    the last window is completed with the trailing points of the preceding
    window, appended after its valid slots.
    """
    if n_points < 1 or sub_len < 1:
        raise ValueError("n_points and sub_len must be positive")
    if n_points <= sub_len:
        return SubsequenceLayout(n_points, n_points, np.zeros(1, dtype=np.int64),
                                 np.arange(n_points), np.ones(n_points, dtype=bool))
    s = math.ceil(n_points / sub_len)
    total = s * sub_len
    pad = total - n_points
    last_start = (s - 1) * sub_len
    src = np.concatenate([np.arange(n_points), np.arange(last_start - pad, last_start)])
    valid = np.zeros(total, dtype=bool)
    valid[:n_points] = True
    return SubsequenceLayout(n_points, sub_len, np.arange(s) * sub_len, src, valid)


def to_subsequences(x: Tensor, layout: SubsequenceLayout) -> Tensor:
    """``[n, C]`` sequence -> ``[S, sub_len, C]`` windows."""
    return T.reshape(T.take_rows(x, layout.src), (layout.num_subsequences, layout.sub_len, x.shape[-1]))


def from_subsequences(y: Tensor, layout: SubsequenceLayout) -> Tensor:
    """Drop padded slots; valid slots are the first ``n_points`` in slot order."""
    flat = T.reshape(y, (-1, y.shape[-1]))
    return T.take_rows(flat, np.arange(layout.n_points))


# -- parameter initialisation -------------------------------------------------------

def init_linear(store: ParamStore, rng, name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    store.add(f"{name}.weight", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    if bias:
        store.add(f"{name}.bias", np.zeros(fan_out))


def init_norm(store: ParamStore, name: str, channels: int) -> None:
    store.add(f"{name}.gamma", np.ones(channels))
    store.add(f"{name}.beta", np.zeros(channels))


def init_cpe(store: ParamStore, rng, name: str, channels: int) -> None:
    bound = 1.0 / math.sqrt(27 * channels)
    store.add(f"{name}.conv.weight", rng.uniform(-bound, bound, size=(27, channels, channels)))
    store.add(f"{name}.conv.bias", np.zeros(channels))
    init_norm(store, f"{name}.norm", channels)


def _init_branch(store: ParamStore, rng, name: str, cfg: BlockConfig) -> None:
    e = cfg.inner
    bound = 1.0 / math.sqrt(cfg.conv_width)
    store.add(f"{name}.conv.weight", rng.uniform(-bound, bound, size=(e, cfg.conv_width)))
    store.add(f"{name}.conv.bias", np.zeros(e))
    for k, v in init_ssm_params(rng, e, cfg.d_state).items():
        store.add(f"{name}.ssm.{k}", v)


def init_mamba(store: ParamStore, rng, name: str, cfg: BlockConfig) -> None:
    c, e = cfg.channels, cfg.inner
    init_norm(store, f"{name}.norm", c)
    init_linear(store, rng, f"{name}.in_proj", c, 2 * e)
    _init_branch(store, rng, f"{name}.fwd", cfg)
    if cfg.bidirectional:
        _init_branch(store, rng, f"{name}.bwd", cfg)
    init_linear(store, rng, f"{name}.out_proj", (2 if cfg.bidirectional else 1) * e, c)


def init_mlp(store: ParamStore, rng, name: str, channels: int, ratio: int) -> None:
    init_norm(store, f"{name}.norm", channels)
    init_linear(store, rng, f"{name}.fc1", channels, ratio * channels)
    init_linear(store, rng, f"{name}.fc2", ratio * channels, channels)


def init_block(store: ParamStore, rng, name: str, cfg: BlockConfig) -> None:
    if cfg.cpe:
        init_cpe(store, rng, f"{name}.cpe", cfg.channels)
    init_mamba(store, rng, f"{name}.mamba", cfg)
    init_mlp(store, rng, f"{name}.mlp", cfg.channels, cfg.mlp_ratio)


def scoped(params: Params, prefix: str) -> dict[str, Tensor]:
    if isinstance(params, ParamStore):
        return params.scope(prefix)
    p = prefix + "."
    return {k[len(p):]: v for k, v in params.items() if k.startswith(p)}


# -- forward passes -----------------------------------------------------------

def linear(x: Tensor, p: Params, name: str) -> Tensor:
    y = T.matmul(x, p[f"{name}.weight"])
    b = p.get(f"{name}.bias")
    return y if b is None else y + b


def norm(x: Tensor, p: Params, name: str, eps: float = 1e-5) -> Tensor:
    return T.layer_norm(x, p[f"{name}.gamma"], p[f"{name}.beta"], eps)


def cpe_apply(table: np.ndarray, x: Tensor, p: Params, eps: float = 1e-5) -> Tensor:
    """Conditional positional encoding ``x + norm(SubMConv3d(x))``."""
    conv = submconv3d(table, x, p["conv.weight"], p["conv.bias"])
    if conv.shape != x.shape:
        raise ShapeError("positional convolution must preserve the channel count")
    return x + norm(conv, p, "norm", eps)


def _branch(x: Tensor, z: Tensor, p: Params, name: str, cfg: BlockConfig) -> Tensor:
    xs = T.silu(T.causal_conv1d(x, p[f"{name}.conv.weight"], p[f"{name}.conv.bias"]))
    y = selective_scan(SSMParams.from_mapping(scoped(p, f"{name}.ssm")), xs,
                       zoh_exact=cfg.zoh_exact, use_d_skip=cfg.use_d_skip)
    return T.gate(y, z)


def ssm_path(x: Tensor, p: Params, cfg: BlockConfig) -> Tensor:
    """Projection, causal conv, selective scan, gate, and output projection over ``x[..., L, C]``."""
    e = cfg.inner
    xz = linear(x, p, "in_proj")
    xs, z = xz[..., :e], xz[..., e:]
    y = _branch(xs, z, p, "fwd", cfg)
    if cfg.bidirectional:
        axis = x.ndim - 2
        yb = T.flip(_branch(T.flip(xs, axis), T.flip(z, axis), p, "bwd", cfg), axis)
        y = T.concat([y, yb], axis=-1)
    return linear(y, p, "out_proj")


def mamba_block_forward(x: Tensor, cfg: BlockConfig, p: Params) -> Tensor:
    """Residual Mamba mixer; bidirectional when ``cfg.bidirectional``."""
    if x.shape[-1] != cfg.channels:
        raise ShapeError(f"block expects {cfg.channels} channels, got {x.shape[-1]}")
    if cfg.pre_norm:
        return x + ssm_path(norm(x, p, "norm", cfg.eps), p, cfg)
    return norm(x + ssm_path(x, p, cfg), p, "norm", cfg.eps)


def bidirectional_mamba_forward(x: Tensor, cfg: BlockConfig, p: Params) -> Tensor:
    return mamba_block_forward(x, replace(cfg, bidirectional=True), p)


def mlp_block(x: Tensor, p: Params, pre_norm: bool = True, eps: float = 1e-5) -> Tensor:
    if pre_norm:
        return x + linear(T.silu(linear(norm(x, p, "norm", eps), p, "fc1")), p, "fc2")
    return norm(x + linear(T.silu(linear(x, p, "fc1")), p, "fc2"), p, "norm", eps)


def serialized_block(table: np.ndarray, order: SerializationOrder, x: Tensor, cfg: BlockConfig, p: Params) -> Tensor:
    """One encoder/decoder block over voxel features ``x[M, C]``.

    Positional encoding, then serialize by ``order``, run the mixer on
    fixed-length windows, restore cell order, and finish with the MLP.
    """
    if cfg.cpe:
        x = cpe_apply(table, x, scoped(p, "cpe"), cfg.eps)
    seq = T.take_rows(x, order.perm)
    layout = partition_subsequences(seq.shape[0], cfg.sub_len)
    y = mamba_block_forward(to_subsequences(seq, layout), cfg, scoped(p, "mamba"))
    x = T.take_rows(from_subsequences(y, layout), order.inv_perm)
    return mlp_block(x, scoped(p, "mlp"), cfg.pre_norm, cfg.eps)
