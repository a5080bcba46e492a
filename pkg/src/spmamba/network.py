"""Serialized Point Mamba U-Net: stem, 5-stage encoder, 4-stage decoder, linear head."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .blocks import (
    BlockConfig,
    init_block,
    init_linear,
    init_norm,
    linear,
    norm,
    scoped,
    serialized_block,
)
from .sfc import SerializationOrder, SerializationPattern, order_points
from .sparse import PointCloud, PoolingMap, VoxelSet, grid_unpool, pool_features, pool_geometry, submconv3d, voxelize
from .tensor import ParamStore, Tensor

NUM_STAGES = 5
PE_MODES = ("enhanced", "stage", "none")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    depths: tuple[int, ...] = (2, 2, 2, 6, 2)
    channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    sub_len: tuple[int, ...] = (1024, 1024, 1024, 1024, 1024)
    patterns: tuple[str, ...] = ("z", "z-trans", "hilbert", "hilbert-trans")
    bidirectional: bool = False
    shuffle_patterns: bool = True
    num_classes: int = 5
    in_channels: int = 3
    grid_size: float = 0.02
    pre_norm: bool = True
    decoder_depths: tuple[int, ...] = (1, 1, 1, 1)
    decoder_channels: tuple[int, ...] = (64, 64, 128, 256)
    pool_factor: int = 2
    pool_reduce: str = "mean"
    pe_mode: str = "enhanced"
    expand: int = 2
    conv_width: int = 4
    d_state: int = 16
    mlp_ratio: int = 4
    zoh_exact: bool = True
    use_d_skip: bool = True

    def __post_init__(self):
        for name in ("depths", "channels", "sub_len", "patterns", "decoder_depths", "decoder_channels"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        for name in ("depths", "channels", "sub_len"):
            if len(getattr(self, name)) != NUM_STAGES:
                raise ConfigError(f"{name} must have {NUM_STAGES} entries")
        for name in ("decoder_depths", "decoder_channels"):
            if len(getattr(self, name)) != NUM_STAGES - 1:
                raise ConfigError(f"{name} must have {NUM_STAGES - 1} entries")
        if min(self.depths) < 1 or min(self.channels) < 1 or min(self.sub_len) < 1:
            raise ConfigError("depths, channels and sub_len must be positive")
        if any(b < a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError("encoder channels must be non-decreasing")
        if min(self.decoder_depths) < 0 or min(self.decoder_channels) < 1:
            raise ConfigError("invalid decoder arrays")
        if not self.patterns:
            raise ConfigError("at least one serialization pattern is required")
        try:
            for p in self.patterns:
                SerializationPattern.parse(p)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.num_classes < 1 or self.in_channels < 1:
            raise ConfigError("num_classes and in_channels must be positive")
        if self.grid_size <= 0:
            raise ConfigError("grid_size must be positive")
        if self.pool_factor < 1:
            raise ConfigError("pool_factor must be >= 1")
        if self.pool_reduce not in ("mean", "max"):
            raise ConfigError("pool_reduce must be 'mean' or 'max'")
        if self.pe_mode not in PE_MODES:
            raise ConfigError(f"pe_mode must be one of {PE_MODES}")
        if self.conv_width < 1 or self.expand < 1 or self.d_state < 1 or self.mlp_ratio < 1:
            raise ConfigError("expand, conv_width, d_state and mlp_ratio must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


PRESETS = {
    "base": {},
    "tiny": {"bidirectional": True, "channels": (192,) * 5, "decoder_channels": (192,) * 4},
    "micro": {
        "depths": (1, 1, 1, 1, 1),
        "channels": (4, 4, 4, 4, 4),
        "decoder_channels": (4, 4, 4, 4),
        "d_state": 4,
        "mlp_ratio": 2,
        "shuffle_patterns": False,
    },
}


def preset(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    return ModelConfig(**{**PRESETS[name], **overrides})


def _block_cfg(cfg: ModelConfig, channels: int, sub_len: int, pattern: SerializationPattern, cpe: bool) -> BlockConfig:
    return BlockConfig(
        channels=channels,
        expand=cfg.expand,
        conv_width=cfg.conv_width,
        d_state=cfg.d_state,
        bidirectional=cfg.bidirectional,
        pattern=pattern,
        sub_len=sub_len,
        pre_norm=cfg.pre_norm,
        mlp_ratio=cfg.mlp_ratio,
        zoh_exact=cfg.zoh_exact,
        use_d_skip=cfg.use_d_skip,
        cpe=cpe,
    )


def _has_cpe(cfg: ModelConfig, block_index: int) -> bool:
    if cfg.pe_mode == "enhanced":
        return True
    return cfg.pe_mode == "stage" and block_index == 0


@dataclass
class Model:
    cfg: ModelConfig
    params: ParamStore
    seed: int = 0

    def block_configs(self, patterns: list[SerializationPattern] | None = None):
        """``(param prefix, stage index, BlockConfig)`` for every encoder then decoder block.

        Patterns are assigned round-robin in block order within each stage.
        """
        cfg = self.cfg
        pats = patterns or [SerializationPattern.parse(p) for p in cfg.patterns]
        out = []
        for s in range(NUM_STAGES):
            for b in range(cfg.depths[s]):
                out.append((f"stage{s + 1}.block{b}", s,
                            _block_cfg(cfg, cfg.channels[s], cfg.sub_len[s], pats[b % len(pats)], _has_cpe(cfg, b))))
        for s in range(NUM_STAGES - 1):
            for b in range(cfg.decoder_depths[s]):
                out.append((f"dec{s + 1}.block{b}", s,
                            _block_cfg(cfg, cfg.decoder_channels[s], cfg.sub_len[s], pats[b % len(pats)], _has_cpe(cfg, b))))
        return out


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Deterministically initialise every parameter from ``seed``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    store = ParamStore()
    c0 = cfg.channels[0]
    bound = 1.0 / np.sqrt(27 * cfg.in_channels)
    store.add("stem.conv.weight", rng.uniform(-bound, bound, size=(27, cfg.in_channels, c0)))
    store.add("stem.conv.bias", np.zeros(c0))
    init_norm(store, "stem.norm", c0)
    model = Model(cfg, store, seed)
    blocks = {name: bc for name, _, bc in model.block_configs()}
    for s in range(NUM_STAGES):
        if s > 0:
            init_linear(store, rng, f"stage{s + 1}.down.proj", cfg.channels[s - 1], cfg.channels[s])
            init_norm(store, f"stage{s + 1}.down.norm", cfg.channels[s])
        for b in range(cfg.depths[s]):
            name = f"stage{s + 1}.block{b}"
            init_block(store, rng, name, blocks[name])
    for s in range(NUM_STAGES - 2, -1, -1):
        below = cfg.channels[NUM_STAGES - 1] if s == NUM_STAGES - 2 else cfg.decoder_channels[s + 1]
        init_linear(store, rng, f"dec{s + 1}.fuse", below + cfg.channels[s], cfg.decoder_channels[s])
        init_norm(store, f"dec{s + 1}.norm", cfg.decoder_channels[s])
        for b in range(cfg.decoder_depths[s]):
            name = f"dec{s + 1}.block{b}"
            init_block(store, rng, name, blocks[name])
    init_linear(store, rng, "head", cfg.decoder_channels[0], cfg.num_classes)
    return model


# -- geometry ------------------------------------------------------------------

@dataclass
class ScenePyramid:
    """Parameter-independent geometry of one voxelized cloud at every stage."""

    levels: list[VoxelSet]
    pool_maps: list[PoolingMap | None]  # pool_maps[s] maps stage s-1 rows to stage s rows
    tables: list[np.ndarray]
    _orders: dict = field(default_factory=dict)

    def order(self, stage: int, pattern: SerializationPattern) -> SerializationOrder:
        key = (stage, pattern)
        if key not in self._orders:
            self._orders[key] = order_points(self.levels[stage].cells, pattern)
        return self._orders[key]

    @property
    def base(self) -> VoxelSet:
        return self.levels[0]


def build_pyramid(vs: VoxelSet, pool_factor: int = 2) -> ScenePyramid:
    levels, maps = [vs], [None]
    for _ in range(1, NUM_STAGES):
        coarse, pmap = pool_geometry(levels[-1], pool_factor)
        levels.append(coarse)
        maps.append(pmap)
    return ScenePyramid(levels, maps, [lv.neighbor_table for lv in levels])


def prepare(pc: PointCloud, cfg: ModelConfig) -> ScenePyramid:
    if pc.feat_dim != cfg.in_channels:
        raise ConfigError(f"cloud has {pc.feat_dim} feature channels, model expects {cfg.in_channels}")
    return build_pyramid(voxelize(pc, cfg.grid_size), cfg.pool_factor)


# -- forward -------------------------------------------------------------------

@dataclass
class EncoderOutput:
    features: list[Tensor]
    pyramid: ScenePyramid
    patterns: list[SerializationPattern]


def _patterns_for_pass(cfg: ModelConfig, rng: np.random.Generator | None) -> list[SerializationPattern]:
    pats = [SerializationPattern.parse(p) for p in cfg.patterns]
    if cfg.shuffle_patterns and rng is not None:
        pats = [pats[i] for i in rng.permutation(len(pats))]
    return pats


def _run_block(model: Model, pyr: ScenePyramid, x: Tensor, name: str, stage: int, bcfg: BlockConfig) -> Tensor:
    order = pyr.order(stage, bcfg.pattern)
    return serialized_block(pyr.tables[stage], order, x, bcfg, scoped(model.params, name))


def stem_forward(model: Model, pyr: ScenePyramid) -> Tensor:
    p = model.params
    x = Tensor(pyr.base.cell_feats)
    x = submconv3d(pyr.tables[0], x, p["stem.conv.weight"], p["stem.conv.bias"])
    return T.silu(norm(x, p, "stem.norm"))


def encoder_forward(model: Model, pyr: ScenePyramid, x: Tensor, patterns=None) -> EncoderOutput:
    """Stage s: grid pool (from stage 2 on), then the stage's serialized blocks."""
    cfg, p = model.cfg, model.params
    blocks = model.block_configs(patterns)
    feats = []
    for s in range(NUM_STAGES):
        if s > 0:
            x = pool_features(x, pyr.pool_maps[s], cfg.pool_reduce)
            x = norm(linear(x, p, f"stage{s + 1}.down.proj"), p, f"stage{s + 1}.down.norm")
        for name, stage, bcfg in blocks:
            if stage == s and name.startswith("stage"):
                x = _run_block(model, pyr, x, name, s, bcfg)
        feats.append(x)
    return EncoderOutput(feats, pyr, patterns or [SerializationPattern.parse(q) for q in cfg.patterns])


def decoder_forward(model: Model, enc: EncoderOutput) -> Tensor:
    """Coarsest to finest: unpool, concatenate the skip, fuse, decoder blocks."""
    p = model.params
    pyr = enc.pyramid
    blocks = model.block_configs(enc.patterns)
    y = enc.features[-1]
    for s in range(NUM_STAGES - 2, -1, -1):
        up = grid_unpool(y, pyr.pool_maps[s + 1])
        y = T.concat([up, enc.features[s]], axis=-1)
        y = norm(linear(y, p, f"dec{s + 1}.fuse"), p, f"dec{s + 1}.norm")
        for name, stage, bcfg in blocks:
            if stage == s and name.startswith("dec"):
                y = _run_block(model, pyr, y, name, s, bcfg)
    return y


def voxel_logits(model: Model, pyr: ScenePyramid, rng: np.random.Generator | None = None) -> Tensor:
    patterns = _patterns_for_pass(model.cfg, rng)
    enc = encoder_forward(model, pyr, stem_forward(model, pyr), patterns)
    return linear(decoder_forward(model, enc), model.params, "head")


def segment_forward(model: Model, pc_or_pyr, rng: np.random.Generator | None = None) -> Tensor:
    """Per-point logits ``[N, num_classes]``; voxel logits are broadcast to member points."""
    pyr = pc_or_pyr if isinstance(pc_or_pyr, ScenePyramid) else prepare(pc_or_pyr, model.cfg)
    return T.take_rows(voxel_logits(model, pyr, rng), pyr.base.point_to_cell)
