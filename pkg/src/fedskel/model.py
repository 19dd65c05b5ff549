"""Lite spatio-temporal graph-convolution backbone and local classifier.

The backbone is a stack of M exclusive blocks. Each block applies a
partitioned spatial graph convolution (fixed-adjacency-with-attention in
vanilla mode, or the ternary adjacency mixture in ats mode), batch
normalization, relu, and a strided per-joint temporal convolution. A global
average pool and a linear projection produce the motion feature; a separate
linear classifier maps features to per-client logits.

Parameters live in a flat, insertion-ordered dict keyed by stable names, which
is what makes bit-exact aggregation and checkpointing possible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import (
    Tensor,
    add,
    batchnorm,
    channel_mix,
    global_avg_pool,
    graph_mix,
    linear,
    mul,
    relu,
    temporal_conv1d,
)
from .topology import PARTITION_COUNT, PartitionedAdjacency, mix_adjacency

Array = np.ndarray

Params = dict[str, Tensor]

CONV_MODES = ("vanilla", "ats")
COEFF_MODES = ("learnable", "fixed")


@dataclass(frozen=True)
class ModelConfig:
    num_joints: int
    num_classes: int
    num_frames: int = 50
    in_channels: int = 3
    channels: tuple[int, ...] = (16, 32, 64)
    temporal_kernel: int = 9
    strides: tuple[int, ...] = (1, 2, 2)
    feature_dim: int = 128
    conv_mode: str = "ats"
    coeff_mode: str = "learnable"
    coeff_init: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if len(self.channels) < 2:
            raise ConfigError("model needs at least 2 blocks")
        if len(self.strides) != len(self.channels):
            raise ConfigError(
                f"{len(self.strides)} strides for {len(self.channels)} blocks"
            )
        if self.temporal_kernel % 2 == 0:
            raise ConfigError(f"temporal kernel must be odd, got {self.temporal_kernel}")
        if self.conv_mode not in CONV_MODES:
            raise ConfigError(f"unknown conv_mode '{self.conv_mode}'")
        if self.coeff_mode not in COEFF_MODES:
            raise ConfigError(f"unknown coeff_mode '{self.coeff_mode}'")
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "strides", tuple(self.strides))
        object.__setattr__(self, "coeff_init", tuple(float(c) for c in self.coeff_init))

    @property
    def num_blocks(self) -> int:
        return len(self.channels)


@dataclass
class ForwardTrace:
    block_outputs: list[Tensor]
    h: Tensor
    logits: Tensor | None


def block_output_shapes(cfg: ModelConfig) -> list[tuple[int, int, int]]:
    """(channels, frames, joints) after each block; pure stride arithmetic."""
    shapes = []
    t = cfg.num_frames
    for c, s in zip(cfg.channels, cfg.strides):
        t = -(-t // s)
        shapes.append((c, t, cfg.num_joints))
    return shapes


# ---------------------------------------------------------------------------
# Key namespace
# ---------------------------------------------------------------------------

_COEFF_SUFFIXES = (".ternary.alpha", ".ternary.beta", ".ternary.gamma")


def is_unique_key(key: str) -> bool:
    return ".ternary.U." in key


def is_coeff_key(key: str) -> bool:
    return key.endswith(_COEFF_SUFFIXES)


def is_classifier_key(key: str) -> bool:
    return key.startswith("classifier.")


def is_bn_key(key: str) -> bool:
    return ".bn." in key


def is_private_key(key: str) -> bool:
    """Keys that never leave the client: private topology, coefficients,
    and the local classifier."""
    return is_unique_key(key) or is_coeff_key(key) or is_classifier_key(key)


def aggregatable_keys(params: Params) -> list[str]:
    return [k for k in params if not is_private_key(k)]


def trainable_params(params: Params) -> Params:
    return {k: p for k, p in params.items() if p.requires_grad}


def clone_params(params: Params, requires_grad: bool | None = None) -> Params:
    out: Params = {}
    for k, p in params.items():
        rg = p.requires_grad if requires_grad is None else requires_grad
        out[k] = Tensor(p.data.copy(), requires_grad=rg)
    return out


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def _uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Array:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def init_shared_backbone(
    cfg: ModelConfig, parts: PartitionedAdjacency, rng: np.random.Generator
) -> Params:
    """Aggregatable backbone parameters: spatial weights, shared topology,
    attention maps (vanilla mode), batch-norm state, temporal kernels, and the
    feature projection."""
    if parts.joint_count != cfg.num_joints:
        raise ConfigError(
            f"adjacency for {parts.joint_count} joints, model expects {cfg.num_joints}"
        )
    p: Params = {}
    c_in = cfg.in_channels
    v = cfg.num_joints
    for b, c_out in enumerate(cfg.channels):
        for s in range(PARTITION_COUNT):
            p[f"blocks.{b}.spatial.W.{s}"] = Tensor(
                _uniform(rng, (c_out, c_in), c_in), requires_grad=True
            )
        if cfg.conv_mode == "ats":
            for s in range(PARTITION_COUNT):
                p[f"blocks.{b}.ternary.I.{s}"] = Tensor(
                    parts.mats[s].copy(), requires_grad=True
                )
        else:
            for s in range(PARTITION_COUNT):
                p[f"blocks.{b}.attn.{s}"] = Tensor(
                    np.ones((v, v), dtype=np.float32), requires_grad=True
                )
        p[f"blocks.{b}.bn.gamma"] = Tensor(np.ones(c_out, dtype=np.float32), requires_grad=True)
        p[f"blocks.{b}.bn.beta"] = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True)
        p[f"blocks.{b}.bn.running_mean"] = Tensor(np.zeros(c_out, dtype=np.float32))
        p[f"blocks.{b}.bn.running_var"] = Tensor(np.ones(c_out, dtype=np.float32))
        p[f"blocks.{b}.temporal.K"] = Tensor(
            _uniform(rng, (c_out, c_out, cfg.temporal_kernel), c_out * cfg.temporal_kernel),
            requires_grad=True,
        )
        c_in = c_out
    p["proj.weight"] = Tensor(_uniform(rng, (cfg.feature_dim, c_in), c_in), requires_grad=True)
    p["proj.bias"] = Tensor(np.zeros(cfg.feature_dim, dtype=np.float32), requires_grad=True)
    return p


UNIQUE_INIT_SCALE = 1e-2


def init_private_topology(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    """Per-client private matrices and mixing coefficients (ats mode only)."""
    if cfg.conv_mode != "ats":
        return {}
    learn = cfg.coeff_mode == "learnable"
    a0, b0, g0 = cfg.coeff_init
    v = cfg.num_joints
    p: Params = {}
    for b in range(cfg.num_blocks):
        for s in range(PARTITION_COUNT):
            p[f"blocks.{b}.ternary.U.{s}"] = Tensor(
                rng.uniform(-UNIQUE_INIT_SCALE, UNIQUE_INIT_SCALE, size=(v, v)).astype(
                    np.float32
                ),
                requires_grad=True,
            )
        p[f"blocks.{b}.ternary.alpha"] = Tensor(np.float32(a0), requires_grad=learn)
        p[f"blocks.{b}.ternary.beta"] = Tensor(np.float32(b0), requires_grad=learn)
        p[f"blocks.{b}.ternary.gamma"] = Tensor(np.float32(g0), requires_grad=learn)
    return p


def init_classifier(cfg: ModelConfig, rng: np.random.Generator) -> Params:
    return {
        "classifier.weight": Tensor(
            _uniform(rng, (cfg.num_classes, cfg.feature_dim), cfg.feature_dim),
            requires_grad=True,
        ),
        "classifier.bias": Tensor(np.zeros(cfg.num_classes, dtype=np.float32), requires_grad=True),
    }


def init_params(
    cfg: ModelConfig, parts: PartitionedAdjacency, rng: np.random.Generator
) -> Params:
    """Full single-model parameter set (backbone + private + classifier)."""
    p = init_shared_backbone(cfg, parts, rng)
    p.update(init_private_topology(cfg, rng))
    p.update(init_classifier(cfg, rng))
    return p


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _spatial_conv(
    params: Params,
    cfg: ModelConfig,
    parts: PartitionedAdjacency,
    block: int,
    f: Tensor,
    base_tensors: list[Tensor],
) -> Tensor:
    out: Tensor | None = None
    for s in range(PARTITION_COUNT):
        if cfg.conv_mode == "ats":
            adj = mix_adjacency(
                base_tensors[s],
                params.get(f"blocks.{block}.ternary.I.{s}"),
                params.get(f"blocks.{block}.ternary.U.{s}"),
                params.get(f"blocks.{block}.ternary.alpha"),
                params.get(f"blocks.{block}.ternary.beta"),
                params.get(f"blocks.{block}.ternary.gamma"),
            )
        else:
            adj = mul(params[f"blocks.{block}.attn.{s}"], base_tensors[s])
        term = channel_mix(graph_mix(f, adj), params[f"blocks.{block}.spatial.W.{s}"])
        out = term if out is None else add(out, term)
    assert out is not None
    return out


def _run_block(
    params: Params,
    cfg: ModelConfig,
    parts: PartitionedAdjacency,
    block: int,
    f: Tensor,
    base_tensors: list[Tensor],
    training: bool,
    update_stats: bool,
) -> Tensor:
    expected_c = cfg.in_channels if block == 0 else cfg.channels[block - 1]
    if f.data.ndim != 4 or f.data.shape[1] != expected_c or f.data.shape[3] != cfg.num_joints:
        raise DimensionError(
            f"block {block}: expected input [N, {expected_c}, T, {cfg.num_joints}], "
            f"got {f.data.shape}"
        )
    g = _spatial_conv(params, cfg, parts, block, f, base_tensors)
    g = batchnorm(
        g,
        params[f"blocks.{block}.bn.gamma"],
        params[f"blocks.{block}.bn.beta"],
        params[f"blocks.{block}.bn.running_mean"].data,
        params[f"blocks.{block}.bn.running_var"].data,
        training=training,
        update_stats=update_stats,
    )
    g = relu(g)
    return temporal_conv1d(g, params[f"blocks.{block}.temporal.K"], cfg.strides[block])


def recalibrate_bn_stats(
    params: Params,
    cfg: ModelConfig,
    parts: PartitionedAdjacency,
    x: Tensor | np.ndarray,
) -> None:
    """Overwrite BN running stats with the batch statistics of x, in place.

    One deterministic pass per block; each normalization layer then carries
    exactly the statistics of this reference batch instead of the lagged
    exponential average accumulated while the weights were still moving.
    """
    f = x if isinstance(x, Tensor) else Tensor(x)
    base_tensors = [Tensor(m) for m in parts.mats]
    for b in range(cfg.num_blocks):
        g = _spatial_conv(params, cfg, parts, b, f, base_tensors)
        np.copyto(
            params[f"blocks.{b}.bn.running_mean"].data, g.data.mean(axis=(0, 2, 3))
        )
        np.copyto(
            params[f"blocks.{b}.bn.running_var"].data, g.data.var(axis=(0, 2, 3))
        )
        g = batchnorm(
            g,
            params[f"blocks.{b}.bn.gamma"],
            params[f"blocks.{b}.bn.beta"],
            params[f"blocks.{b}.bn.running_mean"].data,
            params[f"blocks.{b}.bn.running_var"].data,
            training=False,
        )
        g = relu(g)
        f = temporal_conv1d(g, params[f"blocks.{b}.temporal.K"], cfg.strides[b])


def _head(params: Params, f: Tensor) -> tuple[Tensor, Tensor | None]:
    h = linear(global_avg_pool(f), params["proj.weight"], params["proj.bias"])
    logits = None
    if "classifier.weight" in params:
        logits = linear(h, params["classifier.weight"], params["classifier.bias"])
    return h, logits


def forward(
    params: Params,
    cfg: ModelConfig,
    parts: PartitionedAdjacency,
    x: Tensor,
    training: bool = False,
    update_stats: bool | None = None,
) -> ForwardTrace:
    """Run all blocks on an input batch [N, C_in, T, V]."""
    if update_stats is None:
        update_stats = training
    base_tensors = [Tensor(m) for m in parts.mats]
    f = x
    outputs: list[Tensor] = []
    for b in range(cfg.num_blocks):
        f = _run_block(params, cfg, parts, b, f, base_tensors, training, update_stats)
        outputs.append(f)
    h, logits = _head(params, f)
    return ForwardTrace(block_outputs=outputs, h=h, logits=logits)


def forward_from_block(
    params: Params,
    cfg: ModelConfig,
    parts: PartitionedAdjacency,
    mid_feature: Tensor,
    start_block: int,
    training: bool = False,
    update_stats: bool | None = None,
) -> ForwardTrace:
    """Run blocks start_block..M-1 on a mid-level feature, then the head.

    start_block = M runs the head only (the feature is a final-block output).
    """
    m = cfg.num_blocks
    if not 1 <= start_block <= m:
        raise DimensionError(f"start_block {start_block} out of range [1, {m}]")
    if update_stats is None:
        update_stats = training
    expected = block_output_shapes(cfg)[start_block - 1]
    if mid_feature.data.ndim != 4 or mid_feature.data.shape[1:] != expected:
        raise DimensionError(
            f"mid feature {mid_feature.data.shape} does not match block "
            f"{start_block - 1} output {expected}"
        )
    base_tensors = [Tensor(mat) for mat in parts.mats]
    f = mid_feature
    outputs: list[Tensor] = []
    for b in range(start_block, m):
        f = _run_block(params, cfg, parts, b, f, base_tensors, training, update_stats)
        outputs.append(f)
    h, logits = _head(params, f)
    return ForwardTrace(block_outputs=outputs, h=h, logits=logits)
