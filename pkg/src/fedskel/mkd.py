"""Multi-grain teacher streams built from the frozen server snapshot.

For each grain m = 1..b, the first m blocks of the server model produce a
mid-level feature which is grafted into the remaining client blocks and the
client classifier. The resulting teacher logits supervise the student through
a KL term (teacher treated as a fixed target) and an extra cross-entropy term
whose gradient flows into everything client-owned on the path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, GraftingError
from .model import ModelConfig, Params, PartitionedAdjacency, forward, forward_from_block
from .tensor import Tensor, add, cross_entropy, kl_to_student, scale, softmax_rows

Array = np.ndarray


@dataclass(frozen=True)
class MkdConfig:
    grain_count: int = 2
    kd_temperature: float = 1.0

    def __post_init__(self):
        if self.grain_count < 0:
            raise ConfigError(f"grain count must be nonnegative, got {self.grain_count}")
        if self.kd_temperature <= 0:
            raise ConfigError(f"kd temperature must be positive, got {self.kd_temperature}")


@dataclass
class TeacherStream:
    grain: int
    mid_feature: Tensor  # server-produced, detached from the server
    logits: Tensor  # through client deep blocks + client classifier


def build_teacher_streams(
    server_params: Params,
    client_params: Params,
    cfg: ModelConfig,
    parts: PartitionedAdjacency,
    x: Tensor,
    mkd_cfg: MkdConfig,
) -> list[TeacherStream]:
    """Teacher streams for grains 1..grain_count.

    The server side runs with batch statistics and without touching running
    stats, so the snapshot stays bitwise frozen and the self-teacher identity
    holds against a student forward in training mode.
    """
    if mkd_cfg.grain_count == 0:
        return []
    if mkd_cfg.grain_count >= cfg.num_blocks:
        raise ConfigError(
            f"grain count {mkd_cfg.grain_count} must be < {cfg.num_blocks} blocks"
        )
    server_trace = forward(
        server_params, cfg, parts, x, training=True, update_stats=False
    )
    streams: list[TeacherStream] = []
    for m in range(1, mkd_cfg.grain_count + 1):
        f_gm = server_trace.block_outputs[m - 1].detach()
        try:
            trace = forward_from_block(
                client_params, cfg, parts, f_gm, start_block=m,
                training=True, update_stats=False,
            )
        except DimensionError as exc:
            raise GraftingError(
                f"server block {m} output does not fit client block {m + 1}: {exc}"
            ) from exc
        if trace.logits is None:
            raise GraftingError("client parameters carry no classifier")
        streams.append(TeacherStream(grain=m, mid_feature=f_gm, logits=trace.logits))
    return streams


def kd_loss(
    streams: list[TeacherStream], student_logits: Tensor, temperature: float = 1.0
) -> Tensor:
    """Sum over grains of KL(teacher || student), teacher gradient-detached."""
    inv_t = 1.0 / temperature
    total: Tensor | None = None
    for stream in streams:
        teacher_probs = softmax_rows(scale(stream.logits.detach(), inv_t)).data
        term = kl_to_student(teacher_probs, scale(student_logits, inv_t))
        total = term if total is None else add(total, term)
    if total is None:
        return Tensor(np.float32(0.0))
    return total


def dual_ce_loss(
    streams: list[TeacherStream], student_logits: Tensor, labels: Array
) -> Tensor:
    """CE of the student plus CE of every teacher stream, batch-averaged per term."""
    total = cross_entropy(student_logits, labels)
    for stream in streams:
        total = add(total, cross_entropy(stream.logits, labels))
    return total
