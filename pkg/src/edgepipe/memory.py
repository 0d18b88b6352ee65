"""
Closed-form memory accounting for a pipeline stage.

Peak bytes on stage s of S::

    params * (1 + stash_depth) + activations * in_flight + gradient scratch

with ``stash_depth = in_flight = S - s``. ``activations`` counts every
tensor the autograd graph of one batch keeps alive (op outputs plus the
hidden buffers of layer_norm and cross_entropy), derived op by op from the
encoder's forward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .attention import FUSED, Segment
from .model import EncoderConfig, group_shapes, stage_groups
from .partition import StageSpec


def _segment_elems(cfg: EncoderConfig, batch: int, seg: Segment) -> int:
    B, n, d, dh = batch, cfg.seq_len, cfg.d_model, cfg.d_head
    k = seg.heads
    score_nodes = 3 if cfg.scaled_attention else 2  # scores, [scale], softmax
    if seg.mode == FUSED:
        weight_concat = 3 * d * k * dh if k > 1 else 0
        # q, k, v: matmul + reshape + permute each; z: matmul + permute + reshape
        return weight_concat + 12 * B * n * k * dh + score_nodes * B * k * n * n
    # per head: q, k, v, k^T, z
    per_head = 5 * B * n * dh + score_nodes * B * n * n
    return k * per_head + (B * n * k * dh if k > 1 else 0)


def block_activation_elems(cfg: EncoderConfig, batch: int, segments: Sequence[Segment]) -> int:
    B, n, d, f = batch, cfg.seq_len, cfg.d_model, cfg.d_ff
    attn = sum(_segment_elems(cfg, batch, s) for s in segments)
    if len(segments) > 1:
        attn += B * n * d  # concat of lane outputs
    # ln1 (+xhat), residual, ln2 (+xhat), ffn out matmul + bias, residual; hidden matmul + bias + relu
    return attn + 8 * B * n * d + 3 * B * n * f


def stage_activation_elems(cfg: EncoderConfig, spec: StageSpec, batch: int, segments: Sequence[Segment]) -> int:
    B, n, d, C = batch, cfg.seq_len, cfg.d_model, cfg.classes
    total = 3 * B * n * d if spec.is_first else B * n * d  # embeddings + sum, or the received activation
    total += spec.blocks * block_activation_elems(cfg, batch, segments)
    if spec.is_last:
        total += B * d + 2 * B * C + B * C + 1  # position-0 slice, logits, +bias, softmax probs, loss
    return total


def stage_param_elems(cfg: EncoderConfig, spec: StageSpec) -> int:
    total = 0
    for g in stage_groups(cfg, spec.lo, spec.hi, spec.is_first, spec.is_last):
        for _, shape in group_shapes(cfg, g):
            size = 1
            for s in shape:
                size *= s
            total += size
    return total


@dataclass(frozen=True)
class MemoryBreakdown:
    params: int
    stash: int
    activations: int
    scratch: int
    stash_depth: int
    in_flight: int
    activation_per_batch: int

    @property
    def total(self) -> int:
        return self.params + self.stash + self.activations + self.scratch

    def to_json(self) -> dict:
        return {
            "params": self.params,
            "stash": self.stash,
            "activations": self.activations,
            "scratch": self.scratch,
            "stash_depth": self.stash_depth,
            "in_flight": self.in_flight,
            "total": self.total,
        }


def account_memory(
    spec: StageSpec,
    cfg: EncoderConfig,
    batch_size: int,
    S: Optional[int] = None,
    segments: Optional[Sequence[Segment]] = None,
) -> MemoryBreakdown:
    """Peak bytes for one stage; ``segments`` describes how each block's attention is split."""
    S = spec.num_stages if S is None else S
    segments = list(segments) if segments else [Segment(0, 0, cfg.heads, FUSED)]
    itemsize = cfg.np_dtype.itemsize
    depth = S - spec.stage_index
    params = stage_param_elems(cfg, spec) * itemsize
    act = stage_activation_elems(cfg, spec, batch_size, segments) * itemsize
    return MemoryBreakdown(
        params=params,
        stash=params * depth,
        activations=act * depth,
        scratch=params,
        stash_depth=depth,
        in_flight=depth,
        activation_per_batch=act,
    )


def single_device_memory(cfg: EncoderConfig, batch_size: int, segments: Optional[Sequence[Segment]] = None) -> MemoryBreakdown:
    return account_memory(StageSpec(0, 0, cfg.layers, 1), cfg, batch_size, 1, segments)
