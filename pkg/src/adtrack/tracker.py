"""Run a gating policy over whole sequences and collect per-frame records."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dataio, evaluation, xcorr
from .backbone import BackboneWeights
from .errors import ContractViolation
from .gating import (FrameContext, GateParams, run_fixed_depth, run_hard_gating,
                     run_soft_gating)
from .geometry import BoxAA


@dataclass(frozen=True)
class FrameRecord:
    seq: str
    key_frame: int
    frame: int
    depth_used: int
    iou: float
    flops: float      # per-frame charge (batch cost / batch)
    box: BoxAA
    scores: tuple     # budgeted scores computed for this frame


def _parse_policy(policy):
    if policy == "soft" or policy == "hard":
        return policy, None
    if isinstance(policy, str) and policy.startswith("fixed:"):
        depth = int(policy.split(":", 1)[1])
        if not 1 <= depth <= 5:
            raise ContractViolation(f"fixed depth must be in [1,5], got {depth}")
        return "fixed", depth
    raise ContractViolation(f"unknown policy {policy!r} (want fixed:<d>|soft|hard)")


def track_sequence(weights: BackboneWeights, seq, policy, gates: GateParams | None = None,
                   threshold: float = 0.5, batch: int = 25,
                   key_stride: int = 10, horizon: int = 100):
    """Track one sequence under a policy; returns FrameRecords.

    Keys are re-anchored every ``key_stride`` frames; within a key group each
    search crop is centered on the previous frame's *predicted* center. The
    key-side backbone cache is shared across the group, so key blocks run at
    most once per group and only as deep as some frame required.
    """
    kind, fixed_depth = _parse_policy(policy)
    if kind in ("soft", "hard") and gates is None:
        raise ContractViolation(f"{kind} gating requires gate parameters")
    cost = evaluation.CostModel.build(weights.config, batch=batch)
    per_frame_fixed = cost.per_frame_fixed()
    soft_frame = cost.soft_batch() / batch

    records = []
    for key_idx, search_idxs in dataio.make_key_search_pairs(seq, key_stride, horizon):
        key_box = seq.gt[key_idx]
        key_crop, geom = dataio.crop_key(seq.frames[key_idx], key_box, seq.mean_rgb)
        key_cache = None
        prev_center = key_box.center
        for si in search_idxs:
            search_crop, geom_s = dataio.crop_search(seq.frames[si], prev_center, geom)
            ctx = FrameContext(
                weights=weights, key_image=key_crop, search_image=search_crop,
                flops_fixed_frame=per_frame_fixed, flops_soft_frame=soft_frame,
                key_cache=key_cache,
            )
            if kind == "fixed":
                outcome = run_fixed_depth(ctx, fixed_depth)
            elif kind == "soft":
                outcome = run_soft_gating(ctx, gates)
            else:
                outcome = run_hard_gating(ctx, gates, threshold)
            key_cache = ctx.key_cache
            box = xcorr.map_to_box(outcome.map, key_box, geom_s)
            records.append(FrameRecord(
                seq=seq.name, key_frame=key_idx, frame=si,
                depth_used=outcome.depth_used,
                iou=evaluation.iou(box, seq.gt[si]),
                flops=outcome.flops_charged,
                box=box, scores=outcome.budgeted_scores,
            ))
            prev_center = box.center
    return records


def track_dataset(weights, seqs, policy, gates=None, threshold=0.5, batch=25,
                  key_stride=10, horizon=100):
    out = []
    for seq in seqs:
        out.extend(track_sequence(weights, seq, policy, gates=gates, threshold=threshold,
                                  batch=batch, key_stride=key_stride, horizon=horizon))
    return out


def _grouped(records):
    groups = {}
    for r in records:
        groups.setdefault((r.seq, r.key_frame), []).append(r)
    for g in groups.values():
        g.sort(key=lambda r: r.frame)
    return list(groups.values())


def iou_at(records, k: int) -> float:
    """IOU@k over recorded frames (first k search frames of each key group)."""
    groups = _grouped(records)
    per_group = [float(np.mean([r.iou for r in g[:k]])) for g in groups if g]
    if not per_group:
        raise ContractViolation("no frames recorded")
    return float(np.mean(per_group))


def mean_batch_flops(records, batch: int = 25) -> float:
    """Average cost per key-search batch implied by per-frame charges."""
    if not records:
        raise ContractViolation("no frames recorded")
    return float(np.mean([r.flops for r in records]) * batch)


def depth_histogram(records):
    hist = np.zeros(5, dtype=int)
    for r in records:
        hist[r.depth_used - 1] += 1
    return hist
