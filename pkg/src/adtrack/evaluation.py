"""Accuracy metrics, the analytic FLOPs cost model, and trade-off curves.

The cost model counts floating-point multiplications only: convolutions
(c_out*c_in*9 per output cell) and correlations (81 cells * channels * 64
key cells). Key-pathway work is charged once per key-search batch, search
work once per frame. Gate features, map mixing, and the intermediate
correlation maps consumed by gates are charged as zero, matching the
treatment of gate computation as negligible.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import geometry as G
from .backbone import BackboneConfig, config_from_preset
from .errors import ContractViolation
from .geometry import BoxAA


def iou(a: BoxAA, b: BoxAA) -> float:
    """Intersection over union of two axis-aligned boxes."""
    if a.w <= 0 or a.h <= 0 or b.w <= 0 or b.h <= 0:
        raise ContractViolation("boxes must have positive extents")
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_at_k(pred_groups, gt_groups, k: int) -> float:
    """Mean IOU over the first min(k, available) search frames per key
    group, then the mean over groups."""
    if k < 1:
        raise ContractViolation(f"k must be positive, got {k}")
    if not pred_groups or len(pred_groups) != len(gt_groups):
        raise ContractViolation("prediction and ground-truth groups must align")
    per_group = []
    for preds, gts in zip(pred_groups, gt_groups):
        if len(preds) != len(gts):
            raise ContractViolation("group lengths differ between prediction and truth")
        if not preds:
            continue
        take = min(k, len(preds))
        per_group.append(float(np.mean([iou(p, g) for p, g in zip(preds[:take], gts[:take])])))
    if not per_group:
        raise ContractViolation("no non-empty key groups to evaluate")
    return float(np.mean(per_group))


@dataclass(frozen=True)
class CostModel:
    """Multiply counts for one backbone geometry at fixed crop resolutions."""

    config: BackboneConfig
    key_res: tuple
    search_res: tuple
    batch: int
    key_block_mults: tuple     # per key frame, one entry per block
    search_block_mults: tuple  # per search frame, one entry per block
    corr_mults: tuple          # per search frame, one entry per depth

    @classmethod
    def build(cls, config, key_res=(G.KEY_CROP, G.KEY_CROP),
              search_res=(G.SEARCH_CROP, G.SEARCH_CROP), batch=25):
        if isinstance(config, str):
            config = config_from_preset(config)
        if batch < 1:
            raise ContractViolation("batch must be positive")

        def block_mults(res):
            h, w = res
            mults, c_in = [], config.input_channels
            for b in config.blocks:
                total = 0
                for _ in range(b.conv_count):
                    total += b.channels * c_in * 9 * h * w
                    c_in = b.channels
                mults.append(float(total))
                if b.followed_by_pool:
                    h, w = h // 2, w // 2
            return tuple(mults)

        corr = tuple(
            float(G.MAP_SIZE * G.MAP_SIZE * b.channels * G.KEY_DOWN * G.KEY_DOWN)
            for b in config.blocks
        )
        return cls(config=config, key_res=tuple(key_res), search_res=tuple(search_res),
                   batch=batch, key_block_mults=block_mults(key_res),
                   search_block_mults=block_mults(search_res), corr_mults=corr)

    def fixed_batch(self, depth: int) -> float:
        """Batch cost of evaluating both pathways to ``depth`` and
        correlating once per frame at that depth."""
        if not 1 <= depth <= len(self.config.blocks):
            raise ContractViolation(f"depth must be in [1,5], got {depth}")
        key = sum(self.key_block_mults[:depth])
        search = sum(self.search_block_mults[:depth])
        return key + self.batch * (search + self.corr_mults[depth - 1])

    def soft_batch(self) -> float:
        """Full-depth cost plus correlations at every depth."""
        key = sum(self.key_block_mults)
        search = sum(self.search_block_mults)
        return key + self.batch * (search + sum(self.corr_mults))

    def fixed_frame(self, depth: int) -> float:
        return self.fixed_batch(depth) / self.batch

    def per_frame_fixed(self):
        return np.array([self.fixed_frame(d) for d in range(1, len(self.config.blocks) + 1)])

    def ratios(self):
        base = self.fixed_batch(1)
        return np.array([self.fixed_batch(d) / base
                         for d in range(1, len(self.config.blocks) + 1)])

    def soft_ratio(self):
        return self.soft_batch() / self.fixed_batch(1)

    def incremental_ratios(self):
        """p_i: successive differences of the fixed-depth ratios, p_1 = 1."""
        r = self.ratios()
        return np.concatenate(([r[0]], np.diff(r)))


@lru_cache(maxsize=None)
def _default_cost_model():
    return CostModel.build("vgg19-track")


def default_gate_costs():
    """Default p_i, derived from the full-scale geometry's cost model."""
    return _default_cost_model().incremental_ratios().copy()


def flops(config, policy, key_res=(G.KEY_CROP, G.KEY_CROP),
          search_res=(G.SEARCH_CROP, G.SEARCH_CROP), batch=25, depth_trace=None) -> float:
    """Batch multiply count for one policy.

    ``policy`` is ``"fixed:<d>"``, ``"soft"``, or ``"hard"``;
    hard gating needs ``depth_trace``, the per-frame halting depths, and is
    charged as the trace-average of the fixed-depth batch costs.
    """
    model = CostModel.build(config, key_res, search_res, batch)
    if isinstance(policy, str) and policy.startswith("fixed:"):
        return model.fixed_batch(int(policy.split(":", 1)[1]))
    if policy == "soft":
        return model.soft_batch()
    if policy == "hard":
        if depth_trace is None or len(depth_trace) == 0:
            raise ContractViolation("hard-gating flops needs a non-empty depth trace")
        return float(np.mean([model.fixed_batch(int(d)) for d in depth_trace]))
    raise ContractViolation(f"unknown policy descriptor {policy!r}")


@dataclass(frozen=True)
class CurvePoint:
    policy: str
    param: str
    k: int
    iou: float
    flops: float


CURVE_CSV_HEADER = "policy,param,k,iou,flops"


def curve_rows(points):
    yield CURVE_CSV_HEADER
    for p in points:
        yield f"{p.policy},{p.param},{p.k},{p.iou!r},{p.flops!r}"


def pareto_curve(weights, gate_sets, dataset, k: int = 25, thresholds=(0.5,),
                 batch: int = 25, key_stride: int = 10, horizon: int = 100):
    """Curve points for all five fixed depths, soft gating per gate set, and
    hard gating per (gate set, threshold), sorted by FLOPs.

    ``gate_sets`` maps a parameter label (e.g. "lam=0.75") to GateParams.
    """
    from . import tracker  # local import: tracker builds on this module

    points = []
    for d in range(1, 6):
        res = tracker.track_dataset(weights, dataset, f"fixed:{d}", batch=batch,
                                    key_stride=key_stride, horizon=horizon)
        points.append(CurvePoint(f"fixed:{d}", "", k, tracker.iou_at(res, k),
                                 tracker.mean_batch_flops(res, batch)))
    for label, gates in gate_sets.items():
        res = tracker.track_dataset(weights, dataset, "soft", gates=gates, batch=batch,
                                    key_stride=key_stride, horizon=horizon)
        points.append(CurvePoint("soft", label, k, tracker.iou_at(res, k),
                                 tracker.mean_batch_flops(res, batch)))
        for thr in thresholds:
            res = tracker.track_dataset(weights, dataset, "hard", gates=gates,
                                        threshold=thr, batch=batch,
                                        key_stride=key_stride, horizon=horizon)
            label_thr = f"{label};thr={thr:g}" if label else f"thr={thr:g}"
            points.append(CurvePoint("hard", label_thr, k, tracker.iou_at(res, k),
                                     tracker.mean_batch_flops(res, batch)))
    return sorted(points, key=lambda p: p.flops)
