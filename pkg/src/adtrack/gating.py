"""Gate features, budgeted confidence scores, and the runtime policies.

A gate is a linear predictor over 12 cheap statistics of a correlation map
(kurtosis, entropy, top-5 values, first 5 central moments) plus a bias,
squashed by a sigmoid. Budgeting rescales the four gate scores so that,
together with the parameterless depth-5 residual, they sum to one; a
confident shallow gate therefore suppresses deeper computation.

Policies:

* fixed depth  - always evaluate exactly d blocks.
* soft gating  - evaluate everything, emit the budget-weighted map mixture.
* hard gating  - deepen incrementally, halting at the first gate whose
  budgeted score clears the threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone as B
from . import xcorr as X
from .errors import ContractViolation

NUM_FEATURES = 12
NUM_GATES = 4  # gate 5 is the parameterless residual

DEFAULT_THRESHOLDS = (0.25, 0.5, 0.75)


@dataclass(frozen=True)
class GateFeatures:
    kurtosis: float
    entropy: float
    top5: np.ndarray     # five largest map values, descending
    moments: np.ndarray  # central moments m1..m5, m1 = mean

    def as_vector(self):
        return np.concatenate(([self.kurtosis, self.entropy], self.top5, self.moments))


@dataclass(frozen=True)
class GateParams:
    """Weight vectors phi_1..phi_4, each 12 features + 1 bias."""

    phi: np.ndarray  # (4, 13)

    def __post_init__(self):
        if self.phi.shape != (NUM_GATES, NUM_FEATURES + 1):
            raise ContractViolation(
                f"phi must be ({NUM_GATES},{NUM_FEATURES + 1}), got {self.phi.shape}"
            )

    @classmethod
    def zeros(cls):
        return cls(phi=np.zeros((NUM_GATES, NUM_FEATURES + 1)))


def extract_gate_features(xmap) -> GateFeatures:
    """Statistics of a rescaled ([0,1]) correlation map.

    Kurtosis is Pearson m4/m2^2 and guarded to 0 for near-constant maps;
    entropy is over the L1-normalized map in nats with 0*log0 == 0.
    """
    v = np.asarray(xmap.map if isinstance(xmap, X.XcorrMap) else xmap, dtype=float).ravel()
    m1 = v.mean()
    d = v - m1
    moments = np.array([m1, (d**2).mean(), (d**3).mean(), (d**4).mean(), (d**5).mean()])
    m2 = moments[1]
    kurtosis = 0.0 if m2 < 1e-12 else float(moments[3] / (m2 * m2))
    total = v.sum()
    if total < 1e-12:
        entropy = 0.0
    else:
        p = v / total
        nz = p[p > 0]
        entropy = float(-(nz * np.log(nz)).sum())
    top5 = np.sort(v)[-5:][::-1].copy()
    return GateFeatures(kurtosis=kurtosis, entropy=entropy, top5=top5, moments=moments)


def sigmoid(z):
    # stable in both tails
    out = np.empty_like(z, dtype=float) if isinstance(z, np.ndarray) else None
    if out is None:
        return float(1.0 / (1.0 + np.exp(-z))) if z >= 0 else float(np.exp(z) / (1.0 + np.exp(z)))
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gate_score(features: GateFeatures, phi_i) -> float:
    """Confidence in (0,1) for halting at one depth."""
    phi_i = np.asarray(phi_i, dtype=float)
    if phi_i.shape != (NUM_FEATURES + 1,):
        raise ContractViolation(f"phi must have length {NUM_FEATURES + 1}")
    z = float(features.as_vector() @ phi_i[:-1] + phi_i[-1])
    return sigmoid(z)


def budget_scores(raw):
    """Budgeted scores g*_1..g*_5 from raw gate scores g_1..g_4.

    g*_1 = g_1; g*_i = (1 - sum_{j<i} g*_j) * g_i; g*_5 is the remainder,
    so the five scores sum to 1 and g*_i only depends on g_1..g_i.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.shape != (NUM_GATES,):
        raise ContractViolation(f"expected {NUM_GATES} raw scores, got shape {raw.shape}")
    if np.any(raw < 0) or np.any(raw > 1):
        raise ContractViolation("raw gate scores must lie in [0,1]")
    out = np.zeros(NUM_GATES + 1)
    used = 0.0
    for i in range(NUM_GATES):
        out[i] = (1.0 - used) * raw[i]
        used += out[i]
    out[NUM_GATES] = 1.0 - used
    return out


@dataclass
class FrameContext:
    """Everything a policy needs to process one search frame.

    ``key_cache`` is shared across the frames of a key group and deepened
    lazily, so key blocks are only ever computed once per group and only to
    the depth some frame actually needed. ``flops_fixed_frame[d-1]`` is the
    cost-model charge for one frame processed at fixed depth d.
    """

    weights: B.BackboneWeights
    key_image: np.ndarray
    search_image: np.ndarray
    flops_fixed_frame: np.ndarray
    flops_soft_frame: float
    key_cache: B.BlockCache | None = None
    search_cache: B.BlockCache | None = None

    def taps_at(self, depth):
        key_tap, self.key_cache = B.forward_taps_with_cache(
            self.weights, self.key_image, self.key_cache, depth
        )
        search_tap, self.search_cache = B.forward_taps_with_cache(
            self.weights, self.search_image, self.search_cache, depth
        )
        return key_tap, search_tap

    def map_at(self, depth):
        key_tap, search_tap = self.taps_at(depth)
        return X.make_xcorr_map(key_tap, search_tap, depth)


@dataclass(frozen=True)
class PolicyOutcome:
    depth_used: int
    map: X.XcorrMap
    budgeted_scores: tuple
    flops_charged: float


def run_fixed_depth(ctx: FrameContext, depth: int) -> PolicyOutcome:
    if not 1 <= depth <= B.NUM_BLOCKS:
        raise ContractViolation(f"depth must be in [1,5], got {depth}")
    xmap = ctx.map_at(depth)
    return PolicyOutcome(
        depth_used=depth,
        map=xmap,
        budgeted_scores=(),
        flops_charged=float(ctx.flops_fixed_frame[depth - 1]),
    )


def run_soft_gating(ctx: FrameContext, params: GateParams) -> PolicyOutcome:
    maps = [ctx.map_at(d) for d in range(1, B.NUM_BLOCKS + 1)]
    raw = np.array([
        gate_score(extract_gate_features(maps[i]), params.phi[i]) for i in range(NUM_GATES)
    ])
    weights = budget_scores(raw)
    mixed = sum(w * m.map for w, m in zip(weights, maps))
    idx = np.unravel_index(int(np.argmax(mixed)), mixed.shape)
    out_map = X.XcorrMap(depth=B.NUM_BLOCKS, map=mixed, raw=mixed,
                         argmax=(int(idx[0]), int(idx[1])), temperature=1.0)
    return PolicyOutcome(
        depth_used=B.NUM_BLOCKS,
        map=out_map,
        budgeted_scores=tuple(weights),
        flops_charged=float(ctx.flops_soft_frame),
    )


def run_hard_gating(ctx: FrameContext, params: GateParams, threshold: float) -> PolicyOutcome:
    """Halt at the first depth whose budgeted score reaches the threshold.

    Blocks are evaluated incrementally through the frame context caches, so
    a frame halting at depth d never touches blocks d+1..5. The outcome map
    at depth d is bitwise the fixed-depth-d map.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ContractViolation(f"threshold must be in [0,1], got {threshold}")
    scores = []
    used = 0.0
    for depth in range(1, NUM_GATES + 1):
        xmap = ctx.map_at(depth)
        g = gate_score(extract_gate_features(xmap), params.phi[depth - 1])
        g_star = (1.0 - used) * g
        used += g_star
        scores.append(g_star)
        if g_star >= threshold:
            return PolicyOutcome(
                depth_used=depth,
                map=xmap,
                budgeted_scores=tuple(scores),
                flops_charged=float(ctx.flops_fixed_frame[depth - 1]),
            )
    scores.append(1.0 - used)
    xmap = ctx.map_at(B.NUM_BLOCKS)
    return PolicyOutcome(
        depth_used=B.NUM_BLOCKS,
        map=xmap,
        budgeted_scores=tuple(scores),
        flops_charged=float(ctx.flops_fixed_frame[B.NUM_BLOCKS - 1]),
    )
