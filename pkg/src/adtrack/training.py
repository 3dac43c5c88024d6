"""Ground-truth maps, tracking losses, and the two training phases.

Phase 1 fits the backbone by gradient descent on the summed per-depth
cross-entropy losses (or the deepest loss only, as an ablation), with
gradients propagated by hand through the correlation pipeline and both
Siamese pathways. Phase 2 freezes the backbone, precomputes per-sample
maps/losses/gate features, and fits the four gate weight vectors against
the budget-weighted tracking-plus-cost objective; the budgeting recurrence
is differentiated in closed form, so those gradients are exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone as B
from . import dataio
from . import geometry as G
from . import tensor_ops as T
from . import xcorr as X
from .errors import ContractViolation, TrainingDivergence
from .evaluation import default_gate_costs
from .gating import NUM_GATES, GateParams, extract_gate_features, sigmoid


@dataclass(frozen=True)
class GroundTruthMap:
    """Normalized 2D Gaussian over map cells, peaked at the true center."""

    map: np.ndarray
    center: tuple
    sigma: float


def gaussian_gt(center, sigma: float) -> GroundTruthMap:
    cy, cx = center
    limit = G.MAP_SIZE - 1
    if not sigma > 0:
        raise ContractViolation(f"sigma must be positive, got {sigma}")
    if not (0.0 <= cy <= limit and 0.0 <= cx <= limit):
        raise ContractViolation(f"center {center} outside map bounds [0,{limit}]")
    idx = np.arange(G.MAP_SIZE, dtype=float)
    sq = (idx[:, None] - cy) ** 2 + (idx[None, :] - cx) ** 2
    g = np.exp(-sq / (2.0 * sigma * sigma))
    return GroundTruthMap(map=g / g.sum(), center=(float(cy), float(cx)), sigma=float(sigma))


def _cross_entropy(logits, gt_map):
    m = logits.max()
    lse = m + np.log(np.exp(logits - m).sum())
    return float(lse - (gt_map * logits).sum())


def tracking_loss(xmap: X.XcorrMap, gt: GroundTruthMap) -> float:
    """Softmax cross-entropy between one map's logits and the Gaussian."""
    if xmap.raw.shape != gt.map.shape:
        raise ContractViolation(
            f"map shape {xmap.raw.shape} does not match ground truth {gt.map.shape}"
        )
    return _cross_entropy(xmap.raw / xmap.temperature, gt.map)


def conv_loss(maps, gt: GroundTruthMap, mode: str = "all-depths") -> float:
    """Summed per-depth tracking loss, or the deepest term alone."""
    if mode == "deepest-only":
        return tracking_loss(maps[-1], gt)
    if mode != "all-depths":
        raise ContractViolation(f"mode must be all-depths|deepest-only, got {mode!r}")
    if len(maps) != B.NUM_BLOCKS:
        raise ContractViolation(f"expected {B.NUM_BLOCKS} maps, got {len(maps)}")
    return float(sum(tracking_loss(m, gt) for m in maps))


# --- training pairs -----------------------------------------------------------


@dataclass(frozen=True)
class TrainPair:
    key_crop: np.ndarray
    search_crop: np.ndarray
    center: tuple  # (row, col) of the true target center, map coordinates
    seq: str = ""
    key_frame: int = -1
    frame: int = -1


def build_pairs(seqs, key_stride: int = 10, horizon: int = 100, max_per_group=None):
    """Teacher-forced training pairs from annotated sequences.

    Each search crop is centered on the *previous frame's true* center,
    mirroring the tracking loop but without prediction feedback. Pairs whose
    true center falls outside the correlation map are skipped (the target
    moved beyond the search window; rare at desk scale).
    """
    pairs = []
    limit = G.MAP_SIZE - 1
    for seq in seqs:
        for key_idx, search_idxs in dataio.make_key_search_pairs(seq, key_stride, horizon):
            key_crop, geom = dataio.crop_key(seq.frames[key_idx], seq.gt[key_idx], seq.mean_rgb)
            prev_center = seq.gt[key_idx].center
            taken = 0
            for si in search_idxs:
                if max_per_group is not None and taken >= max_per_group:
                    break
                search_crop, geom_s = dataio.crop_search(seq.frames[si], prev_center, geom)
                true_center = seq.gt[si].center
                crop_x, crop_y = G.source_to_crop(geom_s.search_anchor, geom_s.scale, true_center)
                col = G.search_px_to_map_cell(crop_x)
                row = G.search_px_to_map_cell(crop_y)
                prev_center = true_center
                if 0.0 <= row <= limit and 0.0 <= col <= limit:
                    pairs.append(TrainPair(key_crop, search_crop, (row, col),
                                           seq=seq.name, key_frame=key_idx, frame=si))
                    taken += 1
    return pairs


# --- phase 1: backbone training ----------------------------------------------


def pair_losses_and_grads(weights, pair: TrainPair, gt: GroundTruthMap,
                          mode: str = "all-depths"):
    """Per-depth losses and weight gradients for one key/search pair."""
    key_taps, key_traces = B.forward_trace(weights, pair.key_crop, B.NUM_BLOCKS)
    search_taps, search_traces = B.forward_trace(weights, pair.search_crop, B.NUM_BLOCKS)
    depths = [B.NUM_BLOCKS] if mode == "deepest-only" else list(range(1, B.NUM_BLOCKS + 1))

    key_tap_grads = [None] * B.NUM_BLOCKS
    search_tap_grads = [None] * B.NUM_BLOCKS
    losses = {}
    for d in depths:
        raw, trace = X.correlation_forward(key_taps[d - 1], search_taps[d - 1])
        tau = X.temperature_for(key_taps[d - 1].shape[0])
        logits = raw / tau
        losses[d] = _cross_entropy(logits, gt.map)
        d_logits = T.softmax_flat(logits) - gt.map
        dk, ds = X.correlation_backward(trace, d_logits / tau)
        key_tap_grads[d - 1] = dk
        search_tap_grads[d - 1] = ds

    kgrads, bgrads = B.zero_grads(weights)
    B.backward_trace(weights, key_traces, key_tap_grads, kgrads, bgrads)
    B.backward_trace(weights, search_traces, search_tap_grads, kgrads, bgrads)
    return losses, kgrads, bgrads


@dataclass(frozen=True)
class TrainHyper:
    learning_rate: float = 0.05
    epochs: int = 12
    batch_size: int = 8
    momentum: float = 0.9
    seed: int = 0
    sigma: float = 1.0


@dataclass
class BackboneTrainResult:
    weights: B.BackboneWeights
    trace: list  # rows: dict(epoch, loss, l1..l5 where computed)
    mode: str


def train_backbone(config: B.BackboneConfig, pairs, mode: str = "all-depths",
                   hyper: TrainHyper = TrainHyper()) -> BackboneTrainResult:
    """Minibatch SGD with momentum on the conv loss; deterministic per seed."""
    if mode not in ("all-depths", "deepest-only"):
        raise ContractViolation(f"mode must be all-depths|deepest-only, got {mode!r}")
    if not pairs:
        raise ContractViolation("empty training set")
    weights = B.init_weights(config, hyper.seed)
    vel_k, vel_b = B.zero_grads(weights)
    shuffle_rng = np.random.default_rng(hyper.seed + 1)
    gts = [gaussian_gt(p.center, hyper.sigma) for p in pairs]

    trace = []
    for epoch in range(hyper.epochs):
        order = shuffle_rng.permutation(len(pairs))
        depth_sums = np.zeros(B.NUM_BLOCKS)
        seen = 0
        for start in range(0, len(order), hyper.batch_size):
            batch = order[start : start + hyper.batch_size]
            gk, gb = B.zero_grads(weights)
            for idx in batch:
                losses, pk, pb = pair_losses_and_grads(weights, pairs[idx], gts[idx], mode)
                for d, v in losses.items():
                    depth_sums[d - 1] += v
                for bi in range(B.NUM_BLOCKS):
                    for li in range(len(gk[bi])):
                        gk[bi][li] += pk[bi][li]
                        gb[bi][li] += pb[bi][li]
            seen += len(batch)
            inv = 1.0 / len(batch)
            for bi in range(B.NUM_BLOCKS):
                for li in range(len(gk[bi])):
                    vel_k[bi][li] = hyper.momentum * vel_k[bi][li] - hyper.learning_rate * inv * gk[bi][li]
                    vel_b[bi][li] = hyper.momentum * vel_b[bi][li] - hyper.learning_rate * inv * gb[bi][li]
                    weights.kernels[bi][li] = weights.kernels[bi][li] + vel_k[bi][li]
                    weights.biases[bi][li] = weights.biases[bi][li] + vel_b[bi][li]

        per_depth = depth_sums / seen
        total = float(per_depth.sum() if mode == "all-depths" else per_depth[-1])
        if not np.isfinite(total):
            raise TrainingDivergence("backbone training loss became non-finite", epoch)
        row = {"epoch": epoch, "loss": total}
        depths = [B.NUM_BLOCKS] if mode == "deepest-only" else range(1, B.NUM_BLOCKS + 1)
        for d in depths:
            row[f"l{d}"] = float(per_depth[d - 1])
        trace.append(row)
    return BackboneTrainResult(weights=weights, trace=trace, mode=mode)


def evaluate_depth_losses(weights, pairs, sigma: float = 1.0):
    """Mean per-depth tracking loss of frozen weights over pairs."""
    sums = np.zeros(B.NUM_BLOCKS)
    for p in pairs:
        gt = gaussian_gt(p.center, sigma)
        key_taps = B.forward_taps(weights, p.key_crop, B.NUM_BLOCKS)
        search_taps = B.forward_taps(weights, p.search_crop, B.NUM_BLOCKS)
        for d in range(1, B.NUM_BLOCKS + 1):
            xmap = X.make_xcorr_map(key_taps[d - 1], search_taps[d - 1], d)
            sums[d - 1] += tracking_loss(xmap, gaussian_gt(p.center, sigma))
        del gt
    return sums / len(pairs)


# --- phase 2: gate training ---------------------------------------------------


@dataclass(frozen=True)
class GateLossConfig:
    lam: float = 0.75
    costs: np.ndarray = field(default_factory=default_gate_costs)
    learning_rate: float = 1.0
    epochs: int = 400
    seed: int = 0

    def __post_init__(self):
        costs = np.asarray(self.costs, dtype=float)
        if costs.shape != (B.NUM_BLOCKS,):
            raise ContractViolation(f"need {B.NUM_BLOCKS} per-depth costs")
        object.__setattr__(self, "costs", costs)


def gate_loss(maps, gt: GroundTruthMap, params: GateParams, config: GateLossConfig) -> float:
    """Budget-weighted tracking loss plus weighted computational cost (one sample)."""
    losses = np.array([tracking_loss(m, gt) for m in maps])
    feats = np.stack([
        np.append(extract_gate_features(maps[i]).as_vector(), 1.0) for i in range(NUM_GATES)
    ])
    total, _tracking, _cost, _ = _gate_objective(losses[None], feats[None], params.phi, config)
    return float(total)


def gate_loss_terms(losses, feats, params: GateParams, config: GateLossConfig):
    """(total, tracking term, cost term) for precomputed sample arrays."""
    total, tracking, cost, _ = _gate_objective(losses, feats, params.phi, config)
    return float(total), float(tracking), float(cost)


def _gate_objective(losses, feats, phi, config, want_grad=False):
    """Mean gate objective over N samples, optionally with d/d(phi).

    losses: (N,5) per-depth tracking losses; feats: (N,4,13) gate inputs
    with bias appended. The budgeting recurrence is unrolled forward and
    reversed exactly, so the returned gradient is analytic.
    """
    n = losses.shape[0]
    a = losses + config.lam * config.costs  # (N,5) per-depth total weight

    z = np.einsum("ngf,gf->ng", feats, phi)  # (N,4)
    g = sigmoid(z)
    g_star = np.zeros((n, NUM_GATES + 1))
    used = np.zeros(n)
    prefix = []  # 1 - sum_{j<i} g*_j, saved per gate for the backward sweep
    for i in range(NUM_GATES):
        p = 1.0 - used
        prefix.append(p)
        g_star[:, i] = p * g[:, i]
        used = used + g_star[:, i]
    g_star[:, NUM_GATES] = 1.0 - used

    total = float((g_star * a).sum(axis=1).mean())
    tracking = float((g_star * losses).sum(axis=1).mean())
    cost = float(config.lam * (g_star * config.costs).sum(axis=1).mean())
    if not want_grad:
        return total, tracking, cost, None

    d_used = -a[:, NUM_GATES] / n  # residual: g*_5 = 1 - used_4
    d_phi = np.zeros_like(phi)
    for i in range(NUM_GATES - 1, -1, -1):
        d_gs = a[:, i] / n + d_used
        d_g = d_gs * prefix[i]
        d_used = d_used - d_gs * g[:, i]
        d_z = d_g * g[:, i] * (1.0 - g[:, i])
        d_phi[i] = d_z @ feats[:, i, :]
    return total, tracking, cost, d_phi


def precompute_gate_samples(weights, pairs, sigma: float = 1.0):
    """Frozen-backbone per-sample losses (N,5) and gate features (N,4,13)."""
    losses = np.zeros((len(pairs), B.NUM_BLOCKS))
    feats = np.zeros((len(pairs), NUM_GATES, 13))
    for n, p in enumerate(pairs):
        gt = gaussian_gt(p.center, sigma)
        key_taps = B.forward_taps(weights, p.key_crop, B.NUM_BLOCKS)
        search_taps = B.forward_taps(weights, p.search_crop, B.NUM_BLOCKS)
        for d in range(1, B.NUM_BLOCKS + 1):
            xmap = X.make_xcorr_map(key_taps[d - 1], search_taps[d - 1], d)
            losses[n, d - 1] = tracking_loss(xmap, gt)
            if d <= NUM_GATES:
                feats[n, d - 1] = np.append(extract_gate_features(xmap).as_vector(), 1.0)
    return losses, feats


@dataclass
class GateTrainResult:
    params: GateParams
    trace: list  # rows: dict(epoch, tracking, cost)


def train_gates(losses, feats, config: GateLossConfig) -> GateTrainResult:
    """Full-batch gradient descent on the mean gate objective.

    Inputs are the precomputed arrays from :func:`precompute_gate_samples`
    (soft gates throughout; the backbone is never touched).
    """
    if losses.ndim != 2 or losses.shape[1] != B.NUM_BLOCKS:
        raise ContractViolation("losses must be (N,5)")
    if feats.shape != (losses.shape[0], NUM_GATES, 13):
        raise ContractViolation("features must be (N,4,13)")
    phi = np.zeros((NUM_GATES, 13))
    trace = []
    for epoch in range(config.epochs):
        total, tracking, cost, d_phi = _gate_objective(losses, feats, phi, config,
                                                       want_grad=True)
        if not np.isfinite(total):
            raise TrainingDivergence("gate training loss became non-finite", epoch)
        phi = phi - config.learning_rate * d_phi
        trace.append({"epoch": epoch, "tracking": tracking, "cost": cost})
    return GateTrainResult(params=GateParams(phi=phi), trace=trace)
