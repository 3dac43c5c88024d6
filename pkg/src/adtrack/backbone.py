"""Five-block convolutional feature extractor with a tap after every block.

Both presets pool after blocks 1-4 only, so on a 256x256 input the taps have
spatial extents [128, 64, 32, 16, 16]. The key (128x128) and search (256x256)
pathways share one ``BackboneWeights`` value, which is what makes the tracker
Siamese.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import tensor_ops as T
from .errors import ContractViolation

NUM_BLOCKS = 5


@dataclass(frozen=True)
class BlockSpec:
    conv_count: int
    channels: int
    followed_by_pool: bool


@dataclass(frozen=True)
class BackboneConfig:
    blocks: tuple[BlockSpec, ...]
    input_channels: int = 3
    preset: str = "custom"

    def __post_init__(self):
        if len(self.blocks) != NUM_BLOCKS:
            raise ContractViolation(f"backbone needs exactly {NUM_BLOCKS} blocks")
        for i, b in enumerate(self.blocks):
            if not 2 <= b.conv_count <= 4:
                raise ContractViolation(f"block {i + 1} conv_count {b.conv_count} not in [2,4]")
            if b.channels < 1:
                raise ContractViolation(f"block {i + 1} has non-positive channel count")
        if self.blocks[-1].followed_by_pool:
            raise ContractViolation("the last block must not be followed by a pool")
        if self.input_channels < 1:
            raise ContractViolation("input_channels must be positive")

    def layer_channels(self):
        """Yield (block_idx, layer_idx, c_in, c_out) over all conv layers."""
        c_in = self.input_channels
        for bi, b in enumerate(self.blocks):
            for li in range(b.conv_count):
                yield bi, li, c_in, b.channels
                c_in = b.channels


def vgg19_track_config():
    """VGG-19 geometry with the last max-pool removed."""
    counts = [2, 2, 4, 4, 4]
    channels = [64, 128, 256, 512, 512]
    blocks = tuple(
        BlockSpec(counts[i], channels[i], followed_by_pool=(i < 4)) for i in range(5)
    )
    return BackboneConfig(blocks=blocks, input_channels=3, preset="vgg19-track")


def toy_config():
    """Small geometry for finite-difference checks and desk-scale training."""
    counts = [2, 2, 2, 2, 2]
    channels = [8, 16, 16, 32, 32]
    blocks = tuple(
        BlockSpec(counts[i], channels[i], followed_by_pool=(i < 4)) for i in range(5)
    )
    return BackboneConfig(blocks=blocks, input_channels=3, preset="toy")


PRESETS = {"vgg19-track": vgg19_track_config, "toy": toy_config}


def config_from_preset(name):
    try:
        return PRESETS[name]()
    except KeyError:
        raise ContractViolation(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None


@dataclass
class BackboneWeights:
    """Per-block, per-layer 3x3 kernels and biases matching a config."""

    config: BackboneConfig
    kernels: list  # kernels[block][layer]: (c_out, c_in, 3, 3)
    biases: list   # biases[block][layer]: (c_out,)

    def validate(self):
        expected = {}
        for bi, li, c_in, c_out in self.config.layer_channels():
            expected[(bi, li)] = (c_out, c_in, 3, 3)
        for (bi, li), shape in expected.items():
            k = self.kernels[bi][li]
            if k.shape != shape:
                raise ContractViolation(
                    f"block {bi + 1} conv {li + 1}: kernel shape {k.shape}, expected {shape}"
                )
            if self.biases[bi][li].shape != (shape[0],):
                raise ContractViolation(f"block {bi + 1} conv {li + 1}: bad bias shape")
        return self

    def num_params(self):
        return sum(k.size + b.size for ks, bs in zip(self.kernels, self.biases)
                   for k, b in zip(ks, bs))

    def checksum(self):
        h = hashlib.sha256()
        for ks, bs in zip(self.kernels, self.biases):
            for k, b in zip(ks, bs):
                h.update(np.ascontiguousarray(k).tobytes())
                h.update(np.ascontiguousarray(b).tobytes())
        return h.hexdigest()

    def copy(self):
        return BackboneWeights(
            config=self.config,
            kernels=[[k.copy() for k in ks] for ks in self.kernels],
            biases=[[b.copy() for b in bs] for bs in self.biases],
        )


def init_kernel(rng, c_out, c_in, kh=3, kw=3):
    """Zero-mean normal with std 1/sqrt(fan_in), fan_in = c_in*kh*kw."""
    scale = 1.0 / np.sqrt(c_in * kh * kw)
    return rng.normal(0.0, scale, size=(c_out, c_in, kh, kw))


def init_weights(config: BackboneConfig, seed: int) -> BackboneWeights:
    rng = np.random.default_rng(seed)
    kernels = [[] for _ in range(NUM_BLOCKS)]
    biases = [[] for _ in range(NUM_BLOCKS)]
    for bi, _li, c_in, c_out in config.layer_channels():
        kernels[bi].append(init_kernel(rng, c_out, c_in))
        biases[bi].append(np.zeros(c_out))
    return BackboneWeights(config=config, kernels=kernels, biases=biases).validate()


# --- instrumentation -------------------------------------------------------

_ACTIVE_COUNTER = None


class ConvCallCounter:
    """Records (block, layer, c_out, c_in, h_out, w_out) per conv invocation."""

    def __init__(self):
        self.records = []

    @property
    def count(self):
        return len(self.records)

    def multiplies(self):
        return sum(co * ci * 9 * h * w for _b, _l, co, ci, h, w in self.records)


@contextmanager
def count_conv_calls():
    global _ACTIVE_COUNTER
    counter = ConvCallCounter()
    prev, _ACTIVE_COUNTER = _ACTIVE_COUNTER, counter
    try:
        yield counter
    finally:
        _ACTIVE_COUNTER = prev


def _run_conv(weights, bi, li, x):
    spec = T.ConvSpec(kernel=weights.kernels[bi][li], bias=weights.biases[bi][li], padding=1)
    out = T.conv2d(x, spec)
    if _ACTIVE_COUNTER is not None:
        _ACTIVE_COUNTER.records.append(
            (bi + 1, li + 1, spec.kernel.shape[0], spec.kernel.shape[1], out.shape[1], out.shape[2])
        )
    return out


# --- forward passes ---------------------------------------------------------


def _check_image(config, image):
    if image.ndim != 3 or image.shape[0] != config.input_channels:
        raise ContractViolation(
            f"image must be ({config.input_channels},H,W), got shape {image.shape}"
        )
    if image.shape[1] % 16 or image.shape[2] % 16:
        raise ContractViolation(f"image extents must be divisible by 16, got {image.shape[1:]}")


def _check_depth(depth):
    if not 1 <= depth <= NUM_BLOCKS:
        raise ContractViolation(f"depth must be in [1,{NUM_BLOCKS}], got {depth}")


def _run_block(weights, bi, x):
    for li in range(weights.config.blocks[bi].conv_count):
        x = T.relu(_run_conv(weights, bi, li, x))
    if weights.config.blocks[bi].followed_by_pool:
        x = T.maxpool2(x)
    return x


def forward_taps(weights: BackboneWeights, image, max_depth: int):
    """Feature maps at the output (post-pool) of blocks 1..max_depth."""
    _check_image(weights.config, image)
    _check_depth(max_depth)
    taps = []
    x = image
    for bi in range(max_depth):
        x = _run_block(weights, bi, x)
        taps.append(x)
    return taps


@dataclass
class BlockCache:
    """Activations of one image through the first ``depth`` blocks.

    Single-owner: reuse is only valid for the exact image object it was
    built from (checked by identity).
    """

    image: np.ndarray
    depth: int = 0
    taps: list = field(default_factory=list)

    def tap(self, depth):
        return self.taps[depth - 1]


def forward_taps_with_cache(weights, image, cache: BlockCache | None, target_depth: int):
    """Deepen ``cache`` to ``target_depth``; returns (tap, cache)."""
    _check_depth(target_depth)
    if cache is None:
        _check_image(weights.config, image)
        cache = BlockCache(image=image)
    elif cache.image is not image:
        raise ContractViolation("stale block cache: built from a different image")
    x = cache.image if cache.depth == 0 else cache.taps[cache.depth - 1]
    for bi in range(cache.depth, target_depth):
        x = _run_block(weights, bi, x)
        cache.taps.append(x)
        cache.depth = bi + 1
    return cache.taps[target_depth - 1], cache


# --- training-time forward with recorded intermediates ----------------------


@dataclass
class BlockTrace:
    conv_inputs: list   # input to each conv layer
    relu_outs: list     # post-relu activations, one per conv layer
    pooled: np.ndarray | None  # block output if pooled, else None


def forward_trace(weights, image, max_depth):
    """Like forward_taps but keeps every intermediate needed for backward."""
    _check_image(weights.config, image)
    _check_depth(max_depth)
    taps, traces = [], []
    x = image
    for bi in range(max_depth):
        conv_inputs, relu_outs = [], []
        for li in range(weights.config.blocks[bi].conv_count):
            conv_inputs.append(x)
            x = T.relu(_run_conv(weights, bi, li, x))
            relu_outs.append(x)
        pooled = None
        if weights.config.blocks[bi].followed_by_pool:
            x = pooled = T.maxpool2(x)
        traces.append(BlockTrace(conv_inputs, relu_outs, pooled))
        taps.append(x)
    return taps, traces


def zero_grads(weights):
    return (
        [[np.zeros_like(k) for k in ks] for ks in weights.kernels],
        [[np.zeros_like(b) for b in bs] for bs in weights.biases],
    )


def backward_trace(weights, traces, tap_grads, kernel_grads, bias_grads):
    """Accumulate d(loss)/d(weights) given gradients at each tap.

    ``tap_grads[i]`` is the gradient w.r.t. the post-pool tap of block i+1
    (or None). Taps feed both the correlation head and the next block, so
    gradients are summed where pathways meet. Returns the gradient w.r.t.
    the input image.
    """
    depth = len(traces)
    g = None
    for bi in range(depth - 1, -1, -1):
        tg = tap_grads[bi]
        if tg is not None:
            g = tg if g is None else g + tg
        if g is None:
            continue
        tr = traces[bi]
        if tr.pooled is not None:
            g = T.maxpool2_backward(tr.relu_outs[-1], g)
        for li in range(len(tr.relu_outs) - 1, -1, -1):
            g = T.relu_backward(tr.relu_outs[li], g)
            spec = T.ConvSpec(kernel=weights.kernels[bi][li],
                              bias=weights.biases[bi][li], padding=1)
            g, dk, db = T.conv2d_backward(tr.conv_inputs[li], spec, g)
            kernel_grads[bi][li] += dk
            bias_grads[bi][li] += db
    return g
