"""Cross-correlation of key features against search features.

Pipeline per depth: standardize both taps per channel, block-average the
search tap to 16x16 and the key tap to 8x8, slide the key over the search
(valid correlation, 9x9 output), then min-max rescale to [0,1]. The
pre-rescale values, divided by a feature-dimension temperature, are the
logits the training losses see.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as G
from . import tensor_ops as T
from .errors import ContractViolation
from .geometry import BoxAA, CropGeometry


@dataclass(frozen=True)
class XcorrMap:
    """Similarity map at one depth; ``map`` is rescaled to [0,1]."""

    depth: int
    map: np.ndarray
    raw: np.ndarray
    argmax: tuple[int, int]
    temperature: float


def cross_correlate(key_feat, search_feat):
    """Valid sliding dot product of key over search (no padding, stride 1)."""
    if key_feat.ndim != 3 or search_feat.ndim != 3:
        raise ContractViolation("features must be (C,H,W)")
    if key_feat.shape[0] != search_feat.shape[0]:
        raise ContractViolation(
            f"channel mismatch: key {key_feat.shape[0]} vs search {search_feat.shape[0]}"
        )
    if key_feat.shape[1] > search_feat.shape[1] or key_feat.shape[2] > search_feat.shape[2]:
        raise ContractViolation("key extents must not exceed search extents")
    # Same engine as conv2d: the key acts as a single-output-channel filter.
    out = T._conv_raw(search_feat, key_feat[None], None, stride=1, padding=0)
    return out[0]


def cross_correlate_backward(key_feat, search_feat, grad_out):
    """VJP of cross_correlate: returns (d_key, d_search)."""
    kh, kw = key_feat.shape[1:]
    cols, (ho, wo) = T._im2col(search_feat, kh, kw, 1, 0)
    g = grad_out.reshape(1, ho * wo)
    d_key = (g @ cols).reshape(key_feat.shape)
    d_cols = g.T @ key_feat.reshape(1, -1)
    d_search = T._col2im(d_cols, search_feat.shape, kh, kw, 1, 0)
    return d_key, d_search


def rescale_unit(raw):
    """Min-max rescale to [0,1]; exactly-constant maps become all 0.5."""
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.full_like(raw, 0.5)
    return (raw - lo) / (hi - lo)


def temperature_for(channels):
    # keeps logits O(1): raw values are sums over channels x 8x8 key cells
    return float(np.sqrt(channels * G.KEY_DOWN * G.KEY_DOWN))


@dataclass
class CorrelationTrace:
    """Intermediates of the standardize->downsample->correlate pipeline."""

    key_tap: np.ndarray
    search_tap: np.ndarray
    key_down: np.ndarray
    search_down: np.ndarray


def correlation_forward(key_tap, search_tap):
    """Raw (pre-rescale) correlation of one depth's taps, plus trace."""
    if key_tap.shape[0] != search_tap.shape[0]:
        raise ContractViolation("key/search taps must share a channel count")
    key_std = T.standardize_map(key_tap)
    search_std = T.standardize_map(search_tap)
    key_down = T.avg_downsample(key_std, (G.KEY_DOWN, G.KEY_DOWN))
    search_down = T.avg_downsample(search_std, (G.SEARCH_DOWN, G.SEARCH_DOWN))
    raw = cross_correlate(key_down, search_down)
    return raw, CorrelationTrace(key_tap, search_tap, key_down, search_down)


def correlation_backward(trace: CorrelationTrace, grad_raw):
    """Backward through the depth pipeline: returns (d_key_tap, d_search_tap)."""
    d_key_down, d_search_down = cross_correlate_backward(
        trace.key_down, trace.search_down, grad_raw
    )
    d_key_std = T.avg_downsample_backward(
        trace.key_tap.shape, (G.KEY_DOWN, G.KEY_DOWN), d_key_down
    )
    d_search_std = T.avg_downsample_backward(
        trace.search_tap.shape, (G.SEARCH_DOWN, G.SEARCH_DOWN), d_search_down
    )
    d_key_tap = T.standardize_map_backward(trace.key_tap, d_key_std)
    d_search_tap = T.standardize_map_backward(trace.search_tap, d_search_std)
    return d_key_tap, d_search_tap


def make_xcorr_map(key_tap, search_tap, depth: int) -> XcorrMap:
    """Full similarity map for one depth's key/search taps."""
    raw, _trace = correlation_forward(key_tap, search_tap)
    return finish_map(raw, depth, key_tap.shape[0])


def finish_map(raw, depth, channels) -> XcorrMap:
    rescaled = rescale_unit(raw)
    idx = np.unravel_index(int(np.argmax(rescaled)), rescaled.shape)
    return XcorrMap(
        depth=depth,
        map=rescaled,
        raw=raw,
        argmax=(int(idx[0]), int(idx[1])),
        temperature=temperature_for(channels),
    )


def map_to_box(xmap: XcorrMap, key_box: BoxAA, crop_geometry: CropGeometry) -> BoxAA:
    """Predicted box in source pixels from the map argmax.

    The argmax cell maps linearly to search-crop pixels, then through the
    crop anchor/scale to source coordinates; extents are the key reference
    box's source extents (the crop scale is shared between key and search).
    """
    if crop_geometry.search_anchor is None:
        raise ContractViolation("crop geometry has no search anchor")
    r, c = xmap.argmax
    crop_x = G.map_cell_to_search_px(c)
    crop_y = G.map_cell_to_search_px(r)
    src_x, src_y = G.crop_to_source(crop_geometry.search_anchor, crop_geometry.scale,
                                    (crop_x, crop_y))
    return BoxAA(src_x - key_box.w / 2.0, src_y - key_box.h / 2.0, key_box.w, key_box.h)
