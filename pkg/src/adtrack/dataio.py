"""Sequence ingestion, preprocessing crops, synthetic data, checkpoints.

Sequences live on disk as ``<dir>/%08d.ppm`` (binary P6) plus a
``groundtruth.txt`` with one line per frame, either ``x,y,w,h`` or eight
polygon coordinates (converted to the enclosing axis-aligned box).

Checkpoints are a small self-describing binary format (magic ``ADTK1``):
a little-endian u32 entry count; per entry a u32-length-prefixed UTF-8
name, a u8 rank, rank u32 extents and the row-major float32 values; then a
u32-length-prefixed UTF-8 JSON metadata blob. Values are float32 on disk,
float64 in memory.
"""

from __future__ import annotations

import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import geometry as G
from .backbone import BackboneConfig, BackboneWeights, BlockSpec
from .errors import CheckpointFormatError, ContractViolation, IngestionError
from .gating import GateParams
from .geometry import BoxAA, CropGeometry

MAGIC = b"ADTK1"


@dataclass
class TrackSequence:
    name: str
    frames: list          # (3,H,W) float64 in [0,1]
    gt: list              # BoxAA per frame
    mean_rgb: tuple = (0.5, 0.5, 0.5)

    def __post_init__(self):
        if len(self.frames) != len(self.gt):
            raise ContractViolation(
                f"{self.name}: {len(self.frames)} frames vs {len(self.gt)} annotations"
            )

    def __len__(self):
        return len(self.frames)


# --- portable pixmap --------------------------------------------------------


def write_ppm(path, image):
    """Write a (3,H,W) float image in [0,1] as binary P6."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[1:]
    payload = arr.transpose(1, 2, 0).tobytes()
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(payload)


def read_ppm(path):
    """Read a binary P6 file into a (3,H,W) float64 image in [0,1]."""
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        return data[start:pos]

    if token() != b"P6":
        raise IngestionError(f"{path}: not a binary P6 pixmap")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError:
        raise IngestionError(f"{path}: malformed P6 header") from None
    if maxval != 255:
        raise IngestionError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace after maxval
    raster = data[pos : pos + 3 * w * h]
    if len(raster) != 3 * w * h:
        raise IngestionError(f"{path}: truncated raster")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3)
    return img.transpose(2, 0, 1).astype(np.float64) / 255.0


# --- annotations ------------------------------------------------------------


def parse_groundtruth_line(line, path="<memory>", lineno=0):
    """One annotation line: ``x,y,w,h`` or an 8-coordinate polygon."""
    parts = [p for p in re.split(r"[,\s]+", line.strip()) if p]
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise IngestionError(f"{path}:{lineno}: non-numeric annotation {line!r}") from None
    if len(vals) == 4:
        x, y, w, h = vals
        return BoxAA(x, y, w, h)
    if len(vals) == 8:
        xs, ys = vals[0::2], vals[1::2]
        return BoxAA(min(xs), min(ys), max(xs) - min(xs), max(ys) - min(ys))
    raise IngestionError(f"{path}:{lineno}: expected 4 or 8 values, got {len(vals)}")


def _clamp_box(box, w, h):
    x0, y0 = max(box.x, 0.0), max(box.y, 0.0)
    x1, y1 = min(box.x + box.w, float(w)), min(box.y + box.h, float(h))
    if x1 <= x0 or y1 <= y0:
        return None
    return BoxAA(x0, y0, x1 - x0, y1 - y0)


def load_sequence(path) -> TrackSequence:
    """Load a directory of numbered P6 frames plus groundtruth.txt."""
    gt_path = os.path.join(path, "groundtruth.txt")
    if not os.path.exists(gt_path):
        raise IngestionError(f"{gt_path}: missing annotation file")
    with open(gt_path, encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    frame_files = sorted(fn for fn in os.listdir(path) if fn.endswith(".ppm"))
    if len(frame_files) != len(lines):
        raise IngestionError(
            f"{path}: {len(frame_files)} frames but {len(lines)} annotation lines"
        )
    if not frame_files:
        raise IngestionError(f"{path}: empty sequence")
    frames, boxes = [], []
    for i, (fn, ln) in enumerate(zip(frame_files, lines)):
        frame = read_ppm(os.path.join(path, fn))
        box = parse_groundtruth_line(ln, gt_path, i + 1)
        clamped = _clamp_box(box, frame.shape[2], frame.shape[1])
        if clamped is None:
            raise IngestionError(f"{gt_path}:{i + 1}: box lies entirely outside the frame")
        frames.append(frame)
        boxes.append(clamped)
    mean_rgb = tuple(float(np.mean([f[c].mean() for f in frames])) for c in range(3))
    return TrackSequence(name=os.path.basename(os.path.normpath(path)),
                         frames=frames, gt=boxes, mean_rgb=mean_rgb)


def save_sequence(seq: TrackSequence, path):
    os.makedirs(path, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        write_ppm(os.path.join(path, "%08d.ppm" % i), frame)
    with open(os.path.join(path, "groundtruth.txt"), "w", encoding="utf-8") as f:
        for b in seq.gt:
            f.write(f"{b.x:g},{b.y:g},{b.w:g},{b.h:g}\n")


# --- key/search pairing and crops -------------------------------------------


def make_key_search_pairs(seq, key_stride: int = 10, horizon: int = 100):
    """Key frames every ``key_stride`` frames, each with up to ``horizon``
    subsequent search frames (groups may overlap)."""
    if len(seq) == 0:
        raise ContractViolation("empty sequence")
    pairs = []
    for key in range(0, len(seq), key_stride):
        searches = list(range(key + 1, min(key + horizon, len(seq) - 1) + 1))
        pairs.append((key, searches))
    return pairs


def _resample(frame, anchor, scale, size, pad_fill):
    """Nearest-neighbor crop of ``size`` x ``size`` pixels at the given
    source anchor/scale; out-of-frame pixels take ``pad_fill``."""
    ax, ay = anchor
    xs = np.floor(ax + (np.arange(size) + 0.5) * scale).astype(int)
    ys = np.floor(ay + (np.arange(size) + 0.5) * scale).astype(int)
    h, w = frame.shape[1:]
    ok = (ys >= 0)[:, None] & (ys < h)[:, None] & (xs >= 0)[None, :] & (xs < w)[None, :]
    out = np.empty((3, size, size))
    out[:] = np.asarray(pad_fill, dtype=float)[:, None, None]
    sampled = frame[:, np.clip(ys, 0, h - 1)[:, None], np.clip(xs, 0, w - 1)[None, :]]
    out[:, ok] = sampled[:, ok]
    return out


def crop_key(frame, gt_box: BoxAA, pad_fill):
    """128x128 key crop centered on the box, larger side scaled to 2/3 of
    the crop (at least 25% margin per side). Returns (crop, geometry)."""
    scale = G.PAD_FACTOR * max(gt_box.w, gt_box.h) / G.KEY_CROP
    if scale <= 0:
        raise ContractViolation("degenerate ground-truth box")
    cx, cy = gt_box.center
    anchor = (cx - (G.KEY_CROP / 2.0) * scale, cy - (G.KEY_CROP / 2.0) * scale)
    crop = _resample(frame, anchor, scale, G.KEY_CROP, pad_fill)
    return crop, CropGeometry(scale=scale, key_anchor=anchor, pad_fill=tuple(pad_fill))


def crop_search(frame, prev_center, geometry: CropGeometry):
    """256x256 search crop at the key's scale, centered on the previous
    center. Returns (crop, geometry with the search anchor filled in)."""
    anchor = (
        prev_center[0] - (G.SEARCH_CROP / 2.0) * geometry.scale,
        prev_center[1] - (G.SEARCH_CROP / 2.0) * geometry.scale,
    )
    crop = _resample(frame, anchor, geometry.scale, G.SEARCH_CROP, geometry.pad_fill)
    return crop, geometry.with_search_anchor(anchor)


# --- synthetic sequences -----------------------------------------------------

# 6x6 pattern stencils; entities share a color in hard mode and differ only
# in fine structure, so shallow features cannot tell them apart.
_STENCILS = {
    "solid": np.ones((6, 6)),
    "hollow": np.pad(np.zeros((2, 2)), 2, constant_values=1.0),
    "cross": np.zeros((6, 6)),
    "diag": np.eye(6) + np.eye(6)[::-1],
    "tee": np.zeros((6, 6)),
    "ell": np.zeros((6, 6)),
    "dots": np.zeros((6, 6)),
}
_STENCILS["cross"][2:4, :] = 1.0
_STENCILS["cross"][:, 2:4] = 1.0
_STENCILS["tee"][0:2, :] = 1.0
_STENCILS["tee"][:, 2:4] = 1.0
_STENCILS["ell"][:, 0:2] = 1.0
_STENCILS["ell"][4:6, :] = 1.0
_STENCILS["dots"][0:2, 0:2] = 1.0
_STENCILS["dots"][0:2, 4:6] = 1.0
_STENCILS["dots"][4:6, 4:6] = 1.0
_STENCILS["dots"][2:4, 2:4] = 1.0
_STENCILS["diag"] = np.clip(_STENCILS["diag"], 0, 1)

TARGET_PATTERN = "cross"
DISTRACTOR_PATTERNS = ("solid", "hollow", "diag", "tee", "ell", "dots")


@dataclass(frozen=True)
class SynthSpec:
    difficulty: str                    # "easy" | "hard"
    length: int = 30
    resolution: tuple = (128, 128)
    target_size: int = 24              # must be a multiple of 6
    num_distractors: int = 5           # hard mode only, >= 4
    step: int = 2                      # max per-axis motion per frame
    noise: float = 0.02

    def __post_init__(self):
        if self.difficulty not in ("easy", "hard"):
            raise ContractViolation(f"difficulty must be easy|hard, got {self.difficulty!r}")
        if self.target_size % 6:
            raise ContractViolation("target_size must be a multiple of 6")
        if self.difficulty == "hard" and self.num_distractors < 4:
            raise ContractViolation("hard mode needs at least 4 distractors")
        if self.length < 1:
            raise ContractViolation("length must be positive")


def _paint(frame, x, y, stencil_mask, color):
    s = stencil_mask.shape[0]
    region = frame[:, y:y + s, x:x + s]
    region[:, stencil_mask] = np.asarray(color)[:, None]


def _walk(rng, pos, step, lo, hi):
    nxt = pos + rng.integers(-step, step + 1, size=2)
    return np.clip(nxt, lo, hi)


def gen_synthetic(spec: SynthSpec, seed: int) -> TrackSequence:
    """Deterministic synthetic sequence with exact ground-truth boxes.

    Easy: one bright target on a plain noisy background. Hard: the target
    plus visually similar same-color distractors on a textured background;
    distractors never overlap the target but are free to sit close by.
    """
    rng = np.random.default_rng(seed)
    h, w = spec.resolution
    s = spec.target_size
    cell = s // 6
    target_mask = np.kron(_STENCILS[TARGET_PATTERN], np.ones((cell, cell))) > 0.5

    hard = spec.difficulty == "hard"
    bg_level = 0.35
    target_color = (0.95, 0.35, 0.2) if hard else (0.95, 0.85, 0.25)

    lo, hi = 1, min(h, w) - s - 1
    if hi <= lo:
        raise ContractViolation("resolution too small for the target size")
    tpos = rng.integers(lo, hi + 1, size=2)  # (x, y)

    distractors = []
    if hard:
        for i in range(spec.num_distractors):
            name = DISTRACTOR_PATTERNS[i % len(DISTRACTOR_PATTERNS)]
            mask = np.kron(_STENCILS[name], np.ones((cell, cell))) > 0.5
            while True:
                p = rng.integers(lo, hi + 1, size=2)
                if np.abs(p - tpos).max() >= 1.3 * s:
                    break
            distractors.append({"mask": mask, "pos": p})

    if hard:
        yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        fx, fy, fd = rng.uniform(0.03, 0.09, size=3)
        texture = 0.06 * (np.sin(2 * np.pi * fx * xx) + np.sin(2 * np.pi * fy * yy)
                          + np.sin(2 * np.pi * fd * (xx + yy)))
    else:
        texture = 0.0

    frames, boxes = [], []
    for _t in range(spec.length):
        frame = np.empty((3, h, w))
        frame[:] = bg_level + texture
        frame += rng.normal(0.0, spec.noise, size=(3, h, w))
        np.clip(frame, 0.0, 1.0, out=frame)

        for d in distractors:
            nxt = _walk(rng, d["pos"], spec.step, lo, hi)
            if np.abs(nxt - tpos).max() >= 1.2 * s:
                d["pos"] = nxt
            _paint(frame, int(d["pos"][0]), int(d["pos"][1]), d["mask"], target_color)
        _paint(frame, int(tpos[0]), int(tpos[1]), target_mask, target_color)

        frames.append(frame)
        boxes.append(BoxAA(float(tpos[0]), float(tpos[1]), float(s), float(s)))
        tpos = _walk(rng, tpos, spec.step, lo, hi)

    name = f"synth-{spec.difficulty}-{seed}"
    return TrackSequence(name=name, frames=frames, gt=boxes,
                         mean_rgb=(bg_level, bg_level, bg_level))


def gen_dataset(kind: str, count: int, spec_kwargs=None, seed: int = 0):
    """A list of synthetic sequences: all easy, all hard, or alternating."""
    if kind not in ("easy", "hard", "mixed"):
        raise ContractViolation(f"kind must be easy|hard|mixed, got {kind!r}")
    kwargs = dict(spec_kwargs or {})
    seqs = []
    for i in range(count):
        difficulty = kind if kind != "mixed" else ("easy" if i % 2 == 0 else "hard")
        seqs.append(gen_synthetic(SynthSpec(difficulty=difficulty, **kwargs), seed=seed * 1000 + i))
    return seqs


# --- checkpoints -------------------------------------------------------------


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, n, what):
        if self.offset + n > len(self.data):
            raise CheckpointFormatError(f"truncated while reading {what}", self.offset)
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def u8(self, what):
        return self.take(1, what)[0]


def _weights_to_table(weights: BackboneWeights):
    table = {}
    for bi, ks in enumerate(weights.kernels):
        for li, k in enumerate(ks):
            table[f"backbone/block{bi + 1}/conv{li + 1}/kernel"] = k
            table[f"backbone/block{bi + 1}/conv{li + 1}/bias"] = weights.biases[bi][li]
    return table


def _config_meta(config: BackboneConfig):
    return {
        "preset": config.preset,
        "input_channels": config.input_channels,
        "conv_counts": [b.conv_count for b in config.blocks],
        "channels": [b.channels for b in config.blocks],
        "pools": [b.followed_by_pool for b in config.blocks],
    }


def _config_from_meta(meta):
    blocks = tuple(
        BlockSpec(c, ch, bool(p))
        for c, ch, p in zip(meta["conv_counts"], meta["channels"], meta["pools"])
    )
    return BackboneConfig(blocks=blocks, input_channels=int(meta["input_channels"]),
                          preset=meta.get("preset", "custom"))


def atomic_write_bytes(path, payload: bytes):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(weights: BackboneWeights, gates: GateParams | None, meta: dict, path):
    """Serialize weights (+ optional gates) and metadata; float32 on disk."""
    table = _weights_to_table(weights)
    if gates is not None:
        table["gates/phi"] = gates.phi
    meta_out = dict(meta or {})
    meta_out["backbone"] = _config_meta(weights.config)
    meta_out["has_gates"] = gates is not None

    chunks = [MAGIC, struct.pack("<I", len(table))]
    for name in sorted(table):
        arr = np.ascontiguousarray(table[name], dtype=np.float32)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    blob = json.dumps(meta_out, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(blob)))
    chunks.append(blob)
    atomic_write_bytes(path, b"".join(chunks))


MAX_TENSOR_ELEMENTS = 1 << 31


def load_checkpoint(path):
    """Inverse of save_checkpoint: returns (weights, gates_or_None, meta)."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointFormatError("bad magic (not an ADTK1 checkpoint)", 0)
    table = {}
    n_entries = r.u32("entry count")
    for _ in range(n_entries):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        rank = r.u8("rank")
        extents = [r.u32(f"extent of {name}") for _ in range(rank)]
        if any(e < 1 for e in extents):
            raise CheckpointFormatError(f"{name}: zero extent", r.offset)
        count = 1
        for e in extents:
            count *= e
            if count > MAX_TENSOR_ELEMENTS:
                raise CheckpointFormatError(f"{name}: extent overflow", r.offset)
        raw = r.take(4 * count, f"values of {name}")
        table[name] = np.frombuffer(raw, dtype="<f4").reshape(extents).astype(np.float64)
    blob = r.take(r.u32("metadata length"), "metadata")
    try:
        meta = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointFormatError("metadata blob is not valid JSON",
                                    r.offset - len(blob)) from None

    config = _config_from_meta(meta["backbone"])
    kernels = [[] for _ in config.blocks]
    biases = [[] for _ in config.blocks]
    for bi, b in enumerate(config.blocks):
        for li in range(b.conv_count):
            try:
                kernels[bi].append(table[f"backbone/block{bi + 1}/conv{li + 1}/kernel"])
                biases[bi].append(table[f"backbone/block{bi + 1}/conv{li + 1}/bias"])
            except KeyError as e:
                raise CheckpointFormatError(f"missing tensor {e.args[0]}", r.offset) from None
    weights = BackboneWeights(config=config, kernels=kernels, biases=biases).validate()
    gates = GateParams(phi=table["gates/phi"]) if meta.get("has_gates") else None
    return weights, gates, meta
