"""Depth and pose networks built on the tape engine.

Both networks are functional: parameters live in plain name->array dicts,
get lifted onto a tape as leaves for a training step, and flow through
forwards that close over nothing. The depth network is a small U-net whose
full-resolution features feed a query-based head: pooled queries score every
pixel, the scores aggregate features into learned depth bin centers, and the
per-pixel depth is a convex combination of those centers.

Downsampling uses 2x2 average pooling after stride-1 convolutions so every
stage halves the extents exactly under the strict conv geometry rules.
"""

import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .tensor import Tensor, constant, ShapeMismatch


class ManifestMismatch(Exception):
    pass


@dataclass
class NetworkConfig:
    encoder_channels: tuple = (12, 24)
    decoder_channels: tuple = (24, 12)
    query_count: int = 16
    feature_channels: int = 16
    pose_encoder_channels: tuple = (16,)
    pose_scale: float = 0.01
    d_min: float = 0.1
    d_max: float = 10.0
    seed: int = 0

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        self.decoder_channels = tuple(int(c) for c in self.decoder_channels)
        self.pose_encoder_channels = tuple(int(c) for c in self.pose_encoder_channels)
        if min(self.encoder_channels + self.decoder_channels +
               self.pose_encoder_channels) <= 0:
            raise ValueError("channel counts must be positive")
        if len(self.decoder_channels) != len(self.encoder_channels):
            raise ValueError("decoder must mirror the encoder stage count")
        if self.d_min <= 0 or self.d_max <= self.d_min:
            raise ValueError("need 0 < d_min < d_max")
        g = math.isqrt(self.query_count)
        if g * g != self.query_count:
            raise ValueError("query_count must be a perfect square (g x g grid)")
        if self.feature_channels <= 0:
            raise ValueError("feature_channels must be positive")
        if self.query_count * self.feature_channels < 2:
            raise ValueError("bins head needs at least 2 inputs")

    @property
    def query_grid(self):
        return math.isqrt(self.query_count)

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


# ---------------------------------------------------------------------------
# parameter initialization

def _conv_init(rng, c_out, c_in, k):
    scale = math.sqrt(2.0 / (c_in * k * k))
    return rng.normal(scale=scale, size=(c_out, c_in, k, k))


def _linear_init(rng, n_in, n_out):
    scale = math.sqrt(2.0 / n_in)
    return rng.normal(scale=scale, size=(n_in, n_out))


def init_depth_params(cfg, seed=None):
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    p = {}
    c_prev = 3
    for i, c in enumerate(cfg.encoder_channels):
        p[f"enc{i}_w"] = _conv_init(rng, c, c_prev, 3)
        p[f"enc{i}_b"] = np.zeros(c)
        c_prev = c
    p["mid_w"] = _conv_init(rng, c_prev, c_prev, 3)
    p["mid_b"] = np.zeros(c_prev)
    skips = list(cfg.encoder_channels[::-1])
    for i, c in enumerate(cfg.decoder_channels):
        c_in = c_prev + skips[i]
        p[f"dec{i}_w"] = _conv_init(rng, c, c_in, 3)
        p[f"dec{i}_b"] = np.zeros(c)
        c_prev = c
    p["feat_w"] = _conv_init(rng, cfg.feature_channels, c_prev, 3)
    p["feat_b"] = np.zeros(cfg.feature_channels)

    c_feat = cfg.feature_channels
    p["query_w"] = _linear_init(rng, c_feat, c_feat)
    p["query_b"] = np.zeros(c_feat)

    n_in = cfg.query_count * c_feat
    hidden = max(1, n_in // 2)
    p["bins_w1"] = _linear_init(rng, n_in, hidden)
    p["bins_b1"] = np.zeros(hidden)
    p["bins_w2"] = _linear_init(rng, hidden, cfg.query_count)
    p["bins_b2"] = np.zeros(cfg.query_count)
    return p


def init_pose_params(cfg, seed=None):
    base = cfg.seed if seed is None else seed
    rng = np.random.default_rng(base + 1)
    p = {}
    c_prev = 6
    for i, c in enumerate(cfg.pose_encoder_channels):
        p[f"pose_enc{i}_w"] = _conv_init(rng, c, c_prev, 3)
        p[f"pose_enc{i}_b"] = np.zeros(c)
        c_prev = c
    p["pose_head_w"] = _linear_init(rng, c_prev, 6)
    p["pose_head_b"] = np.zeros(6)
    return p


def lift_params(tape, params):
    """Turn an array dict into tape leaves (one call per training step)."""
    return {name: tape.leaf(arr) for name, arr in params.items()}


def freeze_params(params):
    """Wrap an array dict as constants for inference."""
    return {name: constant(arr) for name, arr in params.items()}


# ---------------------------------------------------------------------------
# building blocks

def _pool2(x):
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeMismatch(f"cannot halve odd extents {h}x{w}")
    r = T.reshape(x, (c, h // 2, 2, w // 2, 2))
    return T.reduce_mean(r, axes=(2, 4))


def _conv_elu(x, w, b):
    return T.elu(T.conv2d(x, w, b, stride=1, padding=1))


def _linear(x, w, b):
    return T.matmul(x, w) + b


# ---------------------------------------------------------------------------
# depth network

def depth_encoder_decoder(params, image, cfg):
    """U-shaped conv stack -> full-resolution feature map [C,H,W]."""
    if not isinstance(image, Tensor):
        image = constant(image)
    if image.data.ndim != 3 or image.shape[0] != 3:
        raise ShapeMismatch(f"expected [3,H,W] image, got {image.shape}")
    n = len(cfg.encoder_channels)
    _, h, w = image.shape
    if h % (1 << n) or w % (1 << n):
        raise ShapeMismatch(
            f"extents {h}x{w} not divisible by 2^{n} encoder stages")
    x = image
    skips = []
    for i in range(n):
        x = _conv_elu(x, params[f"enc{i}_w"], params[f"enc{i}_b"])
        skips.append(x)
        x = _pool2(x)
    x = _conv_elu(x, params["mid_w"], params["mid_b"])
    for i in range(n):
        x = T.upsample_bilinear(x, 2)
        x = T.concat([x, skips[n - 1 - i]], axis=0)
        x = _conv_elu(x, params[f"dec{i}_w"], params[f"dec{i}_b"])
    return T.conv2d(x, params["feat_w"], params["feat_b"], stride=1, padding=1)


def coarse_queries(params, features, cfg):
    """Pool features to a g x g grid and project each cell -> queries [Nq,C]."""
    c, h, w = features.shape
    g = cfg.query_grid
    if h % g or w % g:
        raise ShapeMismatch(f"extents {h}x{w} not divisible by query grid {g}")
    patches = T.reshape(features, (c, g, h // g, g, w // g))
    pooled = T.reduce_mean(patches, axes=(2, 4))        # [C,g,g]
    cells = T.transpose2d(T.reshape(pooled, (c, g * g)))  # [Nq,C]
    return _linear(cells, params["query_w"], params["query_b"])


def self_cost_volume(queries, features):
    """Per-query, per-pixel feature dot products -> [Nq,h,w]."""
    nq, c = queries.shape
    cf, h, w = features.shape
    if c != cf:
        raise ShapeMismatch(f"query channels {c} != feature channels {cf}")
    flat = T.reshape(features, (cf, h * w))
    return T.reshape(T.matmul(queries, flat), (nq, h, w))


def compute_depth_bins(params, volume, features, cfg):
    """Aggregate features under each query's attention and emit bin centers.

    Each query plane softmaxes over all pixels and pulls one C-vector out of
    the feature map; the concatenated vectors drive a 2-layer MLP whose Nq
    logits become bin widths (softmax) and then centers by stacking the
    widths across [d_min, d_max]. Centers are strictly increasing and
    strictly inside the range by construction.

    Returns (logits [Nq], centers [Nq]).
    """
    nq, h, w = volume.shape
    c = features.shape[0]
    attn = T.softmax(T.reshape(volume, (nq, h * w)), axis=1)
    gathered = T.matmul(attn, T.transpose2d(T.reshape(features, (c, h * w))))
    x = T.reshape(gathered, (1, nq * c))
    hidden = T.elu(_linear(x, params["bins_w1"], params["bins_b1"]))
    logits = T.reshape(_linear(hidden, params["bins_w2"], params["bins_b2"]), (nq,))
    widths = T.softmax(logits, axis=0)
    lower = constant(np.tril(np.ones((nq, nq))))
    cum = T.reshape(T.matmul(lower, T.reshape(widths, (nq, 1))), (nq,))
    centers = cfg.d_min + (cum - 0.5 * widths) * (cfg.d_max - cfg.d_min)
    return logits, centers


def probabilistic_depth(volume, centers):
    """Per-pixel depth as a probability-weighted mix of bin centers [h,w]."""
    nq, h, w = volume.shape
    if centers.shape != (nq,):
        raise ShapeMismatch(f"centers {centers.shape} do not match {nq} planes")
    probs = T.softmax(volume, axis=0)
    flat = T.reshape(probs, (nq, h * w))
    depth = T.matmul(T.reshape(centers, (1, nq)), flat)
    return T.reshape(depth, (h, w))


def depthnet_forward(params, image, cfg):
    """Image [3,H,W] -> depth map [H,W], strictly inside (d_min, d_max)."""
    features = depth_encoder_decoder(params, image, cfg)
    queries = coarse_queries(params, features, cfg)
    volume = self_cost_volume(queries, features)
    _, centers = compute_depth_bins(params, volume, features, cfg)
    return probabilistic_depth(volume, centers)


# ---------------------------------------------------------------------------
# pose network

def posenet_forward(params, img_target, img_ref, cfg):
    """Two [3,H,W] frames -> 6 pose parameters (rotation vector, translation).

    Capacity scales with the number of conv stages; each stage halves the
    extents. The head output is multiplied by pose_scale, whose small default
    keeps a freshly initialized network near the identity pose.
    """
    a = img_target if isinstance(img_target, Tensor) else constant(img_target)
    b = img_ref if isinstance(img_ref, Tensor) else constant(img_ref)
    if a.shape != b.shape:
        raise ShapeMismatch(f"frame shapes differ: {a.shape} vs {b.shape}")
    n = len(cfg.pose_encoder_channels)
    _, h, w = a.shape
    if h % (1 << n) or w % (1 << n):
        raise ShapeMismatch(
            f"extents {h}x{w} not divisible by 2^{n} pose stages")
    x = T.concat([a, b], axis=0)
    for i in range(n):
        x = _conv_elu(x, params[f"pose_enc{i}_w"], params[f"pose_enc{i}_b"])
        x = _pool2(x)
    pooled = T.reshape(T.reduce_mean(x, axes=(1, 2)), (1, x.shape[0]))
    out = T.reshape(_linear(pooled, params["pose_head_w"], params["pose_head_b"]), (6,))
    return out * cfg.pose_scale


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, depth_params, pose_params, cfg, height, width):
    """Write parameters as DTN1 files plus a manifest tying them together."""
    os.makedirs(path, exist_ok=True)
    entries = {}
    for prefix, params in (("depth", depth_params), ("pose", pose_params)):
        for name, arr in params.items():
            fname = f"{prefix}.{name}.dtn"
            T.write_dtn(os.path.join(path, fname), arr)
            entries[f"{prefix}.{name}"] = fname
    manifest = {"config": cfg.to_json(), "height": height, "width": width,
                "params": entries}
    with open(os.path.join(path, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def load_checkpoint(path):
    """Read a checkpoint directory -> (depth_params, pose_params, cfg, manifest)."""
    with open(os.path.join(path, "manifest.json")) as f:
        manifest = json.load(f)
    cfg = NetworkConfig.from_json(manifest["config"])
    depth_params, pose_params = {}, {}
    for full_name, fname in manifest["params"].items():
        prefix, name = full_name.split(".", 1)
        arr = T.read_dtn(os.path.join(path, fname))
        (depth_params if prefix == "depth" else pose_params)[name] = arr
    return depth_params, pose_params, cfg, manifest
