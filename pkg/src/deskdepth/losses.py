"""Self-supervised photometric training objective.

The loss compares the target frame against each source frame warped into the
target view, takes the per-pixel minimum over sources so occlusions fall out,
masks pixels that a static camera would explain just as well, and adds an
edge-aware smoothness prior on mean-normalized disparity.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, constant

log = logging.getLogger(__name__)

BIG_ERROR = 1e9  # stands in for "no evidence here" before the per-pixel min


class NonFiniteLoss(Exception):
    pass


@dataclass
class LossConfig:
    alpha: float = 0.85            # SSIM vs L1 blend
    lambda_smooth: float = 1e-3
    ssim_window: int = 3
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2
    automask_enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.ssim_window < 1 or self.ssim_window % 2 == 0:
            raise ValueError("ssim_window must be odd and positive")
        if self.lambda_smooth < 0:
            raise ValueError("lambda_smooth must be non-negative")


@dataclass
class LossBreakdown:
    total: Tensor
    photometric: float
    smoothness: float
    mask_coverage: float


_BOX_CACHE = {}


def reflect_box_matrix(n, window):
    """[n,n] matrix applying a reflect-padded box mean along one axis.

    Reflection mirrors about the edge pixel without repeating it, so row i of
    the result averages the window centered at i with out-of-range taps folded
    back inside. Rows sum to one."""
    key = (n, window)
    if key in _BOX_CACHE:
        return _BOX_CACHE[key]
    r = window // 2
    idx = np.pad(np.arange(n), r, mode="reflect")
    m = np.zeros((n, n))
    for i in range(n):
        for j in idx[i:i + window]:
            m[i, j] += 1.0 / window
    _BOX_CACHE[key] = m
    return m


def box_filter(x, window):
    """Reflect-padded box mean over each [H,W] slice of a [C,H,W] tensor."""
    if not isinstance(x, Tensor):
        x = constant(x)
    c, h, w = x.shape
    bh = constant(reflect_box_matrix(h, window))
    bw_t = constant(reflect_box_matrix(w, window).T)
    rows = T.reshape(T.moveaxis(x, 0, 1), (h, c * w))
    rows = T.matmul(bh, rows)
    cols = T.reshape(T.moveaxis(T.reshape(rows, (h, c, w)), 1, 0), (c * h, w))
    return T.reshape(T.matmul(cols, bw_t), (c, h, w))


def ssim(a, b, cfg):
    """Per-pixel structural similarity of two [C,H,W] images, channel-meaned.

    Local statistics come from a reflect-padded box window; the result is
    clamped to [-1, 1] and has shape [H,W]."""
    mu_a = box_filter(a, cfg.ssim_window)
    mu_b = box_filter(b, cfg.ssim_window)
    var_a = box_filter(a * a, cfg.ssim_window) - mu_a * mu_a
    var_b = box_filter(b * b, cfg.ssim_window) - mu_b * mu_b
    cov = box_filter(a * b, cfg.ssim_window) - mu_a * mu_b
    c1, c2 = cfg.ssim_c1, cfg.ssim_c2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    per_channel = T.clamp(num / den, -1.0, 1.0)
    return T.reduce_mean(per_channel, axes=(0,))


def photometric_error(a, b, cfg):
    """Blended dissimilarity map [H,W] between two [C,H,W] images."""
    l1 = T.reduce_mean(T.abs_(a - b), axes=(0,))
    if cfg.alpha == 0.0:
        return l1
    sim = ssim(a, b, cfg)
    return (cfg.alpha / 2.0) * (1.0 - sim) + (1.0 - cfg.alpha) * l1


def _masked_stack(pe_maps, valid_masks):
    """Stack [H,W] error maps to [N,H,W], invalid pixels pushed to BIG_ERROR."""
    layers = []
    for pe, valid in zip(pe_maps, valid_masks):
        v = valid if isinstance(valid, Tensor) else constant(valid)
        h, w = pe.shape
        masked = pe * v + BIG_ERROR * (1.0 - v)
        layers.append(T.reshape(masked, (1, h, w)))
    return T.concat(layers, axis=0)


def min_over_sources(pe_maps, valid_masks):
    """Per-pixel minimum error over sources and the any-source validity mask.

    Returns (min_pe [H,W] tensor, any_valid [H,W] array). Pixels no source
    can explain carry BIG_ERROR in min_pe and 0 in any_valid."""
    min_pe = T.reduce_min(_masked_stack(pe_maps, valid_masks), axis=0)
    any_valid = np.zeros(min_pe.shape)
    for valid in valid_masks:
        v = valid.data if isinstance(valid, Tensor) else np.asarray(valid)
        any_valid = np.maximum(any_valid, v)
    return min_pe, any_valid


def automask(target, sources, valid_masks, min_warp_pe_data, cfg):
    """0/1 map of pixels where warping beats simply not moving.

    The still-camera error compares the target against each unwarped source
    under the same validity masking, and a pixel survives only if the best
    warped error is strictly lower. Everything here runs on plain values, so
    the mask never carries gradient."""
    target_c = constant(np.asarray(target.data if isinstance(target, Tensor) else target))
    identity_pes = []
    for src in sources:
        src_c = constant(np.asarray(src.data if isinstance(src, Tensor) else src))
        identity_pes.append(photometric_error(src_c, target_c, cfg))
    min_identity, _ = min_over_sources(identity_pes, valid_masks)
    return (min_warp_pe_data < min_identity.data).astype(np.float64)


def smoothness_loss(depth, image):
    """Edge-aware first-order smoothness of mean-normalized disparity.

    Disparity gradients are cheap where the image itself has edges and
    expensive on flat texture; normalizing by the mean disparity makes the
    prior invariant to global depth scale."""
    disp = 1.0 / depth
    dstar = disp / T.reduce_mean(disp)
    h, w = depth.shape
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    gx = np.mean(np.abs(img[:, :, 1:] - img[:, :, :-1]), axis=0)
    gy = np.mean(np.abs(img[:, 1:, :] - img[:, :-1, :]), axis=0)
    dx = T.slice_axis(dstar, 1, 1, w) - T.slice_axis(dstar, 1, 0, w - 1)
    dy = T.slice_axis(dstar, 0, 1, h) - T.slice_axis(dstar, 0, 0, h - 1)
    term_x = T.reduce_mean(T.abs_(dx) * constant(np.exp(-gx)))
    term_y = T.reduce_mean(T.abs_(dy) * constant(np.exp(-gy)))
    return term_x + term_y


def total_loss(target, warped_sources, valid_masks, sources, depth, cfg):
    """Full training objective for one target frame.

    target          [C,H,W] image (values)
    warped_sources  list of [C,H,W] tensors, each source warped into the target
    valid_masks     matching list of [H,W] 0/1 masks from the warp
    sources         list of unwarped [C,H,W] source images (values)
    depth           [H,W] depth tensor that produced the warps
    """
    if not warped_sources:
        raise ValueError("need at least one warped source")
    if len(warped_sources) != len(valid_masks) or len(sources) != len(warped_sources):
        raise ValueError("warped sources, masks, and sources must align")
    target_c = constant(np.asarray(target.data if isinstance(target, Tensor) else target))

    pe_maps = [photometric_error(w, target_c, cfg) for w in warped_sources]
    min_pe, any_valid = min_over_sources(pe_maps, valid_masks)

    if cfg.automask_enabled:
        mask = automask(target_c, sources, valid_masks, min_pe.data, cfg)
    else:
        mask = np.ones(min_pe.shape)
    weight = mask * any_valid
    coverage = float(weight.mean())

    denom = float(weight.sum())
    if denom > 0.0:
        photometric = T.reduce_sum(min_pe * constant(weight)) / denom
    else:
        log.warning("photometric loss has zero coverage; contributing 0")
        photometric = constant(0.0)

    smooth = smoothness_loss(depth, target_c)
    total = photometric + cfg.lambda_smooth * smooth
    if not math.isfinite(total.item()):
        raise NonFiniteLoss("total loss is not finite")
    return LossBreakdown(total=total,
                         photometric=float(photometric.data),
                         smoothness=float(smooth.data),
                         mask_coverage=coverage)
