"""Procedural scenes with exact ground truth.

A scene is one or two planes (or a slanted plane) in a static world, painted
with a smooth analytic texture and photographed by a camera following a
configured motion path. Ray-plane intersection gives exact depth; the texture
is evaluated at the world-space hit point, so every frame observes the same
Lambertian world and ground-truth warps reproduce the target frame up to
bilinear interpolation error.

The default texture is a sum of long-wavelength cosine waves. Wavelengths are
chosen so that bilinear resampling of a rendered frame stays accurate to
~1e-6 while leaving enough shading gradient for photometric training.
"""

import json
import math
import os
import re
from dataclasses import dataclass

import numpy as np

from . import geometry as G
from . import tensor as T
from .tensor import constant


class DegenerateGeometry(Exception):
    pass


class IndexOutOfRange(Exception):
    pass


class MalformedHeader(Exception):
    pass


_LAYOUT_KINDS = {"single_plane", "two_planes", "slanted_plane"}
_TEXTURE_KINDS = {"smooth_ramp", "band_limited_noise", "checker"}

# Shortest noise wavelength in world units. At the far default plane (4 units,
# fx 80) this is 800 px per cycle, keeping bilinear resampling error under the
# generation-consistency budget; see tests for the measured margin.
NOISE_BASE_WAVELENGTH = 40.0
NOISE_TOTAL_AMPLITUDE = 0.45  # keeps channels inside [0.05, 0.95] unclipped

MIN_IN_VIEW_FRACTION = 0.8


@dataclass
class SceneConfig:
    width: int
    height: int
    intrinsics: G.CameraIntrinsics
    layout: dict
    texture: dict
    camera_motion: list
    seed: int = 0

    def __post_init__(self):
        if self.intrinsics.width != self.width or self.intrinsics.height != self.height:
            raise ValueError("intrinsics extents disagree with scene extents")
        kind = self.layout.get("kind")
        if kind not in _LAYOUT_KINDS:
            raise ValueError(f"unknown layout kind {kind!r}")
        if kind == "single_plane" and self.layout["depth"] <= 0:
            raise ValueError("plane depth must be positive")
        if kind == "two_planes":
            if self.layout["d1"] <= 0 or self.layout["d2"] <= 0:
                raise ValueError("plane depths must be positive")
            if not 0.0 < self.layout["split"] < 1.0:
                raise ValueError("split fraction must be inside (0, 1)")
        if kind == "slanted_plane":
            n = np.asarray(self.layout["normal"], dtype=np.float64)
            if n.shape != (3,) or np.linalg.norm(n) == 0:
                raise ValueError("slanted plane needs a nonzero 3-vector normal")
        if self.texture.get("kind") not in _TEXTURE_KINDS:
            raise ValueError(f"unknown texture kind {self.texture.get('kind')!r}")
        if len(self.camera_motion) < 1:
            raise ValueError("camera_motion must hold at least one pose")

    def to_json(self):
        return {"width": self.width, "height": self.height,
                "intrinsics": self.intrinsics.to_json(),
                "layout": self.layout, "texture": self.texture,
                "camera_motion": [p.to_json() for p in self.camera_motion],
                "seed": self.seed}

    @classmethod
    def from_json(cls, obj):
        return cls(width=int(obj["width"]), height=int(obj["height"]),
                   intrinsics=G.CameraIntrinsics.from_json(obj["intrinsics"]),
                   layout=dict(obj["layout"]), texture=dict(obj["texture"]),
                   camera_motion=[G.Pose.from_json(p) for p in obj["camera_motion"]],
                   seed=int(obj.get("seed", 0)))


@dataclass
class FrameTriple:
    image_prev: np.ndarray
    image_t: np.ndarray
    image_next: np.ndarray
    gt_depth_t: np.ndarray
    gt_pose_prev: G.Pose   # camera t -> camera t-1
    gt_pose_next: G.Pose   # camera t -> camera t+1


# ---------------------------------------------------------------------------
# textures (functions of the world-space hit point)

def _noise_waves(octaves, seed):
    """Frozen wave table: rows of (kx, ky, phase, amplitude)."""
    rng = np.random.default_rng(seed)
    weights = np.array([2.0 ** -o for o in range(octaves)])
    weights = weights / weights.sum() * NOISE_TOTAL_AMPLITUDE
    waves = []
    for o in range(octaves):
        wavelength = NOISE_BASE_WAVELENGTH * (2.0 ** o)
        k = 2.0 * math.pi / wavelength
        for _ in range(2):
            angle = rng.uniform(0.0, 2.0 * math.pi)
            phase = rng.uniform(0.0, 2.0 * math.pi)
            waves.append((k * math.cos(angle), k * math.sin(angle),
                          phase, weights[o] / 2.0))
    return np.array(waves)


def _texture_luminance(texture, x, y):
    """Signed shading field in [-0.45, 0.45] at world coordinates (x, y)."""
    kind = texture["kind"]
    if kind == "smooth_ramp":
        return 0.08 * x + 0.08 * y
    if kind == "band_limited_noise":
        waves = _noise_waves(int(texture.get("octaves", 3)),
                             int(texture.get("seed", 0)))
        out = np.zeros_like(x)
        for kx, ky, phase, amp in waves:
            out += amp * np.cos(kx * x + ky * y + phase)
        return out
    if kind == "checker":
        period = float(texture.get("period", 1.0))
        cell = np.floor(x / period) + np.floor(y / period)
        return np.where(cell % 2 == 0, 0.3, -0.3)
    raise ValueError(f"unknown texture kind {kind!r}")


def _texture_rgb(texture, x, y):
    lum = _texture_luminance(texture, x, y)
    return np.stack([0.5 + lum, 0.5 + 0.8 * lum, 0.5 + 0.6 * lum])


# ---------------------------------------------------------------------------
# rendering

def _two_planes_boundary_y(layout, intr):
    """World-space y of the near-plane edge, placed so the canonical identity
    camera sees exactly the configured top fraction at d1."""
    v_b = layout["split"] * intr.height - 0.5
    return layout["d1"] * (v_b - intr.cy) / intr.fy


def _plane_hits(scene, origin, dirs_world):
    """Ray parameter per pixel for the configured layout.

    dirs_world is [3,H,W] with unit camera-z normalization, so the returned
    parameter is exactly the camera-frame depth of the hit."""
    layout = scene.layout
    kind = layout["kind"]
    dz = dirs_world[2]

    def ray_to(n, c):
        den = n[0] * dirs_world[0] + n[1] * dirs_world[1] + n[2] * dirs_world[2]
        if np.any(np.abs(den) < 1e-9):
            raise DegenerateGeometry("ray parallel to scene plane")
        return (c - float(np.dot(n, origin))) / den

    if kind == "single_plane":
        t = ray_to(np.array([0.0, 0.0, 1.0]), layout["depth"])
    elif kind == "two_planes":
        t1 = ray_to(np.array([0.0, 0.0, 1.0]), layout["d1"])
        t2 = ray_to(np.array([0.0, 0.0, 1.0]), layout["d2"])
        y1 = origin[1] + t1 * dirs_world[1]
        t = np.where(y1 < _two_planes_boundary_y(layout, scene.intrinsics), t1, t2)
    else:
        n = np.asarray(layout["normal"], dtype=np.float64)
        t = ray_to(n, float(layout["offset"]))
    if np.any(t <= 0.0):
        raise DegenerateGeometry("scene surface behind the camera")
    _ = dz  # direction z row is identically 1 by construction
    return t


def render_frame(scene, camera_pose):
    """Render one view -> (image [3,H,W] in [0,1], depth [H,W]).

    Depth is the exact camera-frame z of the ray-plane intersection."""
    intr = scene.intrinsics
    m = camera_pose.matrix()
    r, origin = m[:3, :3], m[:3, 3]
    dirs_cam = G.camera_rays(intr)
    dirs_world = np.tensordot(r, dirs_cam, axes=(1, 0))
    t = _plane_hits(scene, origin, dirs_world)
    hit_x = origin[0] + t * dirs_world[0]
    hit_y = origin[1] + t * dirs_world[1]
    image = _texture_rgb(scene.texture, hit_x, hit_y)
    return image, t


def generate_triple(scene, t):
    """Render frames t-1, t, t+1 with ground-truth depth and relative poses."""
    if t - 1 < 0 or t + 1 >= len(scene.camera_motion):
        raise IndexOutOfRange(
            f"triple at {t} needs frames {t - 1}..{t + 1}, have "
            f"{len(scene.camera_motion)}")
    img_prev, _ = render_frame(scene, scene.camera_motion[t - 1])
    img_t, depth_t = render_frame(scene, scene.camera_motion[t])
    img_next, _ = render_frame(scene, scene.camera_motion[t + 1])
    pose_prev = G.matrix_to_pose(
        G.relative_transform(scene.camera_motion[t], scene.camera_motion[t - 1]))
    pose_next = G.matrix_to_pose(
        G.relative_transform(scene.camera_motion[t], scene.camera_motion[t + 1]))
    return FrameTriple(img_prev, img_t, img_next, depth_t, pose_prev, pose_next)


# ---------------------------------------------------------------------------
# image files

def write_ppm(path, image):
    """[3,H,W] values in [0,1] -> binary P6, maxval 255."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected [3,H,W] image, got {image.shape}")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must lie in [0,1]")
    _, h, w = image.shape
    quant = np.rint(image * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(quant.transpose(1, 2, 0).tobytes())


def write_pgm(path, gray):
    """[H,W] values in [0,1] -> binary P5, maxval 255."""
    if gray.ndim != 2:
        raise ValueError(f"expected [H,W] grayscale, got {gray.shape}")
    if gray.min() < 0.0 or gray.max() > 1.0:
        raise ValueError("values must lie in [0,1]")
    h, w = gray.shape
    quant = np.rint(gray * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(quant.tobytes())


def _read_netpbm(path, magic):
    with open(path, "rb") as f:
        blob = f.read()
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # with '#' comments allowed between them
    pos = 0
    tokens = []
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n|\S+)").match(blob, pos)
        if m is None:
            raise MalformedHeader(f"{path}: truncated header")
        pos = m.end()
        tok = m.group(1)
        if not tok.startswith(b"#"):
            tokens.append(tok)
    if tokens[0] != magic:
        raise MalformedHeader(f"{path}: expected {magic.decode()}, got {tokens[0]!r}")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise MalformedHeader(f"{path}: non-numeric header fields")
    if maxval != 255:
        raise MalformedHeader(f"{path}: only maxval 255 supported, got {maxval}")
    payload = blob[pos + 1:]  # single whitespace byte after maxval
    return w, h, payload


def read_ppm(path):
    """Binary P6 -> [3,H,W] float in [0,1]."""
    w, h, payload = _read_netpbm(path, b"P6")
    if len(payload) < 3 * w * h:
        raise MalformedHeader(f"{path}: truncated pixel data")
    arr = np.frombuffer(payload[:3 * w * h], dtype=np.uint8)
    return arr.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pgm(path):
    """Binary P5 -> [H,W] float in [0,1]."""
    w, h, payload = _read_netpbm(path, b"P5")
    if len(payload) < w * h:
        raise MalformedHeader(f"{path}: truncated pixel data")
    arr = np.frombuffer(payload[:w * h], dtype=np.uint8)
    return arr.reshape(h, w).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# scene directories

def generate_scene(scene, out_dir):
    """Render every frame and write the scene directory layout.

    Checks that adjacent-frame warps keep enough pixels in view before
    writing anything."""
    frames = []
    depths = []
    for pose in scene.camera_motion:
        img, depth = render_frame(scene, pose)
        frames.append(img)
        depths.append(depth)
    for i in range(len(frames) - 1):
        rel = G.relative_transform(scene.camera_motion[i], scene.camera_motion[i + 1])
        _, valid = G.synthesize_view(constant(frames[i + 1]), constant(depths[i]),
                                     constant(rel), scene.intrinsics)
        frac = float(valid.data.mean())
        if frac < MIN_IN_VIEW_FRACTION:
            raise ValueError(
                f"motion {i}->{i + 1} keeps only {frac:.2f} of pixels in view")

    os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "depth"), exist_ok=True)
    with open(os.path.join(out_dir, "scene.json"), "w") as f:
        json.dump(scene.to_json(), f, indent=2, sort_keys=True)
    with open(os.path.join(out_dir, "poses.json"), "w") as f:
        json.dump([p.to_json() for p in scene.camera_motion], f, indent=2)
    for i, (img, depth) in enumerate(zip(frames, depths)):
        write_ppm(os.path.join(out_dir, "frames", f"{i:04d}.ppm"), img)
        T.write_dtn(os.path.join(out_dir, "depth", f"{i:04d}.dtn"), depth)
    return len(frames)


def load_scene(scene_dir):
    """Read a scene directory -> (SceneConfig, frames, depths, poses)."""
    with open(os.path.join(scene_dir, "scene.json")) as f:
        scene = SceneConfig.from_json(json.load(f))
    with open(os.path.join(scene_dir, "poses.json")) as f:
        poses = [G.Pose.from_json(p) for p in json.load(f)]
    frames = []
    depths = []
    for i in range(len(poses)):
        frames.append(read_ppm(os.path.join(scene_dir, "frames", f"{i:04d}.ppm")))
        depths.append(T.read_dtn(os.path.join(scene_dir, "depth", f"{i:04d}.dtn")))
    return scene, frames, depths, poses


# ---------------------------------------------------------------------------
# canonical benchmark scene

def default_camera_motion(n_frames, step=0.06, wobble=0.015):
    """Pure-x dolly with per-frame step variation.

    Varying the step keeps a constant-output pose network from explaining the
    motion; keeping it parallel to the two-planes boundary avoids any
    disocclusion, which the generation-consistency bound depends on."""
    poses = []
    x = 0.0
    for i in range(n_frames):
        poses.append(G.Pose(np.zeros(3), np.array([x, 0.0, 0.0])))
        x += step + wobble * math.sin(1.7 * i)
    return poses


def default_scene_config(seed=0, n_frames=12, width=96, height=32):
    intr = G.CameraIntrinsics(fx=80.0, fy=80.0, cx=(width - 1) / 2,
                              cy=(height - 1) / 2, width=width, height=height)
    return SceneConfig(
        width=width, height=height, intrinsics=intr,
        layout={"kind": "two_planes", "d1": 2.0, "d2": 4.0, "split": 0.5},
        texture={"kind": "band_limited_noise", "octaves": 3, "seed": seed},
        camera_motion=default_camera_motion(n_frames),
        seed=seed)


def static_scene_config(seed=0, n_frames=5, width=96, height=32):
    """Same world, camera never moves; exercises auto-masking."""
    cfg = default_scene_config(seed=seed, n_frames=n_frames,
                               width=width, height=height)
    cfg.camera_motion = [G.Pose(np.zeros(3), np.zeros(3)) for _ in range(n_frames)]
    return cfg
