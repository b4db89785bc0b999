"""Procedural scene oracle.

A deterministic, non-differentiable renderer for a single car-like object on a
seeded background.  Paintable object pixels follow a per-pixel affine colour
model ``clamp(gain * tex + bias)``; wheels and windows keep fixed palette colours
and the background never depends on the texture.  The texture reaches the
object through the same repeated projection the attack uses, calibrated at the
scene's camera pose without jitter.
"""

from __future__ import annotations

import functools
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .boxes import Box
from .projection import PoseJitter, calibrate, project

CAR_LENGTH = 4.0
CAR_WIDTH = 1.8
CAR_HEIGHT = 1.5

TIRE_COLOR = np.array([0.08, 0.08, 0.09])
GLASS_COLOR = np.array([0.16, 0.21, 0.29])

DEFAULT_RESOLUTION = 64


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class CameraPose:
    distance: float
    pitch: float
    yaw: float

    def __post_init__(self):
        if not self.distance > 0:
            raise SceneError(f"camera distance must be > 0, got {self.distance}")
        if not 0.0 <= self.pitch < 90.0:
            raise SceneError(f"pitch must be in [0, 90), got {self.pitch}")
        object.__setattr__(self, "yaw", float(self.yaw) % 360.0)


@dataclass(frozen=True)
class SceneTransformation:
    scene_id: int
    camera: CameraPose
    light_direction: tuple[float, float, float] = (0.3, -0.5, 0.81)
    ambient_level: float = 0.05
    shadow_strength: float = 0.0
    background_seed: int = 0
    offset: tuple[float, float] = (0.0, 0.0)
    object_scale: float = 1.0
    ambient_tint: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        l = np.asarray(self.light_direction, dtype=np.float64)
        norm = float(np.linalg.norm(l))
        if not norm > 0:
            raise SceneError("light direction must be non-zero")
        if abs(norm - 1.0) > 1e-12:  # keep already-unit vectors untouched so dict round trips are exact
            l = l / norm
        object.__setattr__(self, "light_direction", tuple(float(v) for v in l))
        if not 0.0 <= self.ambient_level <= 1.0:
            raise SceneError("ambient_level must be in [0, 1]")
        if not 0.0 <= self.shadow_strength <= 1.0:
            raise SceneError("shadow_strength must be in [0, 1]")
        if not self.object_scale > 0:
            raise SceneError("object_scale must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["light_direction"] = list(self.light_direction)
        d["offset"] = list(self.offset)
        d["ambient_tint"] = list(self.ambient_tint)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneTransformation":
        return cls(
            scene_id=int(d["scene_id"]),
            camera=CameraPose(**d["camera"]),
            light_direction=tuple(d["light_direction"]),
            ambient_level=float(d["ambient_level"]),
            shadow_strength=float(d["shadow_strength"]),
            background_seed=int(d["background_seed"]),
            offset=tuple(d["offset"]),
            object_scale=float(d["object_scale"]),
            ambient_tint=tuple(d["ambient_tint"]),
        )

    def with_camera(self, camera: CameraPose) -> "SceneTransformation":
        return SceneTransformation(**{**self.__dict__, "camera": camera})


@dataclass(frozen=True)
class SegmentationMask:
    mask: np.ndarray
    paintable: np.ndarray


@dataclass(frozen=True)
class SceneLayout:
    """Per-pixel quantities of the affine colour model for one scene."""

    mask: np.ndarray
    paintable: np.ndarray
    gain: np.ndarray  # (N, N, 1)
    bias: np.ndarray  # (N, N, 3)
    fixed: np.ndarray  # non-paintable object colours, zero elsewhere
    background: np.ndarray
    extra: dict = field(default_factory=dict, compare=False)


def sample_scene(seed: int, camera: CameraPose | None = None, *,
                 distance_range=(5.0, 15.0), pitch_range=(0.0, 30.0)) -> SceneTransformation:
    """Random lighting, placement and background; random pose unless given."""
    rng = np.random.default_rng([7919, seed])
    if camera is None:
        camera = CameraPose(
            distance=float(rng.uniform(*distance_range)),
            pitch=float(rng.uniform(*pitch_range)),
            yaw=float(rng.uniform(0.0, 360.0)),
        )
    else:
        rng.uniform(size=3)
    az = rng.uniform(0.0, 2 * math.pi)
    elev = rng.uniform(math.radians(25), math.radians(75))
    light = (math.cos(elev) * math.cos(az), -math.sin(elev), math.cos(elev) * math.sin(az) * 0.5 + 0.5)
    tint = 1.0 - rng.uniform(0.0, 0.25, size=3)
    return SceneTransformation(
        scene_id=int(seed),
        camera=camera,
        light_direction=light,
        ambient_level=float(rng.uniform(0.02, 0.08)),
        shadow_strength=float(rng.uniform(0.0, 0.4)),
        background_seed=int(rng.integers(0, 2**31 - 1)),
        offset=(float(rng.uniform(-0.08, 0.08)), float(rng.uniform(-0.06, 0.1))),
        object_scale=float(rng.uniform(0.9, 1.1)),
        ambient_tint=tuple(float(t) for t in tint),
    )


def _superellipse(xs, ys, cx, cy, ax, ay, power=4.0):
    u = (xs - cx) / max(ax, 1e-6)
    v = (ys - cy) / max(ay, 1e-6)
    return np.abs(u) ** power + np.abs(v) ** power <= 1.0, u, v


def _background(scene: SceneTransformation, N: int) -> np.ndarray:
    rng = np.random.default_rng(scene.background_seed)
    ys, xs = np.mgrid[0:N, 0:N].astype(np.float64) / N
    horizon = rng.uniform(0.25, 0.45)
    sky = rng.uniform([0.45, 0.55, 0.65], [0.75, 0.85, 0.95])
    ground = rng.uniform([0.25, 0.25, 0.22], [0.5, 0.48, 0.45])
    img = np.where((ys < horizon)[..., None], sky, ground)
    img = img + 0.08 * (ys[..., None] - horizon)
    for _ in range(4):
        fx, fy = rng.uniform(0.5, 4.0, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        amp = rng.uniform(0.01, 0.04, size=3)
        img = img + amp * np.sin(2 * math.pi * (fx * xs + fy * ys) + phase)[..., None]
    for _ in range(int(rng.integers(1, 4))):
        x0 = rng.uniform(-0.1, 0.9)
        w = rng.uniform(0.08, 0.3)
        top = rng.uniform(0.0, horizon * 0.9)
        color = rng.uniform(0.3, 0.8, size=3)
        inside = (xs >= x0) & (xs < x0 + w) & (ys >= top) & (ys < horizon)
        img[inside] = color
    # ground clutter (gravel, foliage): blocky colour noise over the lower part of most scenes
    if rng.uniform() < 0.7:
        block = max(1, int(round(N / 64 * rng.choice([1, 2, 3, 4]))))
        cells = -(-N // block)
        noise = rng.uniform(-1.0, 1.0, size=(cells, cells, 3)).repeat(block, 0).repeat(block, 1)[:N, :N]
        amp = rng.uniform(0.08, 0.25)
        start = rng.uniform(horizon, 0.8)
        img = img + np.where((ys >= start)[..., None], amp * noise, 0.0)
    for _ in range(int(rng.integers(0, 3))):
        bx, by = rng.uniform(0.0, 1.0), rng.uniform(horizon - 0.1, 1.0)
        rx, ry = rng.uniform(0.05, 0.2, size=2)
        block = max(1, int(round(N / 64 * rng.choice([1, 2, 3]))))
        cells = -(-N // block)
        base = rng.uniform(0.1, 0.8, size=3)
        noise = rng.uniform(-0.25, 0.25, size=(cells, cells, 3)).repeat(block, 0).repeat(block, 1)[:N, :N]
        blob = ((xs - bx) / rx) ** 2 + ((ys - by) / ry) ** 2 <= 1.0
        img = np.where(blob[..., None], base + noise, img)
    return img


@functools.lru_cache(maxsize=512)
def scene_layout(scene: SceneTransformation, N: int = DEFAULT_RESOLUTION) -> SceneLayout:
    cam = scene.camera
    yaw = math.radians(cam.yaw)
    pitch = math.radians(cam.pitch)
    px_per_m = N / cam.distance * scene.object_scale
    side = abs(math.sin(yaw))
    front = abs(math.cos(yaw))
    half_w = 0.5 * (CAR_LENGTH * side + CAR_WIDTH * front) * px_per_m
    depth = CAR_LENGTH * front + CAR_WIDTH * side
    half_h = 0.5 * (CAR_HEIGHT * math.cos(pitch) + 0.5 * depth * math.sin(pitch)) * px_per_m
    cx = (N - 1) / 2.0 + scene.offset[0] * N
    cy = (N - 1) / 2.0 + scene.offset[1] * N

    ys, xs = np.mgrid[0:N, 0:N].astype(np.float64)
    body, bu, bv = _superellipse(xs, ys, cx, cy + 0.15 * half_h, half_w, 0.55 * half_h)
    cab_w = half_w * (0.55 + 0.3 * front)
    cabin, cu, cv = _superellipse(xs, ys, cx, cy - 0.45 * half_h, cab_w, 0.5 * half_h, power=3.0)
    window, _, _ = _superellipse(xs, ys, cx, cy - 0.45 * half_h, 0.78 * cab_w, 0.3 * half_h, power=3.0)
    r = 0.28 * half_h
    wheel_dx = half_w * (0.62 + 0.1 * front)
    wheel_rx = r * (0.45 + 0.55 * side)
    wheels = np.zeros((N, N), dtype=bool)
    for sgn in (-1.0, 1.0):
        w, _, _ = _superellipse(xs, ys, cx + sgn * wheel_dx, cy + 0.7 * half_h, wheel_rx, r, power=2.0)
        wheels |= w

    raw = body | cabin | wheels
    labels, count = ndimage.label(raw)
    if count == 0:
        raise SceneError("empty object")
    sizes = ndimage.sum_labels(raw, labels, index=np.arange(1, count + 1))
    mask = labels == (int(np.argmax(sizes)) + 1)

    window = window & mask & ~body
    wheels = wheels & mask & ~window
    paintable = mask & ~window & ~wheels

    # pillow-shaped normals: body coordinates below the cabin, cabin above
    use_cab = cabin & ~body
    nu = np.where(use_cab, cu, bu)
    nv = np.where(use_cab, cv, bv)
    normal = np.stack([0.7 * np.clip(nu, -1, 1), 0.7 * np.clip(nv, -1, 1), np.ones_like(nu)], axis=-1)
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)

    l = np.asarray(scene.light_direction)
    cy_, sy_ = math.cos(yaw), math.sin(yaw)
    l = np.array([cy_ * l[0] + sy_ * l[2], l[1], -sy_ * l[0] + cy_ * l[2]])
    cp, sp = math.cos(pitch), math.sin(pitch)
    l = np.array([l[0], cp * l[1] - sp * l[2], sp * l[1] + cp * l[2]])
    l /= np.linalg.norm(l)
    lambert = np.clip(normal @ l, 0.0, 1.0)
    shade = 0.3 + 0.55 * lambert

    rng = np.random.default_rng([104729, scene.scene_id])
    ang = rng.uniform(0, 2 * math.pi)
    cut = rng.uniform(-0.6, 0.6) * half_w
    soft = 0.15 * half_w + 0.5
    t = (math.cos(ang) * (xs - cx) + math.sin(ang) * (ys - cy) - cut) / soft
    shadow = 1.0 / (1.0 + np.exp(-np.clip(t, -50, 50)))
    gain = shade * (1.0 - scene.shadow_strength * shadow)

    half = l + np.array([0.0, 0.0, 1.0])
    half /= np.linalg.norm(half)
    spec = 0.06 * np.clip(normal @ half, 0.0, 1.0) ** 16
    bias = scene.ambient_level * np.asarray(scene.ambient_tint) + spec[..., None]

    fixed = np.zeros((N, N, 3))
    fixed[wheels] = TIRE_COLOR * shade[wheels][:, None]
    fixed[window] = GLASS_COLOR * shade[window][:, None]

    background = _background(scene, N)
    contact, _, _ = _superellipse(xs, ys, cx, cy + 0.92 * half_h, 1.08 * half_w, 0.22 * half_h + 1.0, power=2.0)
    background = np.where(contact[..., None], background * 0.55, background)
    background = np.clip(background, 0.0, 1.0)

    gain = np.where(paintable, gain, 0.0)[..., None]
    bias = np.where(paintable[..., None], bias, 0.0)
    arrays = [mask, paintable, gain, bias, fixed, background]
    for a in arrays:
        a.setflags(write=False)
    return SceneLayout(*arrays, extra={"shade": shade})


def _as_texture(texture) -> np.ndarray:
    tex = np.asarray(texture, dtype=np.float64)
    if tex.ndim == 1:
        tex = tex.reshape(1, 1, -1)
    if tex.ndim != 3 or tex.shape[0] != tex.shape[1] or tex.shape[2] != 3:
        raise SceneError(f"texture must be (n, n, 3), got {tex.shape}")
    if not np.all(np.isfinite(tex)) or tex.min() < 0.0 or tex.max() > 1.0:
        raise SceneError("texture values must lie in [0, 1]")
    return tex


def screen_texture(scene: SceneTransformation, texture, N: int = DEFAULT_RESOLUTION) -> np.ndarray:
    """The texture tiled into screen space at the scene's pose (no jitter)."""
    tex = _as_texture(texture)
    m = calibrate(scene.camera, PoseJitter.zero(), N, tex.shape[0])
    return project(tex, m, N)


def render(scene: SceneTransformation, texture, N: int = DEFAULT_RESOLUTION) -> np.ndarray:
    """Render the scene with a texture; returns an ``(N, N, 3)`` float64 image in [0, 1]."""
    lay = scene_layout(scene, N)
    tex = screen_texture(scene, texture, N)
    painted = np.clip(lay.gain * tex + lay.bias, 0.0, 1.0)
    obj = np.where(lay.paintable[..., None], painted, lay.fixed)
    return np.where(lay.mask[..., None], obj, lay.background)


def segment(scene: SceneTransformation, N: int = DEFAULT_RESOLUTION) -> SegmentationMask:
    lay = scene_layout(scene, N)
    return SegmentationMask(mask=lay.mask.copy(), paintable=lay.paintable.copy())


def object_box(mask) -> Box:
    """Tightest box ``(x_min, y_min, x_max, y_max)`` around the mask pixels."""
    m = mask.mask if isinstance(mask, SegmentationMask) else np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        raise SceneError("empty mask has no bounding box")
    return Box(float(cols[0]), float(rows[0]), float(cols[-1]), float(rows[-1]))
