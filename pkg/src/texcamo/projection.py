"""Repeated texture projection.

A small ``n x n`` base pattern is mapped to an ``N x N`` screen-space image by
a homography ``M = M_rot @ M_scale @ M_shift`` that takes texture coordinates
to pixel coordinates.  Every output pixel is inverse-warped into texture space
and sampled bilinearly with wrap-around on both axes, so the pattern repeats
over the whole image.

Coordinates are ``(x, y)`` = ``(column, row)``; pixel ``(i, j)`` sits at the
integer location ``(j, i)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import torch

# Texel coordinates are snapped to this grid before wrapping, so lattice
# translations by whole periods give bitwise-identical output.
_COORD_QUANTUM = 2.0 ** -20

REFERENCE_DISTANCE = 5.0
TEXELS_ACROSS_AT_REFERENCE = 16


class ProjectionError(ValueError):
    pass


@dataclass(frozen=True)
class JitterRanges:
    """Symmetric ranges that random pose jitter is drawn from."""

    pitch_deg: float = 5.0
    yaw_deg: float = 5.0
    shift: bool = True
    scale_low: float = 0.9
    scale_high: float = 1.1


@dataclass(frozen=True)
class PoseJitter:
    d_pitch: float = 0.0
    d_yaw: float = 0.0
    d_shift: tuple[float, float] = (0.0, 0.0)
    d_scale: float = 1.0
    seed: int | None = None

    @classmethod
    def zero(cls) -> "PoseJitter":
        return cls()

    @classmethod
    def sample(cls, seed: int, n: int, ranges: JitterRanges | None = None) -> "PoseJitter":
        ranges = ranges or JitterRanges()
        rng = np.random.default_rng(seed)
        d_pitch = rng.uniform(-ranges.pitch_deg, ranges.pitch_deg)
        d_yaw = rng.uniform(-ranges.yaw_deg, ranges.yaw_deg)
        if ranges.shift:
            dx, dy = rng.uniform(0.0, n, size=2)
        else:
            dx = dy = 0.0
        d_scale = rng.uniform(ranges.scale_low, ranges.scale_high)
        return cls(float(d_pitch), float(d_yaw), (float(dx), float(dy)), float(d_scale), seed)


def shift_matrix(dx: float, dy: float) -> np.ndarray:
    m = np.eye(3)
    m[0, 2] = dx
    m[1, 2] = dy
    return m


def scale_matrix(s: float) -> np.ndarray:
    if not s > 0:
        raise ProjectionError(f"scale must be positive, got {s}")
    return np.diag([float(s), float(s), 1.0])


def rotation_3d(pitch_deg: float, yaw_deg: float) -> np.ndarray:
    """Rotation of the texture plane: tilt about the horizontal image axis,
    then spin about the plane normal (the vertical axis of a ground-parallel
    surface)."""
    p = math.radians(pitch_deg)
    y = math.radians(yaw_deg)
    rx = np.array([[1.0, 0.0, 0.0],
                   [0.0, math.cos(p), -math.sin(p)],
                   [0.0, math.sin(p), math.cos(p)]])
    rz = np.array([[math.cos(y), -math.sin(y), 0.0],
                   [math.sin(y), math.cos(y), 0.0],
                   [0.0, 0.0, 1.0]])
    return rx @ rz


def rot3d_matrix(pitch: float, yaw: float, focal: float, center: float | None = None) -> np.ndarray:
    """Plane-induced homography ``K R K^-1`` of a pinhole camera.

    ``center`` is the principal point (same on both axes); it defaults to
    ``focal / 2``, which is the image centre when ``focal == N``.
    """
    if abs(pitch) >= 90.0:
        raise ProjectionError(f"pitch {pitch} deg gives a degenerate projection")
    if not focal > 0:
        raise ProjectionError("focal length must be positive")
    c = focal / 2.0 if center is None else center
    k = np.array([[focal, 0.0, c], [0.0, focal, c], [0.0, 0.0, 1.0]])
    k_inv = np.array([[1.0 / focal, 0.0, -c / focal], [0.0, 1.0 / focal, -c / focal], [0.0, 0.0, 1.0]])
    return k @ rotation_3d(pitch, yaw) @ k_inv


def texel_scale(distance: float, N: int) -> float:
    """Screen pixels per texel: ``N / 16`` at 5 m, shrinking as ``1 / distance``."""
    if not distance > 0:
        raise ProjectionError("distance must be positive")
    s0 = N / TEXELS_ACROSS_AT_REFERENCE
    return s0 * REFERENCE_DISTANCE / distance


def focal_length(N: int) -> float:
    return float(N)


def calibrate(pose, jitter: PoseJitter, N: int, n: int) -> np.ndarray:
    """Projection matrix for a camera pose plus jitter.

    ``pose`` is any object with ``distance``, ``pitch`` and ``yaw`` attributes.
    """
    if N < 1 or n < 1:
        raise ProjectionError("N and n must be >= 1")
    rot = rot3d_matrix(pose.pitch + jitter.d_pitch, pose.yaw + jitter.d_yaw,
                       focal_length(N), center=(N - 1) / 2.0)
    scale = scale_matrix(texel_scale(pose.distance, N) * jitter.d_scale)
    shift = shift_matrix(*jitter.d_shift)
    return rot @ scale @ shift


def _source_coords(m: np.ndarray, N: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3):
        raise ProjectionError(f"projection matrix must be 3x3, got {m.shape}")
    if not abs(np.linalg.det(m)) > 1e-12:
        raise ProjectionError("projection matrix is singular")
    inv = np.linalg.inv(m)
    ys, xs = np.mgrid[0:N, 0:N].astype(np.float64)
    u = inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]
    v = inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]
    w = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    if np.any(np.abs(w) < 1e-12):
        raise ProjectionError("projection maps a pixel to infinity")
    u = np.round(u / w / _COORD_QUANTUM) * _COORD_QUANTUM
    v = np.round(v / w / _COORD_QUANTUM) * _COORD_QUANTUM
    return np.mod(u, n), np.mod(v, n)


def sampling_grid(m: np.ndarray, N: int, n: int):
    """Integer texel indices and bilinear fractions for every output pixel.

    Returns ``(x0, x1, y0, y1, fx, fy)``; the index arrays are ``(N, N)`` ints
    and the fractions ``(N, N)`` float64 in ``[0, 1)``.
    """
    u, v = _source_coords(m, N, n)
    x0 = np.floor(u)
    y0 = np.floor(v)
    fx = u - x0
    fy = v - y0
    x0 = x0.astype(np.int64) % n
    y0 = y0.astype(np.int64) % n
    return x0, (x0 + 1) % n, y0, (y0 + 1) % n, fx, fy


def project(base, m, N: int):
    """Warp a base texture to an ``N x N`` image with wrap-around bilinear sampling.

    ``base`` is ``(n, n, 3)`` (numpy or torch).  Torch input keeps the autograd
    graph, so the result is differentiable w.r.t. the texel values.  Numpy in,
    numpy out.
    """
    as_numpy = not isinstance(base, torch.Tensor)
    tex = torch.as_tensor(np.asarray(base)) if as_numpy else base
    if tex.ndim != 3 or tex.shape[0] != tex.shape[1]:
        raise ProjectionError(f"base texture must be (n, n, C), got {tuple(tex.shape)}")
    n = tex.shape[0]
    x0, x1, y0, y1, fx, fy = sampling_grid(m, N, n)
    x0, x1, y0, y1 = (torch.from_numpy(a) for a in (x0, x1, y0, y1))
    fx = torch.from_numpy(fx).to(tex.dtype).unsqueeze(-1)
    fy = torch.from_numpy(fy).to(tex.dtype).unsqueeze(-1)
    # lerp form keeps constant textures exactly constant
    top = tex[y0, x0] + fx * (tex[y0, x1] - tex[y0, x0])
    bottom = tex[y1, x0] + fx * (tex[y1, x1] - tex[y1, x0])
    out = top + fy * (bottom - top)
    return out.numpy() if as_numpy else out


def project_batch(base: torch.Tensor, matrices, N: int) -> torch.Tensor:
    return torch.stack([project(base, m, N) for m in matrices])


def matrix_to_json(m: np.ndarray) -> str:
    return json.dumps([float(v) for v in np.asarray(m, dtype=np.float64).reshape(-1)])


def matrix_from_json(text: str) -> np.ndarray:
    values = json.loads(text)
    if len(values) != 9:
        raise ProjectionError("matrix JSON must hold 9 row-major values")
    return np.asarray(values, dtype=np.float64).reshape(3, 3)
