"""Cameras, rays, and volume rendering.

Conventions: world box [-1, 1]^3; camera positions on a sphere around the
origin with polar measured from +z and azimuth from +x; cameras look at the
origin with world +z as up. The pixel grid is corner-aligned: pixel (0, 0)
maps to the upper-left frustum corner, so a W-pixel row spans the full
horizontal field of view with u_j = 2j/(W-1) - 1.

Ray setup runs in float64 numpy; sample positions are cast to the model dtype
before encoding queries. Compositing is standard alpha blending over
stratified samples with a fixed per-ray bin width.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from . import field as field_mod
from .errors import InvalidInputError
from .scene import SceneModel


@dataclass(frozen=True)
class CameraPose:
    polar_deg: float
    azimuth_deg: float
    radius: float
    fov_deg: float

    def position(self) -> np.ndarray:
        th = math.radians(self.polar_deg)
        ph = math.radians(self.azimuth_deg)
        return self.radius * np.array([math.sin(th) * math.cos(ph),
                                       math.sin(th) * math.sin(ph),
                                       math.cos(th)])


def reference_pose(radius: float, fov_deg: float) -> CameraPose:
    """The fixed pose the reference image is tied to: equator, azimuth 0."""
    return CameraPose(90.0, 0.0, radius, fov_deg)


def camera_basis(pose: CameraPose) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(position, forward, right, up), all unit except position."""
    pos = pose.position()
    forward = -pos / np.linalg.norm(pos)
    world_up = np.array([0.0, 0.0, 1.0])
    if abs(float(forward @ world_up)) > 1.0 - 1e-8:
        world_up = np.array([1.0, 0.0, 0.0])  # degenerate at the poles
    right = np.cross(forward, world_up)
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    return pos, forward, right, up


def generate_rays(pose: CameraPose, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit ray directions for every pixel, row-major.

    Returns (origins (H*W, 3), directions (H*W, 3)) in float64. The vertical
    field of view is fov_deg; the horizontal one scales by W/H.
    """
    if height < 2 or width < 2:
        raise InvalidInputError("image must be at least 2x2 for a corner-aligned grid")
    pos, forward, right, up = camera_basis(pose)
    tan_half = math.tan(math.radians(pose.fov_deg) / 2.0)
    u = (2.0 * np.arange(width) / (width - 1) - 1.0) * tan_half * (width / height)
    v = (1.0 - 2.0 * np.arange(height) / (height - 1)) * tan_half
    dirs = (forward[None, None, :]
            + u[None, :, None] * right[None, None, :]
            + v[:, None, None] * up[None, None, :])
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    origins = np.broadcast_to(pos, dirs.shape)
    return origins.reshape(-1, 3).copy(), dirs.reshape(-1, 3)


def ray_box_intersect(origins: np.ndarray, dirs: np.ndarray,
                      lo: float = -1.0, hi: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Slab test against the axis-aligned box; near clamped to 0.

    Misses come back with far <= near (and contribute nothing downstream).
    """
    d = np.where(np.abs(dirs) < 1e-15, 1e-15, dirs)  # parallel rays -> huge finite t
    inv = 1.0 / d
    t0 = (lo - origins) * inv
    t1 = (hi - origins) * inv
    near = np.minimum(t0, t1).max(axis=1)
    far = np.maximum(t0, t1).min(axis=1)
    near = np.maximum(near, 0.0)
    return near, np.maximum(far, near)


@dataclass
class CompositeResult:
    rgb: torch.Tensor      # (N, 3)
    depth: torch.Tensor    # (N,)
    opacity: torch.Tensor  # (N,)
    weights: torch.Tensor  # (N, S)


def composite(densities: torch.Tensor, colors: torch.Tensor, deltas: torch.Tensor,
              background: torch.Tensor, distances: torch.Tensor | None = None) -> CompositeResult:
    """Alpha-blend samples front to back.

    densities (N, S) nonnegative, colors (N, S, 3), deltas (N, 1) or (N, S)
    sample spacing, background (3,). distances (N, S) are the sample depths
    for the expected-depth output; when omitted they default to midpoints of
    the delta bins. Depth is weight-normalized (floor 1e-4 on the total).
    """
    alpha = 1.0 - torch.exp(-densities * deltas)
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alpha[:, :1]), 1.0 - alpha[:, :-1]], dim=1), dim=1)
    weights = trans * alpha
    opacity = weights.sum(dim=1)
    rgb = (weights.unsqueeze(2) * colors).sum(dim=1) + (1.0 - opacity).unsqueeze(1) * background
    if distances is None:
        spaced = deltas.expand_as(densities)
        distances = torch.cumsum(spaced, dim=1) - 0.5 * spaced
    depth = (weights * distances).sum(dim=1) / opacity.clamp(min=1e-4)
    return CompositeResult(rgb=rgb, depth=depth, opacity=opacity, weights=weights)


# Depth is reported as 0 where a ray saw almost nothing.
OPACITY_DEPTH_CUTOFF = 0.01


@dataclass
class RenderOutput:
    """One rendered frame; tensors keep their autograd graph."""
    rgb: torch.Tensor      # (H, W, 3)
    depth: torch.Tensor    # (H, W)
    opacity: torch.Tensor  # (H, W)
    pose: CameraPose
    time: float

    def rgb_np(self) -> np.ndarray:
        return self.rgb.detach().numpy()

    def depth_np(self) -> np.ndarray:
        return self.depth.detach().numpy()

    def opacity_np(self) -> np.ndarray:
        return self.opacity.detach().numpy()


def _frame_jitter(seed: int, frame_index: int, n_rays: int, samples: int) -> np.ndarray:
    """Stratified offsets keyed by (seed, frame) only, never by time, so the
    same frame slot re-renders with identical rays regardless of t."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, frame_index)))
    return rng.random((n_rays, samples))


def render_frames(model: SceneModel, poses: list[CameraPose], times: list[float],
                  height: int, width: int, samples: int, background: np.ndarray,
                  shading: str = "albedo", light_dir: np.ndarray | None = None,
                  ambient: float = 0.1, jitter_seed: int | None = None,
                  frame_offset: int = 0) -> list[RenderOutput]:
    """Render a batch of frames (shared image size and background).

    jitter_seed None selects deterministic midpoint sampling. frame_offset
    shifts the per-frame jitter key for callers rendering one clip across
    several calls.
    """
    if len(poses) != len(times):
        raise InvalidInputError(f"{len(poses)} poses vs {len(times)} times")
    if shading not in field_mod.SHADING_MODES:
        raise InvalidInputError(f"unknown shading mode {shading!r}")
    n_rays = height * width
    bg = torch.as_tensor(np.asarray(background, dtype=model.np_dtype))
    light = None
    if shading != "albedo":
        if light_dir is None:
            raise InvalidInputError("lambertian/textureless shading needs a light direction")
        light = torch.as_tensor(np.asarray(light_dir, dtype=model.np_dtype))

    outputs = []
    for k, (pose, t) in enumerate(zip(poses, times)):
        origins, dirs = generate_rays(pose, height, width)
        near, far = ray_box_intersect(origins, dirs)
        delta = (far - near) / samples  # (N,)
        if jitter_seed is None:
            u = np.full((n_rays, samples), 0.5)
        else:
            u = _frame_jitter(jitter_seed, frame_offset + k, n_rays, samples)
        dist = near[:, None] + (np.arange(samples)[None, :] + u) * delta[:, None]
        pts = origins[:, None, :] + dist[:, :, None] * dirs[:, None, :]

        fq = model.at_time(t)
        sigma, albedo = fq.density_albedo(pts.reshape(-1, 3))
        if shading == "albedo":
            colors = albedo
        else:
            normals_np, _ = field_mod.normal_at(fq.density, pts.reshape(-1, 3), model.normal_eps())
            normals = torch.as_tensor(normals_np.astype(model.np_dtype))
            colors = field_mod.shade(albedo, normals, shading, light, ambient)

        comp = composite(sigma.view(n_rays, samples),
                         colors.view(n_rays, samples, 3),
                         torch.as_tensor(delta[:, None].astype(model.np_dtype)),
                         bg,
                         distances=torch.as_tensor(dist.astype(model.np_dtype)))
        depth = torch.where(comp.opacity >= OPACITY_DEPTH_CUTOFF,
                            comp.depth, torch.zeros_like(comp.depth))
        outputs.append(RenderOutput(rgb=comp.rgb.view(height, width, 3),
                                    depth=depth.view(height, width),
                                    opacity=comp.opacity.view(height, width),
                                    pose=pose, time=float(t)))
    return outputs


def render_frame(model: SceneModel, pose: CameraPose, t: float, height: int, width: int,
                 samples: int, background: np.ndarray, shading: str = "albedo",
                 light_dir: np.ndarray | None = None, ambient: float = 0.1,
                 jitter_seed: int | None = None) -> RenderOutput:
    return render_frames(model, [pose], [t], height, width, samples, background,
                         shading=shading, light_dir=light_dir, ambient=ambient,
                         jitter_seed=jitter_seed)[0]
