"""Pixel-gradient guidance: the provider contract and analytic oracles.

A provider maps rendered frames to same-shape pixel gradients (the trainer
chains them through the renderer, never through the provider). The analytic
oracles march a closed-form scene (a drifting, pulsing, striped sphere) with
their own numpy integrator, sharing only camera geometry with the trainable
renderer, and return residual gradients weight * (frames - target).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import Config
from .errors import InvalidInputError, ProtocolError
from .renderer import CameraPose, generate_rays, ray_box_intersect


@dataclass
class GuidanceRequest:
    frames: np.ndarray                 # (N_f, H, W, 3) float32 in [0, 1]
    times: np.ndarray                  # (N_f,) in [0, 1]
    poses: tuple[CameraPose, ...]
    prompt_tag: str = ""
    first_frame_flag: bool = False     # frame 0 sits at t = 0
    condition_frames: np.ndarray | None = None
    noise_level: float = 0.5
    background: np.ndarray | None = None  # (3,) color the frames were composited over


@dataclass
class GuidanceGradient:
    grads: np.ndarray                  # same shape as request frames
    weight: float
    provider_id: str
    note: str = ""                     # e.g. "skipped" when a provider opted out


def validate_request(req: GuidanceRequest) -> None:
    f = req.frames
    if f.ndim != 4 or f.shape[3] != 3:
        raise InvalidInputError(f"frames must be (N_f, H, W, 3), got {f.shape}")
    if not np.isfinite(f).all():
        raise InvalidInputError("frames contain non-finite values")
    if len(req.times) != f.shape[0] or len(req.poses) != f.shape[0]:
        raise InvalidInputError("times/poses length must match frame count")
    if req.condition_frames is not None and req.condition_frames.shape != f.shape:
        raise InvalidInputError(f"condition shape {req.condition_frames.shape} != frames {f.shape}")


def provide(provider, req: GuidanceRequest) -> GuidanceGradient:
    """Invoke a provider with centrally enforced contract checks."""
    validate_request(req)
    grad = provider.provide(req)
    if grad.grads.shape != req.frames.shape:
        raise ProtocolError(f"provider {grad.provider_id!r} returned shape "
                            f"{grad.grads.shape}, expected {req.frames.shape}")
    if not np.isfinite(grad.grads).all():
        raise ProtocolError(f"provider {grad.provider_id!r} returned non-finite gradients")
    return grad


@dataclass(frozen=True)
class AnalyticScene:
    """Closed-form time-varying density and albedo, independent of any
    trainable state. A soft-shelled sphere drifts linearly and its radius
    oscillates over one period of t."""
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    drift: tuple[float, float, float] = (0.0, 0.5, 0.0)
    radius: float = 0.3
    pulse: float = 0.05
    edge_width: float = 0.03
    density_scale: float = 40.0
    stripe_freq: float = 6.0

    def center_at(self, t: float) -> np.ndarray:
        return np.asarray(self.center) + (t - 0.5) * np.asarray(self.drift)

    def radius_at(self, t: float) -> float:
        return self.radius + self.pulse * np.sin(2.0 * np.pi * t)

    def density(self, pts: np.ndarray, t: float) -> np.ndarray:
        d = np.linalg.norm(pts - self.center_at(t), axis=-1) - self.radius_at(t)
        return self.density_scale / (1.0 + np.exp(d / self.edge_width))

    def albedo(self, pts: np.ndarray, t: float) -> np.ndarray:
        local = pts - self.center_at(t)
        r = np.empty(pts.shape[:-1] + (3,))
        r[..., 0] = 0.5 + 0.4 * np.sin(self.stripe_freq * np.pi * local[..., 2])
        r[..., 1] = 0.5 + 0.4 * np.sin(self.stripe_freq * np.pi * local[..., 0] + 2.0)
        r[..., 2] = 0.5 + 0.4 * np.sin(self.stripe_freq * np.pi * local[..., 1] + 4.0)
        return r


def scene_from_config(cfg: Config) -> AnalyticScene:
    return AnalyticScene(center=cfg["guidance.oracle.center"],
                         drift=cfg["guidance.oracle.drift"],
                         radius=cfg["guidance.oracle.radius"],
                         pulse=cfg["guidance.oracle.pulse"],
                         edge_width=cfg["guidance.oracle.edge_width"],
                         density_scale=cfg["guidance.oracle.density_scale"],
                         stripe_freq=cfg["guidance.oracle.stripe_freq"])


def oracle_render(scene: AnalyticScene, pose: CameraPose, t: float, height: int,
                  width: int, samples: int, background: np.ndarray) -> dict[str, np.ndarray]:
    """Deterministic midpoint ray march of the analytic scene (numpy, float64).

    Shares only ray setup with the trainable renderer; integration is an
    independent implementation. Returns rgb, opacity, depth.
    """
    n_samples = samples
    origins, dirs = generate_rays(pose, height, width)
    near, far = ray_box_intersect(origins, dirs)
    delta = (far - near) / n_samples
    dist = near[:, None] + (np.arange(n_samples)[None, :] + 0.5) * delta[:, None]
    pts = origins[:, None, :] + dist[:, :, None] * dirs[:, None, :]
    sigma = scene.density(pts, t)
    color = scene.albedo(pts, t)
    alpha = 1.0 - np.exp(-sigma * delta[:, None])
    trans = np.cumprod(np.concatenate([np.ones_like(alpha[:, :1]), 1.0 - alpha[:, :-1]],
                                      axis=1), axis=1)
    weights = trans * alpha
    opacity = weights.sum(axis=1)
    rgb = (weights[:, :, None] * color).sum(axis=1) + (1.0 - opacity)[:, None] * background
    depth = (weights * dist).sum(axis=1) / np.maximum(opacity, 1e-4)
    depth[opacity < 0.01] = 0.0
    return {"rgb": rgb.reshape(height, width, 3),
            "opacity": opacity.reshape(height, width),
            "depth": depth.reshape(height, width)}


def downsample2(image: np.ndarray) -> np.ndarray:
    """2x2 box average over the leading two axes."""
    h, w = image.shape[0] // 2 * 2, image.shape[1] // 2 * 2
    im = image[:h, :w]
    return 0.25 * (im[0::2, 0::2] + im[1::2, 0::2] + im[0::2, 1::2] + im[1::2, 1::2])


def upsample2(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor 2x over the leading two axes, edge-padded to (height, width)."""
    up = np.repeat(np.repeat(image, 2, axis=0), 2, axis=1)
    if up.shape[0] < height:
        up = np.concatenate([up, up[-1:]], axis=0)
    if up.shape[1] < width:
        up = np.concatenate([up, up[:, -1:]], axis=1)
    return up[:height, :width]


def _req_background(req: GuidanceRequest, fallback: np.ndarray) -> np.ndarray:
    """Targets must composite over whatever the frames were rendered on."""
    if req.background is None:
        return fallback
    return np.asarray(req.background, dtype=np.float64)


@dataclass
class VideoOracleProvider:
    """Temporal prior analog: residual toward the analytic clip.

    Multi-frame requests get a band-limited residual (2x2 box average,
    nearest-upsampled): the motion prior only corrects block means, leaving
    the single-view priors a distinct, sharper role. Single-frame requests
    play the image-prior part and keep full-resolution residuals."""
    scene: AnalyticScene
    background: np.ndarray
    samples: int = 128
    weight: float = 1.0
    provider_id: str = "oracle-video"

    def provide(self, req: GuidanceRequest) -> GuidanceGradient:
        h, w = req.frames.shape[1:3]
        bg = _req_background(req, self.background)
        target = np.stack([oracle_render(self.scene, pose, float(t), h, w,
                                         self.samples, bg)["rgb"]
                           for pose, t in zip(req.poses, req.times)])
        grads = self.weight * (req.frames.astype(np.float64) - target)
        if req.frames.shape[0] > 1 and h >= 4 and w >= 4:
            grads = np.stack([upsample2(downsample2(g), h, w) for g in grads])
        return GuidanceGradient(grads=grads.astype(np.float32), weight=self.weight,
                                provider_id=self.provider_id)


@dataclass
class FirstFrame3DOracleProvider:
    """Multi-view prior analog for the frame at t = 0: gradient lands on
    frame 0 only, against the static (t = 0) scene seen from frame 0's pose.
    Requests whose first frame is not at t = 0 are skipped (zero gradient)."""
    scene: AnalyticScene
    background: np.ndarray
    samples: int = 128
    weight: float = 1.0
    provider_id: str = "oracle-image3d"

    def provide(self, req: GuidanceRequest) -> GuidanceGradient:
        grads = np.zeros_like(req.frames, dtype=np.float64)
        if not req.first_frame_flag:
            return GuidanceGradient(grads=grads.astype(np.float32), weight=self.weight,
                                    provider_id=self.provider_id, note="skipped")
        h, w = req.frames.shape[1:3]
        target = oracle_render(self.scene, req.poses[0], 0.0, h, w,
                               self.samples, _req_background(req, self.background))["rgb"]
        grads[0] = self.weight * (req.frames[0].astype(np.float64) - target)
        return GuidanceGradient(grads=grads.astype(np.float32), weight=self.weight,
                                provider_id=self.provider_id)


@dataclass
class RefineOracleProvider:
    """Per-frame refinement toward a finer-scale target, masked to pixels
    where the condition frame already agrees with the target (|diff| < kappa
    in every channel), so structure disagreements are left alone."""
    scene: AnalyticScene
    background: np.ndarray
    samples: int = 128
    weight: float = 1.0
    kappa: float = 0.3
    provider_id: str = "oracle-refine"

    def provide(self, req: GuidanceRequest) -> GuidanceGradient:
        if req.condition_frames is None:
            raise InvalidInputError("refine provider requires condition_frames")
        h, w = req.frames.shape[1:3]
        bg = _req_background(req, self.background)
        grads = np.zeros_like(req.frames, dtype=np.float64)
        for k, (pose, t) in enumerate(zip(req.poses, req.times)):
            fine = oracle_render(self.scene, pose, float(t), 2 * h, 2 * w,
                                 self.samples, bg)["rgb"]
            target = downsample2(fine)
            agree = (np.abs(req.condition_frames[k].astype(np.float64) - target)
                     < self.kappa).all(axis=2, keepdims=True)
            grads[k] = self.weight * (req.frames[k].astype(np.float64) - target) * agree
        return GuidanceGradient(grads=grads.astype(np.float32), weight=self.weight,
                                provider_id=self.provider_id)


def build_oracle_providers(cfg: Config) -> dict:
    scene = scene_from_config(cfg)
    bg = np.asarray(cfg["render.background"], dtype=np.float64)
    samples = cfg["guidance.oracle.samples_per_ray"]
    weight = cfg["guidance.weight"]
    return {
        "video": VideoOracleProvider(scene, bg, samples, weight),
        "image3d": FirstFrame3DOracleProvider(scene, bg, samples, weight),
        "refine": RefineOracleProvider(scene, bg, samples, weight,
                                       kappa=cfg["guidance.refine_threshold"]),
    }
