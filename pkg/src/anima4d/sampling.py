"""Per-iteration draws: clip timesteps, camera poses, and trajectories.

Timestep sampling is fps-based: a clip of N_f frames at fps f covers a span
of (N_f - 1) / (f * D) in normalized time, D being the nominal scene duration.
Clip starts are balanced: probability alpha of anchoring at t = 0, alpha of
anchoring at t = 1, otherwise uniform placement. Anchoring produces bitwise
exact endpoints, which is what gates the reference-supervision terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import Config
from .errors import InvalidInputError
from .renderer import CameraPose


@dataclass(frozen=True)
class TimestepSampler:
    n_frames: int
    fps_min: float
    fps_max: float
    alpha: float
    duration: float

    def __post_init__(self):
        if self.n_frames < 1:
            raise InvalidInputError("n_frames must be >= 1")
        if not 0.0 <= self.alpha <= 0.5:
            raise InvalidInputError("alpha must be in [0, 0.5]")
        if not 0.0 < self.fps_min <= self.fps_max:
            raise InvalidInputError("need 0 < fps_min <= fps_max")


@dataclass(frozen=True)
class SampledClip:
    times: np.ndarray  # (N_f,) float64, sorted, within [0, 1]
    fps: float
    anchored_start: bool  # times[0] == 0.0 bitwise
    anchored_end: bool    # times[-1] == 1.0 bitwise
    span_clamped: bool    # requested span exceeded [0, 1]


def sample_timesteps(sampler: TimestepSampler, rng: np.random.Generator) -> SampledClip:
    """One balanced draw of clip times.

    The anchor decision is a single three-way draw (start alpha, end alpha,
    interior 1 - 2*alpha), so both anchored fractions equal alpha exactly.
    """
    fps = rng.uniform(sampler.fps_min, sampler.fps_max)
    n = sampler.n_frames
    span = (n - 1) / (fps * sampler.duration) if n > 1 else 0.0
    clamped = span > 1.0
    if clamped:
        span = 1.0
    u = rng.random()
    if u < sampler.alpha:
        times = np.linspace(0.0, span, n)
    elif u < 2.0 * sampler.alpha:
        times = np.linspace(1.0 - span, 1.0, n)
    else:
        start = rng.uniform(0.0, 1.0 - span)
        times = np.linspace(start, start + span, n)
    times = np.clip(times, 0.0, 1.0)
    return SampledClip(times=times, fps=float(fps),
                       anchored_start=bool(times[0] == 0.0),
                       anchored_end=bool(times[-1] == 1.0),
                       span_clamped=bool(clamped))


@dataclass(frozen=True)
class PoseSampler:
    polar_min_deg: float
    polar_max_deg: float
    radius: float
    fov_deg: float
    azimuth_sweep_deg: float = 30.0


def sample_pose(sampler: PoseSampler, rng) -> CameraPose:
    """Polar uniform in [min, max], azimuth uniform in [-180, 180)."""
    polar = rng.uniform(sampler.polar_min_deg, sampler.polar_max_deg)
    azimuth = rng.uniform(-180.0, 180.0)
    return CameraPose(float(polar), float(azimuth), sampler.radius, sampler.fov_deg)


def make_trajectory(pose: CameraPose, times: np.ndarray, sweep_deg: float) -> list[CameraPose]:
    """Azimuth ramps linearly with normalized clip position; all other pose
    fields stay fixed. Zero span (or a single frame) means zero sweep."""
    times = np.asarray(times, dtype=np.float64)
    span = float(times[-1] - times[0]) if times.shape[0] > 1 else 0.0
    if span <= 0.0:
        return [pose for _ in range(times.shape[0])]
    frac = (times - times[0]) / span
    return [CameraPose(pose.polar_deg, pose.azimuth_deg + sweep_deg * float(f),
                       pose.radius, pose.fov_deg) for f in frac]


def timestep_sampler_from_config(cfg: Config) -> TimestepSampler:
    return TimestepSampler(n_frames=cfg["sampling.frames_per_clip"],
                           fps_min=cfg["sampling.fps_min"], fps_max=cfg["sampling.fps_max"],
                           alpha=cfg["sampling.alpha"], duration=cfg["sampling.duration"])


def pose_sampler_from_config(cfg: Config) -> PoseSampler:
    return PoseSampler(polar_min_deg=cfg["sampling.polar_min_deg"],
                       polar_max_deg=cfg["sampling.polar_max_deg"],
                       radius=cfg["render.radius"], fov_deg=cfg["render.fov_deg"],
                       azimuth_sweep_deg=cfg["sampling.azimuth_sweep_deg"])


def anchor_histogram(sampler: TimestepSampler, draws: int, bins: int,
                     rng: np.random.Generator) -> dict:
    """Monte Carlo summary of the draw distribution: anchored fractions plus
    a histogram over every sampled timestep (the coverage profile)."""
    starts = ends = clamps = 0
    counts = np.zeros(bins, dtype=np.int64)
    edges = np.linspace(0.0, 1.0, bins + 1)
    for _ in range(draws):
        clip = sample_timesteps(sampler, rng)
        starts += clip.anchored_start
        ends += clip.anchored_end
        clamps += clip.span_clamped
        counts += np.histogram(clip.times, bins=edges)[0]
    return {"draws": draws,
            "start_fraction": starts / draws,
            "end_fraction": ends / draws,
            "clamped_fraction": clamps / draws,
            "bin_edges": edges,
            "bin_counts": counts}
