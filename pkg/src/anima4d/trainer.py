"""Three-stage optimization schedule with an in-house Adam step, deterministic
per-iteration RNG, CSV loss logging, and a finite-difference gradient audit.

Schedule: static scene fit -> coarse dynamics (lifted from the static
checkpoint) -> refinement against a frozen copy of the coarse model. The
refine loop is the coarse loop plus one extra guidance term, and per-iteration
RNG is keyed by (seed, stream, global iteration) rather than by stage, so with
losses.lambda_refine = 0 refinement reduces exactly to continued coarse
training from the same checkpoint.
"""

from __future__ import annotations

import sys
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import field
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config
from .encoding import Grid4D, MultiScaleGrid3D, lift_static_to_dynamic
from .errors import ConfigError, InvalidInputError, ProtocolError, RetryableTransportError
from .guidance import (GuidanceGradient, GuidanceRequest, build_oracle_providers, oracle_render,
                       provide, scene_from_config)
from .losses import (LossWeights, ReferenceData, reconstruction_loss, sds_surrogate,
                     stage_loss_dynamic, stage_loss_refine, stage_loss_static,
                     weights_from_config)
from .renderer import CameraPose, RenderOutput, reference_pose, render_frames
from .sampling import (make_trajectory, pose_sampler_from_config, sample_pose,
                       sample_timesteps, timestep_sampler_from_config)
from .scene import SceneModel, build_model

# Distinct SeedSequence streams; the clip stages (coarse + refine) share one
# stream so refinement continues the coarse iteration numbering.
_STREAM_INIT = 0
_STREAM_STATIC = 1
_STREAM_CLIP = 2

_MAX_CONSECUTIVE_SKIPS = 25


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = dc_field(default_factory=dict)
    v: dict[str, torch.Tensor] = dc_field(default_factory=dict)


def adam_state_from_config(cfg: Config) -> AdamState:
    return AdamState(lr=cfg["trainer.lr"], beta1=cfg["trainer.beta1"],
                     beta2=cfg["trainer.beta2"], eps=cfg["trainer.eps"])


def adam_step(state: AdamState, params: dict[str, torch.Tensor],
              grads: dict[str, torch.Tensor]) -> bool:
    """Bias-corrected Adam update, in place.

    Any non-finite gradient aborts the whole step before any state is touched
    (step count and moments unchanged); returns False so the caller can log
    the event. Missing gradients count as zeros.
    """
    full = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise InvalidInputError(f"gradient shape {tuple(g.shape)} != param "
                                    f"{name!r} shape {tuple(p.shape)}")
        if not bool(torch.isfinite(g).all()):
            return False
        full[name] = g
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    with torch.no_grad():
        for name, p in params.items():
            g = full[name]
            if name not in state.m:
                state.m[name] = torch.zeros_like(p)
                state.v[name] = torch.zeros_like(p)
            m = state.m[name]
            v = state.v[name]
            m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
            v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
            p.addcdiv_(m / bc1, (v / bc2).sqrt().add_(state.eps), value=-state.lr)
    return True


# --------------------------------------------------------------------------
# Plumbing


def _iter_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=(seed, stream, index)))


class CsvLogger:
    """Long-format loss log: one (iteration, stage, term, value) row per term."""

    def __init__(self, path: str | Path):
        path = Path(path)
        fresh = not path.exists() or path.stat().st_size == 0
        self.f = open(path, "a", encoding="utf-8")
        if fresh:
            self.f.write("iteration,stage,term,value\n")

    def log(self, iteration: int, stage: str, parts: dict) -> None:
        for term, value in parts.items():
            self.f.write(f"{iteration},{stage},{term},{float(value)!r}\n")
        self.f.flush()

    def event(self, iteration: int, stage: str, name: str) -> None:
        self.log(iteration, stage, {f"event.{name}": 1.0})

    def close(self) -> None:
        self.f.close()


def _progress(stage: str, done: int, total: int, parts: dict) -> None:
    terms = " ".join(f"{k}={float(v):.4g}" for k, v in parts.items())
    print(f"[{stage}] {done}/{total} {terms}", file=sys.stderr)


def build_providers(cfg: Config) -> dict:
    kind = cfg["guidance.provider"]
    if kind == "oracle":
        return build_oracle_providers(cfg)
    if kind == "remote":
        from .wire import build_remote_providers
        return build_remote_providers(cfg)
    raise ConfigError(f"guidance.provider must be oracle or remote, got {kind!r}")


def _query(provider, req: GuidanceRequest, retries: int) -> GuidanceGradient | None:
    """provide() with bounded retries on transport faults; None = give up."""
    for _ in range(retries + 1):
        try:
            return provide(provider, req)
        except RetryableTransportError:
            continue
        except ProtocolError:
            return None
    return None


def synthesize_reference(cfg: Config, height: int | None = None,
                         width: int | None = None) -> ReferenceData:
    """Reference bundle rendered from the analytic oracle at t = 0, reference
    pose — the self-contained stand-in for a real ingested image."""
    h = height if height is not None else cfg["render.train_height"]
    w = width if width is not None else cfg["render.train_width"]
    scene = scene_from_config(cfg)
    pose = reference_pose(cfg["render.radius"], cfg["render.fov_deg"])
    out = oracle_render(scene, pose, 0.0, h, w, cfg["guidance.oracle.samples_per_ray"],
                        np.asarray(cfg["render.background"], dtype=np.float64))
    mask = (out["opacity"] > 0.5).astype(np.float32)
    return ReferenceData(rgb=out["rgb"].astype(np.float32), mask=mask,
                         depth=out["depth"].astype(np.float32))


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    n = np.linalg.norm(v)
    return v / n if n > 1e-8 else np.array([0.0, 0.0, 1.0])


def _frames_np(outs: list[RenderOutput]) -> np.ndarray:
    return np.ascontiguousarray(np.stack([o.rgb_np() for o in outs]), dtype=np.float32)


def _zero_grads(params: dict[str, torch.Tensor]) -> None:
    for p in params.values():
        p.grad = None


def _collect_grads(params: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {name: p.grad for name, p in params.items() if p.grad is not None}


class _SkipTracker:
    """Counts consecutive skipped iterations; a long run of provider failures
    aborts the run instead of silently training on nothing."""

    def __init__(self):
        self.consecutive = 0

    def skipped(self) -> None:
        self.consecutive += 1
        if self.consecutive > _MAX_CONSECUTIVE_SKIPS:
            raise RetryableTransportError(
                f"guidance provider failed {self.consecutive} consecutive iterations")

    def succeeded(self) -> None:
        self.consecutive = 0


# --------------------------------------------------------------------------
# Stages


def train_static(cfg: Config, ref: ReferenceData, run_dir: str | Path,
                 providers: dict | None = None) -> Path:
    """Fit the static scene: per iteration render one view (the reference pose
    with probability trainer.ref_pose_prob, else a random one), apply the
    single-view and multi-view guidance providers, and add the reconstruction
    loss on reference-pose iterations."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if providers is None:
        providers = build_providers(cfg)
    seed = cfg["trainer.seed"]
    model = build_model(cfg, "static", _iter_rng(seed, _STREAM_INIT, 0))
    params = model.named_parameters()
    adam = adam_state_from_config(cfg)
    w = weights_from_config(cfg)
    pose_sampler = pose_sampler_from_config(cfg)
    probs = field.ShadingProbs(cfg["field.prob_albedo"], cfg["field.prob_lambertian"],
                               cfg["field.prob_textureless"])
    ref_pose = reference_pose(cfg["render.radius"], cfg["render.fov_deg"])
    h, wd = cfg["render.train_height"], cfg["render.train_width"]
    samples = cfg["render.samples_per_ray"]
    fixed_bg = np.asarray(cfg["render.background"], dtype=np.float64)
    retries = cfg["guidance.remote.retries"]
    n_iters = cfg["trainer.iters_static"]
    log_every = cfg["trainer.log_every"]
    log = CsvLogger(run_dir / "log.csv")
    tracker = _SkipTracker()
    try:
        for it in range(n_iters):
            rng = _iter_rng(seed, _STREAM_STATIC, it)
            is_ref = rng.random() < cfg["trainer.ref_pose_prob"]
            if is_ref:
                pose, mode = ref_pose, "albedo"
            else:
                pose = sample_pose(pose_sampler, rng)
                mode = field.sample_shading_mode(probs, rng)
            light = _random_unit(rng) if mode != "albedo" else None
            jitter_seed = int(rng.integers(2**31 - 1))
            bg = fixed_bg
            if cfg["render.random_background"] and not is_ref:
                bg = np.full(3, rng.random())

            out = render_frames(model, [pose], [0.0], h, wd, samples, bg, shading=mode,
                                light_dir=light, ambient=cfg["field.ambient"],
                                jitter_seed=jitter_seed)[0]
            frames_t = out.rgb.unsqueeze(0)
            req = GuidanceRequest(frames=_frames_np([out]), times=np.array([0.0]),
                                  poses=(pose,), prompt_tag=cfg["guidance.prompt"],
                                  first_frame_flag=True,
                                  noise_level=cfg["guidance.noise_level"],
                                  background=bg)
            g2d = _query(providers["video"], req, retries)
            g3d = _query(providers["image3d"], req, retries)
            if g2d is None or g3d is None:
                log.event(it, "static", "provider_skip")
                tracker.skipped()
                continue
            tracker.succeeded()

            rec = None
            rec_parts = {}
            if is_ref:
                rec, rec_parts = reconstruction_loss(ref, out.rgb, out.opacity,
                                                     out.depth, w)
            total, parts = stage_loss_static(sds_surrogate(frames_t, g2d.grads),
                                             sds_surrogate(frames_t, g3d.grads), rec, w)
            _zero_grads(params)
            total.backward()
            if not adam_step(adam, params, _collect_grads(params)):
                log.event(it, "static", "nan_skip")
                continue
            parts = {"total": float(total.detach()), **parts,
                     **{k: float(v) for k, v in rec_parts.items() if k != "rec"}}
            log.log(it, "static", parts)
            if (it + 1) % log_every == 0 or it + 1 == n_iters:
                _progress("static", it + 1, n_iters, parts)
    finally:
        log.close()
    return save_checkpoint(run_dir / "ckpt_static", model, "static", cfg, n_iters)


def _clip_iteration(model: SceneModel, cfg: Config, ref: ReferenceData, providers: dict,
                    w: LossWeights, stage: str, giter: int, frozen: SceneModel | None,
                    log: CsvLogger, tracker: _SkipTracker, adam: AdamState,
                    params: dict[str, torch.Tensor]) -> dict | None:
    """One coarse/refine iteration; returns logged parts, or None if skipped."""
    seed = cfg["trainer.seed"]
    rng = _iter_rng(seed, _STREAM_CLIP, giter)
    clip = sample_timesteps(timestep_sampler_from_config(cfg), rng)
    base = sample_pose(pose_sampler_from_config(cfg), rng)
    jitter_seed = int(rng.integers(2**31 - 1))
    poses = make_trajectory(base, clip.times, cfg["sampling.azimuth_sweep_deg"])
    times = [float(t) for t in clip.times]
    h, wd = cfg["render.train_height"], cfg["render.train_width"]
    samples = cfg["render.samples_per_ray"]
    fixed_bg = np.asarray(cfg["render.background"], dtype=np.float64)
    bg = fixed_bg
    if cfg["render.random_background"]:
        bg = np.full(3, rng.random())
    retries = cfg["guidance.remote.retries"]

    outs = render_frames(model, poses, times, h, wd, samples, bg, jitter_seed=jitter_seed)
    frames_t = torch.stack([o.rgb for o in outs])
    frames = _frames_np(outs)
    req = GuidanceRequest(frames=frames, times=clip.times, poses=tuple(poses),
                          prompt_tag=cfg["guidance.prompt"],
                          first_frame_flag=clip.anchored_start,
                          noise_level=cfg["guidance.noise_level"],
                          background=bg)
    g_video = _query(providers["video"], req, retries)
    if g_video is None:
        log.event(giter, stage, "provider_skip")
        tracker.skipped()
        return None

    zero = frames_t.new_zeros(())
    rec, sds_3d, rec_parts = zero, zero, {}
    if clip.anchored_start:
        g3d = _query(providers["image3d"], req, retries)
        if g3d is None:
            log.event(giter, stage, "provider_skip")
            tracker.skipped()
            return None
        sds_3d = sds_surrogate(frames_t, g3d.grads)
        ref_pose = reference_pose(cfg["render.radius"], cfg["render.fov_deg"])
        ref_out = render_frames(model, [ref_pose], [0.0], h, wd, samples, fixed_bg,
                                jitter_seed=jitter_seed, frame_offset=len(times))[0]
        rec, rec_parts = reconstruction_loss(ref, ref_out.rgb, ref_out.opacity,
                                             ref_out.depth, w)

    sds_video = sds_surrogate(frames_t, g_video.grads)
    tv = model.tv_loss()
    do_refine = frozen is not None and w.refine != 0.0
    if do_refine:
        with torch.no_grad():
            cond = render_frames(frozen, poses, times, h, wd, samples, bg, jitter_seed=None)
        req_r = GuidanceRequest(frames=frames, times=clip.times, poses=tuple(poses),
                                prompt_tag=cfg["guidance.prompt"],
                                first_frame_flag=clip.anchored_start,
                                condition_frames=_frames_np(cond),
                                noise_level=cfg["guidance.noise_level"],
                                background=bg)
        g_ref = _query(providers["refine"], req_r, retries)
        if g_ref is None:
            log.event(giter, stage, "provider_skip")
            tracker.skipped()
            return None
        total, parts = stage_loss_refine(sds_video, tv, rec, sds_3d,
                                         sds_surrogate(frames_t, g_ref.grads),
                                         clip.anchored_start, w)
    else:
        total, parts = stage_loss_dynamic(sds_video, tv, rec, sds_3d,
                                          clip.anchored_start, w)
    tracker.succeeded()

    _zero_grads(params)
    total.backward()
    if not adam_step(adam, params, _collect_grads(params)):
        log.event(giter, stage, "nan_skip")
        return None
    parts = {"total": float(total.detach()), **parts,
             **{k: float(v) for k, v in rec_parts.items() if k != "rec"}}
    log.log(giter, stage, parts)
    return parts


def _run_clip_stage(model: SceneModel, cfg: Config, ref: ReferenceData, providers: dict,
                    stage: str, start_iter: int, n_iters: int,
                    frozen: SceneModel | None, log: CsvLogger) -> None:
    params = model.named_parameters()
    adam = adam_state_from_config(cfg)
    w = weights_from_config(cfg)
    tracker = _SkipTracker()
    log_every = cfg["trainer.log_every"]
    for i in range(n_iters):
        giter = start_iter + i
        parts = _clip_iteration(model, cfg, ref, providers, w, stage, giter,
                                frozen, log, tracker, adam, params)
        if parts is not None and ((i + 1) % log_every == 0 or i + 1 == n_iters):
            _progress(stage, i + 1, n_iters, parts)


def train_dynamic(cfg: Config, static_ckpt: str | Path, ref: ReferenceData,
                  run_dir: str | Path, providers: dict | None = None) -> Path:
    """Coarse dynamic stage: lift the static grid across time and fit the
    motion with clip guidance; anchored clips add first-frame multi-view
    guidance plus reconstruction at the reference pose."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if providers is None:
        providers = build_providers(cfg)
    model, _ = load_checkpoint(static_ckpt)
    if isinstance(model.encoding, MultiScaleGrid3D):
        model = SceneModel(lift_static_to_dynamic(model.encoding, cfg["encoding.time_slices"]),
                           model.heads, model.dtype)
    n_iters = cfg["trainer.iters_dynamic"]
    log = CsvLogger(run_dir / "log.csv")
    try:
        _run_clip_stage(model, cfg, ref, providers, "coarse", 0, n_iters, None, log)
    finally:
        log.close()
    return save_checkpoint(run_dir / "ckpt_coarse", model, "coarse", cfg, n_iters)


def train_refine(cfg: Config, coarse_ckpt: str | Path, ref: ReferenceData,
                 run_dir: str | Path, providers: dict | None = None) -> Path:
    """Refinement: the coarse loop plus per-frame refinement guidance whose
    condition frames come from a frozen copy of the coarse model (never the
    live one), rendered without jitter so identical (pose, t) re-renders are
    bit-identical."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if providers is None:
        providers = build_providers(cfg)
    model, meta = load_checkpoint(coarse_ckpt)
    frozen, _ = load_checkpoint(coarse_ckpt)
    for p in frozen.named_parameters().values():
        p.requires_grad_(False)
    start = meta["iteration"]
    n_iters = cfg["trainer.iters_refine"]
    log = CsvLogger(run_dir / "log.csv")
    try:
        _run_clip_stage(model, cfg, ref, providers, "refine", start, n_iters, frozen, log)
    finally:
        log.close()
    return save_checkpoint(run_dir / "ckpt_refine", model, "refine", cfg, start + n_iters)


# --------------------------------------------------------------------------
# Gradient audit

_AUDIT_OVERRIDES = (
    "trainer.dtype=float64",
    "encoding.backbone=grid4d",
    "encoding.levels=2",
    "encoding.min_res=4",
    "encoding.max_res=8",
    "encoding.time_slices=2",
    "encoding.feature_dim=2",
    "field.hidden_dim=8",
    "render.train_height=4",
    "render.train_width=4",
    "render.samples_per_ray=8",
    "guidance.oracle.radius=0.5",
)

AUDIT_THRESHOLD = 1e-3


def gradient_audit(cfg: Config | None = None, n_table_entries: int = 24,
                   corrupt_hook: Callable[[dict], None] | None = None) -> dict:
    """Compare autograd gradients of (reconstruction + TV + guidance surrogate)
    against central finite differences on a tiny double-precision model.

    The guidance gradient is frozen at the initial parameters so both sides
    differentiate the same function. corrupt_hook (tests only) may mutate the
    analytic gradients to prove the audit catches disagreement.
    """
    t_start = time.perf_counter()
    if cfg is None:
        from .config import default_config
        cfg = default_config()
    cfg = cfg.with_overrides(_AUDIT_OVERRIDES)
    seed = cfg["trainer.seed"]
    rng = _iter_rng(seed, _STREAM_INIT, 0)
    model = build_model(cfg, "coarse", rng)
    params = model.named_parameters()
    w = weights_from_config(cfg)
    ref = synthesize_reference(cfg)
    h, wd = cfg["render.train_height"], cfg["render.train_width"]
    samples = cfg["render.samples_per_ray"]
    bg = np.asarray(cfg["render.background"], dtype=np.float64)
    ref_pose = reference_pose(cfg["render.radius"], cfg["render.fov_deg"])
    poses = [ref_pose, CameraPose(70.0, 120.0, cfg["render.radius"], cfg["render.fov_deg"])]
    times = [0.0, 0.6]  # 0.6 lands between the two slices, exercising the blend

    def render_clip() -> list[RenderOutput]:
        return render_frames(model, poses, times, h, wd, samples, bg, jitter_seed=None)

    outs0 = render_clip()
    req = GuidanceRequest(frames=_frames_np(outs0), times=np.asarray(times),
                          poses=tuple(poses), first_frame_flag=True)
    providers = build_oracle_providers(cfg)
    fixed_g = provide(providers["video"], req).grads.astype(np.float64)

    def loss_value(outs: list[RenderOutput]) -> torch.Tensor:
        frames_t = torch.stack([o.rgb for o in outs])
        rec, _ = reconstruction_loss(ref, outs[0].rgb, outs[0].opacity, outs[0].depth, w)
        return sds_surrogate(frames_t, fixed_g) + rec + w.tv * model.tv_loss()

    loss = loss_value(outs0)
    _zero_grads(params)
    loss.backward()
    analytic = {name: p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                for name, p in params.items()}
    if corrupt_hook is not None:
        corrupt_hook(analytic)

    probe_rng = _iter_rng(seed, _STREAM_INIT, 1)
    targets: list[tuple[str, int]] = []
    for name, p in params.items():
        if name == "encoding.table":
            idx = probe_rng.choice(p.numel(), size=min(n_table_entries, p.numel()),
                                   replace=False)
            targets.extend((name, int(i)) for i in np.sort(idx))
        else:
            targets.extend((name, i) for i in range(p.numel()))

    eps = 1e-4
    max_err, worst, n_checked = 0.0, "", 0
    with torch.no_grad():
        for name, i in targets:
            flat = params[name].detach().reshape(-1)
            orig = float(flat[i])
            flat[i] = orig + eps
            f_plus = float(loss_value(render_clip()))
            flat[i] = orig - eps
            f_minus = float(loss_value(render_clip()))
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-6)
            n_checked += 1
            if err > max_err:
                max_err, worst = err, f"{name}[{i}]"
    return {"max_rel_err": max_err, "threshold": AUDIT_THRESHOLD,
            "passed": max_err < AUDIT_THRESHOLD, "n_checked": n_checked,
            "worst": worst, "runtime_s": time.perf_counter() - t_start}
