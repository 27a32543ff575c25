import numpy as np
import pytest

from anima4d.errors import InvalidInputError, ProtocolError
from anima4d.guidance import (AnalyticScene, FirstFrame3DOracleProvider, GuidanceGradient,
                              GuidanceRequest, RefineOracleProvider, VideoOracleProvider,
                              build_oracle_providers, downsample2, oracle_render, provide,
                              upsample2, validate_request)
from anima4d.renderer import CameraPose

BLACK = np.zeros(3)
SCENE = AnalyticScene()
POSE = CameraPose(90.0, 0.0, 1.8, 40.0)


def _clip_request(n_frames=2, h=8, w=8, samples=24, bg=BLACK, **kw):
    times = np.linspace(0.0, 1.0, n_frames) if n_frames > 1 else np.zeros(1)
    poses = tuple(CameraPose(90.0, 10.0 * k, 1.8, 40.0) for k in range(n_frames))
    frames = np.stack([oracle_render(SCENE, p, float(t), h, w, samples, bg)["rgb"]
                       for p, t in zip(poses, times)]).astype(np.float32)
    return GuidanceRequest(frames=frames, times=times, poses=poses, **kw)


# --- request contract -------------------------------------------------------

def test_validate_request_shape_errors():
    good = _clip_request()
    validate_request(good)
    with pytest.raises(InvalidInputError):
        validate_request(GuidanceRequest(frames=good.frames[0], times=good.times[:1],
                                         poses=good.poses[:1]))
    with pytest.raises(InvalidInputError):
        validate_request(GuidanceRequest(frames=good.frames, times=good.times[:1],
                                         poses=good.poses))
    with pytest.raises(InvalidInputError):
        validate_request(GuidanceRequest(frames=good.frames, times=good.times,
                                         poses=good.poses[:1]))


def test_validate_request_rejects_nonfinite_and_bad_condition():
    req = _clip_request()
    req.frames[0, 0, 0, 0] = np.nan
    with pytest.raises(InvalidInputError):
        validate_request(req)
    req2 = _clip_request()
    req2.condition_frames = req2.frames[:1]
    with pytest.raises(InvalidInputError):
        validate_request(req2)


class _BadShapeProvider:
    def provide(self, req):
        return GuidanceGradient(grads=req.frames[:, :4], weight=1.0, provider_id="bad")


class _NanProvider:
    def provide(self, req):
        g = np.zeros_like(req.frames)
        g[0, 0, 0, 0] = np.inf
        return GuidanceGradient(grads=g, weight=1.0, provider_id="nan")


def test_provide_enforces_reply_contract():
    with pytest.raises(ProtocolError):
        provide(_BadShapeProvider(), _clip_request())
    with pytest.raises(ProtocolError):
        provide(_NanProvider(), _clip_request())


def test_provide_does_not_mutate_the_request():
    req = _clip_request()
    before = req.frames.copy()
    provide(VideoOracleProvider(SCENE, BLACK, samples=24), req)
    assert np.array_equal(req.frames, before)


# --- analytic scene and its renderer ----------------------------------------

def test_scene_motion_and_pulse():
    s = AnalyticScene()
    assert np.allclose(s.center_at(1.0) - s.center_at(0.0), s.drift)
    assert np.allclose(s.center_at(0.5), s.center)
    assert s.radius_at(0.25) == pytest.approx(s.radius + s.pulse)
    assert s.radius_at(0.75) == pytest.approx(s.radius - s.pulse)


def test_oracle_render_output_contract():
    out = oracle_render(SCENE, POSE, 0.0, 10, 12, 32, np.array([0.2, 0.2, 0.2]))
    assert out["rgb"].shape == (10, 12, 3)
    assert out["opacity"].shape == (10, 12) and out["depth"].shape == (10, 12)
    assert np.isfinite(out["rgb"]).all()
    assert 0.0 <= out["opacity"].min() and out["opacity"].max() <= 1.0
    assert (out["depth"][out["opacity"] < 0.01] == 0.0).all()
    again = oracle_render(SCENE, POSE, 0.0, 10, 12, 32, np.array([0.2, 0.2, 0.2]))
    assert np.array_equal(out["rgb"], again["rgb"])


def test_oracle_render_empty_corner_shows_background():
    bg = np.array([0.9, 0.1, 0.3])
    out = oracle_render(SCENE, POSE, 0.0, 16, 16, 32, bg)
    assert np.allclose(out["rgb"][0, 0], bg, atol=1e-3)  # sphere barely reaches the corner


def test_oracle_mask_centroid_tracks_the_drift():
    h = w = 32
    def centroid(t):
        op = oracle_render(SCENE, POSE, t, h, w, 48, BLACK)["opacity"]
        ys, xs = np.mgrid[0:h, 0:w]
        return np.array([(xs * op).sum() / op.sum(), (ys * op).sum() / op.sum()])
    c0, c1 = centroid(0.0), centroid(1.0)
    # +y world drift seen from the reference camera moves the image centroid in x
    assert abs(c1[0] - c0[0]) > 2.0
    assert abs(c1[1] - c0[1]) < 1.0


def test_downsample_upsample_round_trip_on_blocks():
    rng = np.random.default_rng(40)
    block = rng.random((4, 4, 3))
    image = np.repeat(np.repeat(block, 2, axis=0), 2, axis=1)
    down = downsample2(image)
    assert np.allclose(down, block, atol=1e-12)
    up = upsample2(down, 8, 8)
    assert np.allclose(up, image, atol=1e-12)
    # odd target sizes edge-pad
    assert upsample2(down, 9, 7).shape == (9, 7, 3)


# --- video provider ----------------------------------------------------------

def test_video_residual_zero_at_optimum_single_frame():
    prov = VideoOracleProvider(SCENE, BLACK, samples=24)
    req = _clip_request(n_frames=1)
    grad = provide(prov, req)
    assert grad.grads.shape == req.frames.shape
    assert float(np.abs(grad.grads).max()) < 1e-6


def test_video_residual_single_frame_is_full_resolution():
    prov = VideoOracleProvider(SCENE, BLACK, samples=24)
    req = _clip_request(n_frames=1)
    bump = np.zeros_like(req.frames)
    bump[0, 3, 5, 1] = 0.25  # one pixel
    req.frames = req.frames + bump
    grad = provide(prov, req)
    assert grad.grads[0, 3, 5, 1] == pytest.approx(0.25, abs=1e-5)
    assert abs(float(grad.grads[0, 3, 4, 1])) < 1e-5  # neighbor untouched


def test_video_residual_multi_frame_is_band_limited():
    prov = VideoOracleProvider(SCENE, BLACK, samples=24)
    req = _clip_request(n_frames=2)
    bump = np.zeros_like(req.frames)
    bump[0, 2, 2, 0] = 0.4  # single-pixel error spreads over its 2x2 block
    req.frames = req.frames + bump
    g = provide(prov, req).grads
    block = g[0, 2:4, 2:4, 0]
    assert np.allclose(block, 0.1, atol=1e-5)
    assert abs(float(g[0, 0, 0, 0])) < 1e-5
    # blockwise constant everywhere
    assert np.allclose(g[:, 0::2, 0::2], g[:, 1::2, 0::2], atol=1e-6)
    assert np.allclose(g[:, 0::2, 0::2], g[:, 0::2, 1::2], atol=1e-6)


def test_video_residual_multi_frame_zero_at_optimum():
    prov = VideoOracleProvider(SCENE, BLACK, samples=24)
    grad = provide(prov, _clip_request(n_frames=3))
    assert float(np.abs(grad.grads).max()) < 1e-6


def test_video_residual_scales_with_weight():
    prov = VideoOracleProvider(SCENE, BLACK, samples=24, weight=2.0)
    req = _clip_request(n_frames=1)
    req.frames = req.frames + np.float32(0.1)
    grad = provide(prov, req)
    assert grad.weight == 2.0
    assert np.allclose(grad.grads, 0.2, atol=1e-5)


def test_video_tiny_frames_skip_band_limiting():
    prov = VideoOracleProvider(SCENE, BLACK, samples=8)
    req = _clip_request(n_frames=2, h=2, w=2, samples=8)
    bump = np.zeros_like(req.frames)
    bump[0, 0, 1, 2] = 0.3
    req.frames = req.frames + bump
    g = provide(prov, req).grads
    assert g[0, 0, 1, 2] == pytest.approx(0.3, abs=1e-5)
    assert abs(float(g[0, 0, 0, 2])) < 1e-5


def test_video_respects_request_background():
    white = np.ones(3)
    prov = VideoOracleProvider(SCENE, BLACK, samples=24)  # provider default is black
    req = _clip_request(n_frames=1, bg=white, background=white)
    assert float(np.abs(provide(prov, req).grads).max()) < 1e-6
    req_no_bg = _clip_request(n_frames=1, bg=white)
    assert float(np.abs(provide(prov, req_no_bg).grads).max()) > 0.1


# --- first-frame multi-view provider ------------------------------------------

def test_image3d_skips_unless_first_frame_is_t0():
    prov = FirstFrame3DOracleProvider(SCENE, BLACK, samples=24)
    grad = provide(prov, _clip_request(n_frames=2, first_frame_flag=False))
    assert grad.note == "skipped"
    assert not grad.grads.any()


def test_image3d_lands_on_frame_zero_only():
    prov = FirstFrame3DOracleProvider(SCENE, BLACK, samples=24)
    req = _clip_request(n_frames=3, first_frame_flag=True)
    req.frames = req.frames + np.float32(0.1)
    grad = provide(prov, req)
    assert grad.note == ""
    assert np.allclose(grad.grads[0], 0.1, atol=1e-5)
    assert not grad.grads[1:].any()


def test_image3d_zero_at_optimum():
    prov = FirstFrame3DOracleProvider(SCENE, BLACK, samples=24)
    grad = provide(prov, _clip_request(n_frames=2, first_frame_flag=True))
    assert float(np.abs(grad.grads[0]).max()) < 1e-6


# --- refine provider ----------------------------------------------------------

def _refine_target(pose, t, h, w, samples, bg):
    return downsample2(oracle_render(SCENE, pose, t, 2 * h, 2 * w, samples, bg)["rgb"])


def test_refine_requires_condition_frames():
    prov = RefineOracleProvider(SCENE, BLACK, samples=24)
    with pytest.raises(InvalidInputError):
        provide(prov, _clip_request(n_frames=2))


def test_refine_zero_when_frames_match_fine_target():
    prov = RefineOracleProvider(SCENE, BLACK, samples=24)
    req = _clip_request(n_frames=2)
    target = np.stack([_refine_target(p, float(t), 8, 8, 24, BLACK)
                       for p, t in zip(req.poses, req.times)]).astype(np.float32)
    req.frames = target
    req.condition_frames = target
    assert float(np.abs(provide(prov, req).grads).max()) < 1e-6


def test_refine_masks_out_disagreeing_condition():
    prov = RefineOracleProvider(SCENE, BLACK, samples=24, kappa=0.3)
    req = _clip_request(n_frames=1)
    req.frames = req.frames + np.float32(0.2)
    # condition nowhere near the target -> every pixel masked out
    req.condition_frames = np.full_like(req.frames, 5.0)
    assert not provide(prov, req).grads.any()


def test_refine_pulls_toward_finer_scale_target():
    prov = RefineOracleProvider(SCENE, BLACK, samples=24)
    req = _clip_request(n_frames=1)
    target = _refine_target(req.poses[0], 0.0, 8, 8, 24, BLACK)
    req.condition_frames = req.frames.copy()
    grad = provide(prov, req)
    agree = (np.abs(req.condition_frames[0].astype(np.float64) - target) < 0.3).all(axis=2)
    want = (req.frames[0].astype(np.float64) - target) * agree[:, :, None]
    assert np.allclose(grad.grads[0], want, atol=1e-5)
    assert agree.any()


# --- factory -------------------------------------------------------------------

def test_build_oracle_providers_wiring(tiny_cfg):
    provs = build_oracle_providers(tiny_cfg)
    assert set(provs) == {"video", "image3d", "refine"}
    assert provs["refine"].kappa == tiny_cfg["guidance.refine_threshold"]
    assert provs["video"].weight == tiny_cfg["guidance.weight"]
    assert provs["video"].samples == tiny_cfg["guidance.oracle.samples_per_ray"]
