"""Pixel-space evaluation: PSNR / mask IoU against oracle re-renders, and a
consecutive-frame consistency score. All metrics work from a frame directory
plus its manifest alone."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .config import Config
from .errors import DataFormatError
from .guidance import oracle_render, scene_from_config
from .images import read_manifest, read_pgm, read_ppm
from .renderer import CameraPose

PSNR_CAP = 99.0


def quantize8(image: np.ndarray) -> np.ndarray:
    """Snap to the 8-bit lattice PPM/PGM files live on, so comparing a stored
    frame against a fresh float render is quantization-fair."""
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0) / 255.0


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise for images in [0, 1]; identical images cap at 99."""
    if a.shape != b.shape:
        raise DataFormatError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, -10.0 * math.log10(mse))


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of masks binarized at 0.5; two empty masks
    agree perfectly (1.0)."""
    if a.shape != b.shape:
        raise DataFormatError(f"iou shape mismatch {a.shape} vs {b.shape}")
    pa, pb = a > 0.5, b > 0.5
    union = np.logical_or(pa, pb).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(pa, pb).sum() / union)


def temporal_consistency(frames: list[np.ndarray]) -> float | None:
    """Mean over consecutive-frame pairs of (1 - mean |RGB difference|);
    None when there is no pair to compare."""
    if len(frames) < 2:
        return None
    scores = [1.0 - float(np.mean(np.abs(np.asarray(b, dtype=np.float64)
                                         - np.asarray(a, dtype=np.float64))))
              for a, b in zip(frames, frames[1:])]
    return float(np.mean(scores))


def evaluate_frames(frames_dir: str | Path, cfg: Config) -> dict:
    """Score every manifest frame against a fresh oracle render at the same
    camera and time. Masks (mask_%04d.pgm) are optional; consistency is
    computed per camera group and omitted when no group has two frames."""
    frames_dir = Path(frames_dir)
    manifest_path = frames_dir / "manifest.txt"
    if not manifest_path.exists():
        raise DataFormatError(f"no manifest.txt in {frames_dir}")
    records = read_manifest(manifest_path)
    ppm_count = len(list(frames_dir.glob("frame_*.ppm")))
    if ppm_count != len(records):
        raise DataFormatError(f"manifest lists {len(records)} frames, "
                              f"directory has {ppm_count}")
    scene = scene_from_config(cfg)
    background = np.asarray(cfg["render.background"], dtype=np.float64)
    samples = cfg["guidance.oracle.samples_per_ray"]

    per_frame = []
    groups: dict[tuple, list[np.ndarray]] = {}
    for rec in records:
        frame = read_ppm(frames_dir / f"frame_{rec.index:04d}.ppm")
        pose = CameraPose(rec.polar_deg, rec.azimuth_deg, rec.radius, rec.fov_deg)
        target = oracle_render(scene, pose, rec.time, frame.shape[0], frame.shape[1],
                               samples, background)
        entry = {"index": rec.index, "time": rec.time, "polar_deg": rec.polar_deg,
                 "azimuth_deg": rec.azimuth_deg,
                 "psnr": psnr(frame, quantize8(target["rgb"]))}
        mask_path = frames_dir / f"mask_{rec.index:04d}.pgm"
        if mask_path.exists():
            entry["iou"] = mask_iou(read_pgm(mask_path), target["opacity"])
        per_frame.append(entry)
        key = (rec.polar_deg, rec.azimuth_deg, rec.radius, rec.fov_deg)
        groups.setdefault(key, []).append(frame)

    report = {
        "n_frames": len(per_frame),
        "frames": per_frame,
        "psnr_mean": float(np.mean([e["psnr"] for e in per_frame])),
        "psnr_min": float(np.min([e["psnr"] for e in per_frame])),
    }
    ious = [e["iou"] for e in per_frame if "iou" in e]
    if ious:
        report["iou_mean"] = float(np.mean(ious))
        report["iou_min"] = float(np.min(ious))
    consistencies = [c for c in (temporal_consistency(g) for g in groups.values())
                     if c is not None]
    if consistencies:
        report["temporal_consistency"] = float(np.mean(consistencies))
    return report
