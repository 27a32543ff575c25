"""Reference reconstruction loss and stage loss assembly.

The reconstruction term compares a reference-pose render against the input
bundle: masked L1 on rgb, L1 on the mask vs rendered opacity, and a Pearson
correlation term on masked depth (correlation rather than distance because
monocular reference depth is scale- and shift-ambiguous). Stage totals are
weighted sums with indicator gating; each assembler returns the breakdown
used by the CSV log.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import Config
from .errors import DataFormatError, InvalidInputError
from .images import read_pfm, read_pgm, read_ppm, write_pfm, write_pgm, write_ppm


@dataclass
class ReferenceData:
    rgb: np.ndarray              # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray             # (H, W) float32 binary
    depth: np.ndarray | None     # (H, W) float32, meaningful on mask

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise InvalidInputError(f"rgb must be (H, W, 3), got {self.rgb.shape}")
        if self.mask.shape != self.rgb.shape[:2]:
            raise InvalidInputError(f"mask {self.mask.shape} does not match rgb {self.rgb.shape[:2]}")
        if self.mask.sum() == 0:
            raise InvalidInputError("reference mask is empty")
        if self.depth is not None:
            if self.depth.shape != self.mask.shape:
                raise InvalidInputError(f"depth {self.depth.shape} does not match mask {self.mask.shape}")
            if not np.isfinite(self.depth[self.mask > 0.5]).all():
                raise InvalidInputError("reference depth not finite on the mask")


def save_reference(directory: str | Path, ref: ReferenceData) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_ppm(directory / "reference.ppm", ref.rgb)
    write_pgm(directory / "mask.pgm", ref.mask)
    if ref.depth is not None:
        write_pfm(directory / "depth.pfm", ref.depth)


def load_reference(directory: str | Path) -> ReferenceData:
    directory = Path(directory)
    rgb_path = directory / "reference.ppm"
    mask_path = directory / "mask.pgm"
    if not rgb_path.exists() or not mask_path.exists():
        raise DataFormatError(f"{directory} lacks reference.ppm/mask.pgm")
    depth_path = directory / "depth.pfm"
    depth = read_pfm(depth_path) if depth_path.exists() else None
    mask = (read_pgm(mask_path) > 0.5).astype(np.float32)
    return ReferenceData(rgb=read_ppm(rgb_path), mask=mask, depth=depth)


@dataclass(frozen=True)
class LossWeights:
    rgb: float = 5.0
    mask: float = 0.5
    depth: float = 0.001
    guidance_3d: float = 40.0
    tv: float = 0.1
    refine: float = 1.0


def weights_from_config(cfg: Config) -> LossWeights:
    return LossWeights(rgb=cfg["losses.lambda_rgb"], mask=cfg["losses.lambda_mask"],
                       depth=cfg["losses.lambda_depth"], guidance_3d=cfg["losses.lambda_3d"],
                       tv=cfg["losses.lambda_tv"], refine=cfg["losses.lambda_refine"])


def _f(x: torch.Tensor) -> float:
    """Detached scalar for log dicts (plain float() warns on grad tensors)."""
    return float(x.detach())


def pearson(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    xc = x - x.mean()
    yc = y - y.mean()
    return (xc * yc).sum() / torch.sqrt((xc * xc).sum() * (yc * yc).sum())


def reconstruction_loss(ref: ReferenceData, rgb: torch.Tensor, opacity: torch.Tensor,
                        depth: torch.Tensor, w: LossWeights
                        ) -> tuple[torch.Tensor, dict[str, float]]:
    """Masked rgb L1 / |mask| + mask L1 / (H*W) + depth decorrelation.

    The depth term is 1 - Pearson over mask pixels; it is dropped (with a
    warning) when the reference has no depth or either masked std falls
    below 1e-6 (early renders are flat).
    """
    if ref.mask.sum() == 0:
        raise InvalidInputError("reference mask is empty")
    if tuple(rgb.shape) != ref.rgb.shape:
        raise InvalidInputError(f"render {tuple(rgb.shape)} vs reference {ref.rgb.shape}")
    dtype = rgb.dtype
    mask_t = torch.as_tensor(ref.mask).to(dtype)
    ref_rgb = torch.as_tensor(ref.rgb).to(dtype)
    h, wd = ref.mask.shape
    mask_count = mask_t.sum()

    rgb_term = (mask_t.unsqueeze(2) * (rgb - ref_rgb)).abs().sum() / mask_count
    mask_term = (opacity - mask_t).abs().sum() / (h * wd)

    depth_term = rgb.new_zeros(())
    degenerate = False
    if ref.depth is not None and w.depth > 0:
        sel = torch.as_tensor(ref.mask > 0.5)
        d_ref = torch.as_tensor(ref.depth).to(dtype)[sel]
        d_hat = depth[sel]
        std_ref = d_ref.std(unbiased=False)
        std_hat = d_hat.std(unbiased=False)
        if float(std_ref.detach()) < 1e-6 or float(std_hat.detach()) < 1e-6:
            degenerate = True
            warnings.warn("depth term skipped: masked depth is (near-)constant")
        else:
            depth_term = 1.0 - pearson(d_hat, d_ref)

    total = w.rgb * rgb_term + w.mask * mask_term + w.depth * depth_term
    parts = {"rec_rgb": _f(rgb_term), "rec_mask": _f(mask_term),
             "rec_depth": _f(depth_term), "rec": _f(total),
             "rec_depth_degenerate": float(degenerate)}
    return total, parts


def sds_surrogate(frames: torch.Tensor, grads: np.ndarray) -> torch.Tensor:
    """Scalar whose backward injects the provider gradients into the frames.

    The value itself is meaningless; d(surrogate)/d(frames) == grads.
    """
    g = torch.as_tensor(np.ascontiguousarray(grads)).to(frames.dtype)
    if g.shape != frames.shape:
        raise InvalidInputError(f"gradient shape {tuple(g.shape)} vs frames {tuple(frames.shape)}")
    return (g.detach() * frames).sum()


def stage_loss_static(sds_2d: torch.Tensor, sds_3d: torch.Tensor,
                      rec: torch.Tensor | None, w: LossWeights
                      ) -> tuple[torch.Tensor, dict[str, float]]:
    """rec is None on iterations that did not render the reference pose."""
    total = sds_2d + w.guidance_3d * sds_3d
    parts = {"sds_2d": _f(sds_2d), "sds_3d": _f(sds_3d)}
    if rec is not None:
        total = total + rec
        parts["rec"] = _f(rec)
    return total, parts


def stage_loss_dynamic(sds_video: torch.Tensor, tv: torch.Tensor, rec: torch.Tensor,
                       sds_3d: torch.Tensor, t0_is_zero: bool, w: LossWeights
                       ) -> tuple[torch.Tensor, dict[str, float]]:
    """Video guidance + TV, plus (rec + lambda_3d * 3D guidance) gated on the
    clip starting bitwise at t = 0."""
    total = sds_video + w.tv * tv
    parts = {"sds_video": _f(sds_video), "tv": _f(tv)}
    if t0_is_zero:
        total = total + rec + w.guidance_3d * sds_3d
        parts["rec"] = _f(rec)
        parts["sds_3d"] = _f(sds_3d)
    return total, parts


def stage_loss_refine(sds_video: torch.Tensor, tv: torch.Tensor, rec: torch.Tensor,
                      sds_3d: torch.Tensor, sds_refine: torch.Tensor, t0_is_zero: bool,
                      w: LossWeights) -> tuple[torch.Tensor, dict[str, float]]:
    total, parts = stage_loss_dynamic(sds_video, tv, rec, sds_3d, t0_is_zero, w)
    total = total + w.refine * sds_refine
    parts["sds_refine"] = _f(sds_refine)
    return total, parts
