"""Decoding heads and shading on top of an encoding.

A single 2-layer MLP maps encoded features to raw (density, rgb) channels;
density goes through softplus, albedo through sigmoid. Normals come from
central differences of density and are not differentiated through (shading
gradients flow via albedo), which keeps the extra queries off the autograd
graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import InvalidInputError

SHADING_MODES = ("albedo", "lambertian", "textureless")


class FieldHeads:
    """softplus(feat @ w1 + b1) @ w2 + b2 -> (raw_density, raw_rgb[3]).

    The hidden activation is smooth on purpose: the training loss must agree
    with central finite differences to 1e-3, which a relu kink breaks."""

    def __init__(self, in_dim: int, hidden_dim: int, density_bias: float,
                 rng: np.random.Generator, dtype: torch.dtype):
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        w1 = rng.normal(0.0, np.sqrt(2.0 / in_dim), size=(in_dim, hidden_dim))
        w2 = rng.normal(0.0, np.sqrt(2.0 / hidden_dim), size=(hidden_dim, 4))
        b2 = np.zeros(4)
        b2[0] = density_bias
        self.w1 = torch.tensor(w1, dtype=dtype).requires_grad_(True)
        self.b1 = torch.zeros(hidden_dim, dtype=dtype).requires_grad_(True)
        self.w2 = torch.tensor(w2, dtype=dtype).requires_grad_(True)
        self.b2 = torch.tensor(b2, dtype=dtype).requires_grad_(True)

    @classmethod
    def from_tensors(cls, w1: torch.Tensor, b1: torch.Tensor, w2: torch.Tensor,
                     b2: torch.Tensor) -> "FieldHeads":
        heads = cls.__new__(cls)
        heads.in_dim = w1.shape[0]
        heads.hidden_dim = w1.shape[1]
        heads.w1, heads.b1, heads.w2, heads.b2 = w1, b1, w2, b2
        return heads

    def raw(self, feat: torch.Tensor) -> torch.Tensor:
        if feat.ndim != 2 or feat.shape[1] != self.in_dim:
            raise InvalidInputError(f"expected features (N, {self.in_dim}), got {tuple(feat.shape)}")
        hidden = torch.nn.functional.softplus(feat @ self.w1 + self.b1)
        return hidden @ self.w2 + self.b2

    def named_parameters(self) -> dict[str, torch.Tensor]:
        return {"heads.w1": self.w1, "heads.b1": self.b1,
                "heads.w2": self.w2, "heads.b2": self.b2}


def evaluate(heads: FieldHeads, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Features -> (density (N,), albedo (N, 3))."""
    raw = heads.raw(feat)
    return torch.nn.functional.softplus(raw[:, 0]), torch.sigmoid(raw[:, 1:4])


def normal_at(query_density, pts: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Outward normals from central differences of density.

    query_density: (M, 3) world points -> density tensor (M,). Normals point
    against the density gradient (density grows toward the interior). Returns
    (normals (N, 3), degenerate (N,) bool); degenerate rows (|grad| < 1e-12)
    fall back to (0, 0, 1).
    """
    n = pts.shape[0]
    probes = np.repeat(pts[None, :, :], 6, axis=0)  # (6, N, 3)
    for axis in range(3):
        probes[2 * axis, :, axis] += eps
        probes[2 * axis + 1, :, axis] -= eps
    with torch.no_grad():
        dens = query_density(probes.reshape(-1, 3)).detach().numpy().reshape(6, n)
    grad = np.stack([dens[0] - dens[1], dens[2] - dens[3], dens[4] - dens[5]], axis=1)
    grad = grad / (2.0 * eps)
    norms = np.linalg.norm(grad, axis=1)
    degenerate = norms < 1e-12
    normals = np.zeros_like(grad)
    good = ~degenerate
    normals[good] = -grad[good] / norms[good, None]
    normals[degenerate] = (0.0, 0.0, 1.0)
    return normals, degenerate


def shade(albedo: torch.Tensor, normals: torch.Tensor, mode: str,
          light_dir: torch.Tensor, ambient: float) -> torch.Tensor:
    """Per-sample color under one of the three shading modes.

    lambertian/textureless use ambient + (1 - ambient) * max(0, n . l); the
    textureless branch replaces albedo with white. light_dir must be unit.
    """
    if mode == "albedo":
        return albedo
    if mode not in SHADING_MODES:
        raise InvalidInputError(f"unknown shading mode {mode!r}")
    lambert = (normals * light_dir).sum(dim=1).clamp(min=0.0)
    factor = (ambient + (1.0 - ambient) * lambert).unsqueeze(1)
    if mode == "textureless":
        return factor.expand(-1, 3).to(albedo.dtype) * torch.ones_like(albedo)
    return albedo * factor


@dataclass(frozen=True)
class ShadingProbs:
    albedo: float = 0.75
    lambertian: float = 0.2
    textureless: float = 0.05


def sample_shading_mode(probs: ShadingProbs, rng: np.random.Generator) -> str:
    u = rng.random()
    if u < probs.albedo:
        return "albedo"
    if u < probs.albedo + probs.lambertian:
        return "lambertian"
    return "textureless"
