"""Scene model: an encoding plus decoding heads, queryable in world space.

World coordinates live in the box [-1, 1]^3 and map affinely onto the
encoding's unit cube. A FrameQuery pins the query time so per-frame work
(the time-blended table of a Grid4D) is done once per rendered frame rather
than once per sample batch.
"""

from __future__ import annotations

import numpy as np
import torch

from . import field
from .config import Config
from .encoding import (
    Grid4D,
    HexPlaneEncoding,
    MultiScaleGrid3D,
    make_dynamic_grid,
    make_hexplane,
    make_static_grid,
    torch_dtype,
)
from .errors import InvalidInputError
from .kernels import grid_gather


def world_to_unit(pts: np.ndarray) -> np.ndarray:
    """[-1, 1]^3 -> [0, 1]^3 with clamping; NaN is rejected."""
    if np.isnan(pts).any():
        raise InvalidInputError("NaN in world coordinates")
    return np.clip((pts + 1.0) * 0.5, 0.0, 1.0)


class FrameQuery:
    """Model queries at one fixed time."""

    def __init__(self, model: "SceneModel", t: float):
        self.model = model
        self.t = float(t)
        enc = model.encoding
        self._blended = enc.blended_table(self.t) if isinstance(enc, Grid4D) else None

    def features(self, pts_world: np.ndarray) -> torch.Tensor:
        coords = world_to_unit(pts_world).astype(self.model.np_dtype)
        enc = self.model.encoding
        if self._blended is not None:
            return grid_gather(self._blended, coords, enc.layout, enc.feature_dim)
        if isinstance(enc, MultiScaleGrid3D):
            return enc.lookup(coords)
        return enc.lookup(coords, self.t)

    def density_albedo(self, pts_world: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]:
        return field.evaluate(self.model.heads, self.features(pts_world))

    def density(self, pts_world: np.ndarray) -> torch.Tensor:
        return self.density_albedo(pts_world)[0]


class SceneModel:
    def __init__(self, encoding, heads: field.FieldHeads, dtype: torch.dtype):
        self.encoding = encoding
        self.heads = heads
        self.dtype = dtype
        self.np_dtype = np.float32 if dtype == torch.float32 else np.float64

    def at_time(self, t: float) -> FrameQuery:
        return FrameQuery(self, t)

    def named_parameters(self) -> dict[str, torch.Tensor]:
        params = {"encoding.table": self.encoding.table}
        params.update(self.heads.named_parameters())
        return params

    def normal_eps(self) -> float:
        """Half the finest dense voxel size in world units. The world box has
        extent 2 and a lattice of resolution R has pitch 2 / (R - 1)."""
        enc = self.encoding
        if hasattr(enc, "layout"):
            dense_res = [int(r) for r, d in zip(enc.layout.resolutions, enc.layout.dense) if d]
            finest = max(dense_res) if dense_res else int(enc.layout.resolutions[0])
        else:
            finest = max(enc.level_resolutions)
        return 1.0 / (finest - 1)

    def tv_loss(self) -> torch.Tensor:
        return self.encoding.tv_loss()


def build_model(cfg: Config, stage: str, rng: np.random.Generator) -> SceneModel:
    """Fresh model for a stage; 'static' uses a single-slice grid."""
    dtype = torch_dtype(cfg["trainer.dtype"])
    backbone = cfg["encoding.backbone"]
    args = (cfg["encoding.levels"], cfg["encoding.min_res"], cfg["encoding.max_res"],
            cfg["encoding.feature_dim"])
    if backbone == "hexplane":
        enc = make_hexplane(*args, rng=rng, dtype=dtype)
    elif stage == "static":
        enc = make_static_grid(*args, dense_threshold=cfg["encoding.dense_threshold"],
                               hash_table_size=cfg["encoding.hash_table_size"],
                               rng=rng, dtype=dtype)
    else:
        enc = make_dynamic_grid(*args, time_slices=cfg["encoding.time_slices"],
                                dense_threshold=cfg["encoding.dense_threshold"],
                                hash_table_size=cfg["encoding.hash_table_size"],
                                rng=rng, dtype=dtype)
    heads = field.FieldHeads(enc.output_dim, cfg["field.hidden_dim"],
                             cfg["field.density_bias"], rng, dtype)
    return SceneModel(enc, heads, dtype)
