"""Multi-scale spatio-temporal feature encodings.

Two backbones share one query contract (features for points in the unit cube
at a time t in [0, 1]):

* MultiScaleGrid3D / Grid4D: per-level 3D lattices, dense below a resolution
  threshold and hash-mapped above it. Grid4D stores T time slices and blends
  the two neighboring slices linearly in t; the blend is computed as
  f0 + w * (f1 - f0) so that identical slices reproduce f0 exactly.
* HexPlaneEncoding: six dense 2D planes per level over the axis pairs
  (xy, xz, yz, xt, yt, zt), fused by elementwise product.

Tables are torch leaf tensors; lookups run through the fused kernels and are
differentiable with respect to the tables only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, InvalidInputError
from .kernels import LevelLayout, grid_gather, hexplane_gather

_TORCH_DTYPES = {"float32": torch.float32, "float64": torch.float64}


def torch_dtype(name: str) -> torch.dtype:
    try:
        return _TORCH_DTYPES[name]
    except KeyError:
        raise ConfigError(f"unsupported dtype {name!r}") from None


def level_resolutions(levels: int, min_res: int, max_res: int) -> list[int]:
    """Geometric ladder from min_res to max_res, strictly increasing."""
    if levels == 1:
        return [min_res]
    step = (math.log(max_res) - math.log(min_res)) / (levels - 1)
    out: list[int] = []
    for l in range(levels):
        r = int(round(math.exp(math.log(min_res) + step * l)))
        if out and r <= out[-1]:
            r = out[-1] + 1
        out.append(r)
    out[0], out[-1] = min_res, max_res
    if any(b <= a for a, b in zip(out, out[1:])):
        raise ConfigError(f"cannot build {levels} strictly increasing levels in [{min_res}, {max_res}]")
    return out


def build_layout(levels: int, min_res: int, max_res: int, dense_threshold: int,
                 hash_table_size: int) -> LevelLayout:
    if hash_table_size < 2 or hash_table_size & (hash_table_size - 1):
        raise ConfigError("hash_table_size must be a power of two >= 2")
    res = level_resolutions(levels, min_res, max_res)
    rows = [r ** 3 if r <= dense_threshold else hash_table_size for r in res]
    offsets = np.concatenate([[0], np.cumsum(rows)]).astype(np.int64)
    # Linear (collision-free) addressing whenever the full lattice fits in the
    # level's rows; hashed levels fall back to it for small resolutions, which
    # makes hashed and dense modes agree exactly there.
    dense = np.array([1 if r ** 3 <= n else 0 for r, n in zip(res, rows)], dtype=np.uint8)
    return LevelLayout(resolutions=np.array(res, dtype=np.int64), offsets=offsets, dense=dense)


def _validate_coords(coords: np.ndarray) -> np.ndarray:
    if np.isnan(coords).any():
        raise InvalidInputError("NaN in query coordinates")
    return np.clip(coords, 0.0, 1.0)


def time_weights(t: float, time_slices: int) -> tuple[int, int, float]:
    """Neighbor slice indices and blend weight for a query time.

    Slice i sits at t = i / (T - 1); returns (i0, i1, w) such that the blended
    feature is f0 + w * (f1 - f0). Exactly-on-center queries give i0 == i1 and
    w == 0. t is clamped to [0, 1]; NaN is rejected.
    """
    if math.isnan(t):
        raise InvalidInputError("NaN query time")
    t = min(max(float(t), 0.0), 1.0)
    if time_slices == 1:
        return 0, 0, 0.0
    s = t * (time_slices - 1)
    i0 = int(s)
    if i0 >= time_slices - 1:
        return time_slices - 1, time_slices - 1, 0.0
    w = s - i0
    if w == 0.0:
        return i0, i0, 0.0
    return i0, i0 + 1, w


class MultiScaleGrid3D:
    """Static multi-scale feature grid over the unit cube."""

    def __init__(self, layout: LevelLayout, feature_dim: int, table: torch.Tensor):
        if feature_dim < 1:
            raise ConfigError("feature_dim must be >= 1")
        if tuple(table.shape) != (layout.total_rows, feature_dim):
            raise ConfigError(f"table shape {tuple(table.shape)} does not match layout "
                              f"({layout.total_rows}, {feature_dim})")
        self.layout = layout
        self.feature_dim = feature_dim
        self.table = table

    @property
    def level_resolutions(self) -> list[int]:
        return [int(r) for r in self.layout.resolutions]

    @property
    def output_dim(self) -> int:
        return self.layout.num_levels * self.feature_dim

    def lookup(self, coords01: np.ndarray) -> torch.Tensor:
        """coords01: (N, 3) already clamped to [0, 1]."""
        return grid_gather(self.table, coords01, self.layout, self.feature_dim)

    def interpolate(self, x, y, z) -> torch.Tensor:
        coords = np.stack(np.broadcast_arrays(np.asarray(x, dtype=np.float64),
                                              np.asarray(y, dtype=np.float64),
                                              np.asarray(z, dtype=np.float64)), axis=-1)
        scalar = coords.ndim == 1
        coords = _validate_coords(coords.reshape(-1, 3))
        out = self.lookup(coords.astype(self.table.detach().numpy().dtype))
        return out[0] if scalar else out


class Grid4D:
    """T stacked MultiScaleGrid3D slices with linear time interpolation."""

    def __init__(self, layout: LevelLayout, feature_dim: int, time_slices: int,
                 table: torch.Tensor):
        if time_slices < 1:
            raise ConfigError("time_slices must be >= 1")
        rows = layout.total_rows
        if tuple(table.shape) != (time_slices * rows, feature_dim):
            raise ConfigError(f"table shape {tuple(table.shape)} does not match "
                              f"({time_slices * rows}, {feature_dim})")
        self.layout = layout
        self.feature_dim = feature_dim
        self.time_slices = time_slices
        self.table = table

    @property
    def level_resolutions(self) -> list[int]:
        return [int(r) for r in self.layout.resolutions]

    @property
    def output_dim(self) -> int:
        return self.layout.num_levels * self.feature_dim

    def time_slice(self, i: int) -> MultiScaleGrid3D:
        """View of slice i; shares storage and autograd history."""
        if not 0 <= i < self.time_slices:
            raise InvalidInputError(f"slice index {i} out of range [0, {self.time_slices})")
        rows = self.layout.total_rows
        return MultiScaleGrid3D(self.layout, self.feature_dim,
                                self.table.narrow(0, i * rows, rows))

    def blended_table(self, t: float) -> torch.Tensor:
        """Time-interpolated per-level table for one query time. On slice
        centers this is a zero-copy view, which makes renders of a lifted
        static grid bit-identical to the static renders."""
        i0, i1, w = time_weights(t, self.time_slices)
        rows = self.layout.total_rows
        a = self.table.narrow(0, i0 * rows, rows)
        if i1 == i0:
            return a
        b = self.table.narrow(0, i1 * rows, rows)
        return a + (b - a) * w

    def lookup(self, coords01: np.ndarray, t: float) -> torch.Tensor:
        return grid_gather(self.blended_table(t), coords01, self.layout, self.feature_dim)

    def interpolate(self, x, y, z, t: float = 0.0) -> torch.Tensor:
        coords = np.stack(np.broadcast_arrays(np.asarray(x, dtype=np.float64),
                                              np.asarray(y, dtype=np.float64),
                                              np.asarray(z, dtype=np.float64)), axis=-1)
        scalar = coords.ndim == 1
        coords = _validate_coords(coords.reshape(-1, 3))
        out = self.lookup(coords.astype(self.table.detach().numpy().dtype), t)
        return out[0] if scalar else out

    def tv_loss(self) -> torch.Tensor:
        """Sum of squared differences between adjacent time slices over all
        stored parameters; zero for a single slice."""
        v = self.table.view(self.time_slices, -1)
        d = v[1:] - v[:-1]
        return (d * d).sum()


def lift_static_to_dynamic(static: MultiScaleGrid3D, time_slices: int) -> Grid4D:
    """Copy a static grid into every one of T time slices.

    The result renders identically to the source at every t (adjacent slices
    are equal, so the blend f0 + w * (f1 - f0) collapses to f0) and has
    exactly zero temporal smoothness loss.
    """
    if time_slices < 1:
        raise InvalidInputError("time_slices must be >= 1")
    table = static.table.detach().repeat(time_slices, 1).requires_grad_(True)
    return Grid4D(static.layout, static.feature_dim, time_slices, table)


class HexPlaneEncoding:
    """Six-plane factorized 4D encoding, dense planes, product fusion."""

    def __init__(self, resolutions: np.ndarray, feature_dim: int, table: torch.Tensor):
        self.resolutions = np.asarray(resolutions, dtype=np.int64)
        self.feature_dim = feature_dim
        rows = [int(r) ** 2 for r in self.resolutions for _ in range(6)]
        self.plane_offsets = np.concatenate([[0], np.cumsum(rows)]).astype(np.int64)
        if tuple(table.shape) != (int(self.plane_offsets[-1]), feature_dim):
            raise ConfigError(f"table shape {tuple(table.shape)} does not match "
                              f"({int(self.plane_offsets[-1])}, {feature_dim})")
        self.table = table

    @property
    def level_resolutions(self) -> list[int]:
        return [int(r) for r in self.resolutions]

    @property
    def output_dim(self) -> int:
        return int(self.resolutions.shape[0]) * self.feature_dim

    def lookup(self, coords01: np.ndarray, t: float) -> torch.Tensor:
        if math.isnan(t):
            raise InvalidInputError("NaN query time")
        t = min(max(float(t), 0.0), 1.0)
        coords4 = np.concatenate(
            [coords01, np.full((coords01.shape[0], 1), t, dtype=coords01.dtype)], axis=1)
        return hexplane_gather(self.table, coords4, self.resolutions,
                               self.plane_offsets, self.feature_dim)

    def interpolate(self, x, y, z, t: float = 0.0) -> torch.Tensor:
        coords = np.stack(np.broadcast_arrays(np.asarray(x, dtype=np.float64),
                                              np.asarray(y, dtype=np.float64),
                                              np.asarray(z, dtype=np.float64)), axis=-1)
        scalar = coords.ndim == 1
        coords = _validate_coords(coords.reshape(-1, 3))
        out = self.lookup(coords.astype(self.table.detach().numpy().dtype), t)
        return out[0] if scalar else out

    def tv_loss(self) -> torch.Tensor:
        # Continuous time axis; adjacent-slice smoothness does not apply.
        return self.table.new_zeros(())


_GRID_INIT_STD = 0.1


def make_static_grid(levels: int, min_res: int, max_res: int, feature_dim: int,
                     dense_threshold: int, hash_table_size: int,
                     rng: np.random.Generator, dtype: torch.dtype) -> MultiScaleGrid3D:
    layout = build_layout(levels, min_res, max_res, dense_threshold, hash_table_size)
    values = rng.normal(0.0, _GRID_INIT_STD, size=(layout.total_rows, feature_dim))
    table = torch.tensor(values, dtype=dtype).requires_grad_(True)
    return MultiScaleGrid3D(layout, feature_dim, table)


def make_dynamic_grid(levels: int, min_res: int, max_res: int, feature_dim: int,
                      time_slices: int, dense_threshold: int, hash_table_size: int,
                      rng: np.random.Generator, dtype: torch.dtype) -> Grid4D:
    layout = build_layout(levels, min_res, max_res, dense_threshold, hash_table_size)
    values = rng.normal(0.0, _GRID_INIT_STD, size=(time_slices * layout.total_rows, feature_dim))
    table = torch.tensor(values, dtype=dtype).requires_grad_(True)
    return Grid4D(layout, feature_dim, time_slices, table)


def make_hexplane(levels: int, min_res: int, max_res: int, feature_dim: int,
                  rng: np.random.Generator, dtype: torch.dtype) -> HexPlaneEncoding:
    res = np.array(level_resolutions(levels, min_res, max_res), dtype=np.int64)
    rows_per_plane = [int(r) ** 2 for r in res for _ in range(6)]
    total = int(np.sum(rows_per_plane))
    values = np.ones((total, feature_dim))
    # Spatial planes carry the signal; planes with a time axis start at 1 so
    # the product fusion is initially time-invariant.
    offset = 0
    for r in res:
        for p in range(6):
            n = int(r) ** 2
            if p < 3:
                values[offset:offset + n] = rng.uniform(0.1, 0.5, size=(n, feature_dim))
            offset += n
    table = torch.tensor(values, dtype=dtype).requires_grad_(True)
    return HexPlaneEncoding(res, feature_dim, table)
