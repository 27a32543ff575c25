"""Fused CPU gather kernels for multi-scale grid lookups.

The hot path of every training iteration is trilinear interpolation into the
feature tables. The numba kernels below fuse the per-level corner gathers for
all levels into one pass over the query points; torch sees them through an
autograd.Function whose backward scatters into a dense table gradient. A
vectorized pure-torch implementation of the same semantics is kept alongside
as a cross-check (and as the fallback documentation of the contract).

Kernels run single-threaded; determinism of the accumulation order is part of
the contract (bit-identical re-runs).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from numba import njit

# Spatial hash for levels too fine to store densely. The first axis is left
# unmixed on purpose; collisions only matter above the dense threshold.
HASH_PRIME_Y = 2654435761
HASH_PRIME_Z = 805459861


@dataclass(frozen=True)
class LevelLayout:
    """Row layout of a stacked multi-level feature table.

    resolutions: per-level lattice size R (R**3 cells for dense levels).
    offsets: row offset of each level plus a trailing total-row count.
    dense: 1 where corners are addressed linearly as x + R*(y + R*z) (dense
        levels, and hashed levels whose full lattice fits in their rows), 0
        where they are hashed into a power-of-two row count.
    """
    resolutions: np.ndarray  # (L,) int64
    offsets: np.ndarray      # (L+1,) int64
    dense: np.ndarray        # (L,) uint8

    @property
    def num_levels(self) -> int:
        return int(self.resolutions.shape[0])

    @property
    def total_rows(self) -> int:
        return int(self.offsets[-1])


def hash_index(ix: int, iy: int, iz: int, table_size: int) -> int:
    """Row index of an integer lattice corner in a hashed level."""
    return (ix ^ (iy * HASH_PRIME_Y) ^ (iz * HASH_PRIME_Z)) & (table_size - 1)


@njit(cache=True)
def _grid_gather_fwd(coords, table, res, offs, dense, feat_dim, out):
    n = coords.shape[0]
    num_levels = res.shape[0]
    for i in range(n):
        x = coords[i, 0]
        y = coords[i, 1]
        z = coords[i, 2]
        for l in range(num_levels):
            r = res[l]
            base = offs[l]
            nrows = offs[l + 1] - offs[l]
            gx = x * (r - 1)
            gy = y * (r - 1)
            gz = z * (r - 1)
            ix = int(gx)
            iy = int(gy)
            iz = int(gz)
            if ix > r - 2:
                ix = r - 2
            if iy > r - 2:
                iy = r - 2
            if iz > r - 2:
                iz = r - 2
            fx = gx - ix
            fy = gy - iy
            fz = gz - iz
            for c in range(8):
                cx = c & 1
                cy = (c >> 1) & 1
                cz = (c >> 2) & 1
                jx = ix + cx
                jy = iy + cy
                jz = iz + cz
                w = ((fx if cx == 1 else 1.0 - fx)
                     * (fy if cy == 1 else 1.0 - fy)
                     * (fz if cz == 1 else 1.0 - fz))
                if dense[l] == 1:
                    row = base + jx + r * (jy + r * jz)
                else:
                    row = base + ((jx ^ (jy * HASH_PRIME_Y) ^ (jz * HASH_PRIME_Z)) & (nrows - 1))
                for f in range(feat_dim):
                    out[i, l * feat_dim + f] += w * table[row, f]


@njit(cache=True)
def _grid_gather_bwd(coords, grad_out, res, offs, dense, feat_dim, grad_table):
    n = coords.shape[0]
    num_levels = res.shape[0]
    for i in range(n):
        x = coords[i, 0]
        y = coords[i, 1]
        z = coords[i, 2]
        for l in range(num_levels):
            r = res[l]
            base = offs[l]
            nrows = offs[l + 1] - offs[l]
            gx = x * (r - 1)
            gy = y * (r - 1)
            gz = z * (r - 1)
            ix = int(gx)
            iy = int(gy)
            iz = int(gz)
            if ix > r - 2:
                ix = r - 2
            if iy > r - 2:
                iy = r - 2
            if iz > r - 2:
                iz = r - 2
            fx = gx - ix
            fy = gy - iy
            fz = gz - iz
            for c in range(8):
                cx = c & 1
                cy = (c >> 1) & 1
                cz = (c >> 2) & 1
                jx = ix + cx
                jy = iy + cy
                jz = iz + cz
                w = ((fx if cx == 1 else 1.0 - fx)
                     * (fy if cy == 1 else 1.0 - fy)
                     * (fz if cz == 1 else 1.0 - fz))
                if dense[l] == 1:
                    row = base + jx + r * (jy + r * jz)
                else:
                    row = base + ((jx ^ (jy * HASH_PRIME_Y) ^ (jz * HASH_PRIME_Z)) & (nrows - 1))
                for f in range(feat_dim):
                    grad_table[row, f] += w * grad_out[i, l * feat_dim + f]


# HexPlane: per level six dense 2D planes over the axis pairs below; a level's
# feature is the elementwise product of the six bilinear lookups.
_PLANE_AXIS_A = np.array([0, 0, 1, 0, 1, 2], dtype=np.int64)
_PLANE_AXIS_B = np.array([1, 2, 2, 3, 3, 3], dtype=np.int64)


@njit(cache=True)
def _hexplane_fwd(coords, table, res, plane_offs, axis_a, axis_b, feat_dim, out):
    n = coords.shape[0]
    num_levels = res.shape[0]
    prod = np.empty(feat_dim, dtype=table.dtype)
    for i in range(n):
        for l in range(num_levels):
            r = res[l]
            for f in range(feat_dim):
                prod[f] = 1.0
            for p in range(6):
                a = coords[i, axis_a[p]]
                b = coords[i, axis_b[p]]
                ga = a * (r - 1)
                gb = b * (r - 1)
                ia = int(ga)
                ib = int(gb)
                if ia > r - 2:
                    ia = r - 2
                if ib > r - 2:
                    ib = r - 2
                fa = ga - ia
                fb = gb - ib
                base = plane_offs[l * 6 + p]
                for f in range(feat_dim):
                    s = ((1.0 - fa) * (1.0 - fb) * table[base + ia + r * ib, f]
                         + fa * (1.0 - fb) * table[base + ia + 1 + r * ib, f]
                         + (1.0 - fa) * fb * table[base + ia + r * (ib + 1), f]
                         + fa * fb * table[base + ia + 1 + r * (ib + 1), f])
                    prod[f] *= s
            for f in range(feat_dim):
                out[i, l * feat_dim + f] = prod[f]


@njit(cache=True)
def _hexplane_bwd(coords, grad_out, table, res, plane_offs, axis_a, axis_b, feat_dim, grad_table):
    n = coords.shape[0]
    num_levels = res.shape[0]
    svals = np.empty((6, feat_dim), dtype=table.dtype)
    for i in range(n):
        for l in range(num_levels):
            r = res[l]
            # recompute the six bilinear values
            for p in range(6):
                a = coords[i, axis_a[p]]
                b = coords[i, axis_b[p]]
                ga = a * (r - 1)
                gb = b * (r - 1)
                ia = int(ga)
                ib = int(gb)
                if ia > r - 2:
                    ia = r - 2
                if ib > r - 2:
                    ib = r - 2
                fa = ga - ia
                fb = gb - ib
                base = plane_offs[l * 6 + p]
                for f in range(feat_dim):
                    svals[p, f] = ((1.0 - fa) * (1.0 - fb) * table[base + ia + r * ib, f]
                                   + fa * (1.0 - fb) * table[base + ia + 1 + r * ib, f]
                                   + (1.0 - fa) * fb * table[base + ia + r * (ib + 1), f]
                                   + fa * fb * table[base + ia + 1 + r * (ib + 1), f])
            # scatter plane gradients: d prod / d s_p = product of the others
            for p in range(6):
                a = coords[i, axis_a[p]]
                b = coords[i, axis_b[p]]
                ga = a * (r - 1)
                gb = b * (r - 1)
                ia = int(ga)
                ib = int(gb)
                if ia > r - 2:
                    ia = r - 2
                if ib > r - 2:
                    ib = r - 2
                fa = ga - ia
                fb = gb - ib
                base = plane_offs[l * 6 + p]
                for f in range(feat_dim):
                    others = 1.0
                    for q in range(6):
                        if q != p:
                            others *= svals[q, f]
                    g = grad_out[i, l * feat_dim + f] * others
                    grad_table[base + ia + r * ib, f] += (1.0 - fa) * (1.0 - fb) * g
                    grad_table[base + ia + 1 + r * ib, f] += fa * (1.0 - fb) * g
                    grad_table[base + ia + r * (ib + 1), f] += (1.0 - fa) * fb * g
                    grad_table[base + ia + 1 + r * (ib + 1), f] += fa * fb * g


class _GridGather(torch.autograd.Function):
    @staticmethod
    def forward(ctx, table: torch.Tensor, coords: np.ndarray, layout: LevelLayout,
                feat_dim: int) -> torch.Tensor:
        out = torch.zeros((coords.shape[0], layout.num_levels * feat_dim), dtype=table.dtype)
        _grid_gather_fwd(coords, table.detach().numpy(), layout.resolutions,
                         layout.offsets, layout.dense, feat_dim, out.numpy())
        ctx.coords = coords
        ctx.layout = layout
        ctx.feat_dim = feat_dim
        ctx.table_shape = tuple(table.shape)
        ctx.table_dtype = table.dtype
        return out

    @staticmethod
    def backward(ctx, grad_out: torch.Tensor):
        grad_table = torch.zeros(ctx.table_shape, dtype=ctx.table_dtype)
        _grid_gather_bwd(ctx.coords, grad_out.contiguous().detach().numpy(),
                         ctx.layout.resolutions, ctx.layout.offsets, ctx.layout.dense,
                         ctx.feat_dim, grad_table.numpy())
        return grad_table, None, None, None


class _HexPlaneGather(torch.autograd.Function):
    @staticmethod
    def forward(ctx, table: torch.Tensor, coords: np.ndarray, resolutions: np.ndarray,
                plane_offsets: np.ndarray, feat_dim: int) -> torch.Tensor:
        out = torch.zeros((coords.shape[0], resolutions.shape[0] * feat_dim), dtype=table.dtype)
        _hexplane_fwd(coords, table.detach().numpy(), resolutions, plane_offsets,
                      _PLANE_AXIS_A, _PLANE_AXIS_B, feat_dim, out.numpy())
        ctx.save_for_backward(table)
        ctx.coords = coords
        ctx.resolutions = resolutions
        ctx.plane_offsets = plane_offsets
        ctx.feat_dim = feat_dim
        return out

    @staticmethod
    def backward(ctx, grad_out: torch.Tensor):
        (table,) = ctx.saved_tensors
        grad_table = torch.zeros_like(table)
        _hexplane_bwd(ctx.coords, grad_out.contiguous().detach().numpy(),
                      table.detach().numpy(), ctx.resolutions, ctx.plane_offsets,
                      _PLANE_AXIS_A, _PLANE_AXIS_B, ctx.feat_dim, grad_table.numpy())
        return grad_table, None, None, None, None


def grid_gather(table: torch.Tensor, coords: np.ndarray, layout: LevelLayout,
                feat_dim: int) -> torch.Tensor:
    """Trilinear multi-level gather. coords: (N, 3) in [0, 1], same float type
    as the table; returns (N, L * feat_dim) with grad wrt the table."""
    return _GridGather.apply(table, np.ascontiguousarray(coords), layout, feat_dim)


def hexplane_gather(table: torch.Tensor, coords: np.ndarray, resolutions: np.ndarray,
                    plane_offsets: np.ndarray, feat_dim: int) -> torch.Tensor:
    """Six-plane product gather. coords: (N, 4) as (x, y, z, t) in [0, 1]."""
    return _HexPlaneGather.apply(table, np.ascontiguousarray(coords), resolutions,
                                 plane_offsets, feat_dim)


def grid_gather_torch(table: torch.Tensor, coords: np.ndarray, layout: LevelLayout,
                      feat_dim: int) -> torch.Tensor:
    """Pure-torch reference of grid_gather (differentiable, slower)."""
    coords_t = torch.from_numpy(np.ascontiguousarray(coords))
    feats = []
    for l in range(layout.num_levels):
        r = int(layout.resolutions[l])
        base = int(layout.offsets[l])
        nrows = int(layout.offsets[l + 1] - layout.offsets[l])
        g = coords_t * (r - 1)
        i0 = g.floor().long().clamp_(max=r - 2)
        frac = g - i0
        level_feat = torch.zeros((coords_t.shape[0], feat_dim), dtype=table.dtype)
        for c in range(8):
            bits = torch.tensor([c & 1, (c >> 1) & 1, (c >> 2) & 1], dtype=torch.long)
            j = i0 + bits
            w = torch.where(bits.bool(), frac, 1.0 - frac).prod(dim=1, keepdim=True)
            if layout.dense[l] == 1:
                rows = base + j[:, 0] + r * (j[:, 1] + r * j[:, 2])
            else:
                rows = base + ((j[:, 0] ^ (j[:, 1] * HASH_PRIME_Y) ^ (j[:, 2] * HASH_PRIME_Z))
                               & (nrows - 1))
            level_feat = level_feat + w.to(table.dtype) * table[rows]
        feats.append(level_feat)
    return torch.cat(feats, dim=1)


def hexplane_gather_torch(table: torch.Tensor, coords: np.ndarray, resolutions: np.ndarray,
                          plane_offsets: np.ndarray, feat_dim: int) -> torch.Tensor:
    """Pure-torch reference of hexplane_gather."""
    coords_t = torch.from_numpy(np.ascontiguousarray(coords))
    feats = []
    for l in range(resolutions.shape[0]):
        r = int(resolutions[l])
        prod = torch.ones((coords_t.shape[0], feat_dim), dtype=table.dtype)
        for p in range(6):
            a = coords_t[:, int(_PLANE_AXIS_A[p])] * (r - 1)
            b = coords_t[:, int(_PLANE_AXIS_B[p])] * (r - 1)
            ia = a.floor().long().clamp_(max=r - 2)
            ib = b.floor().long().clamp_(max=r - 2)
            fa = (a - ia).unsqueeze(1).to(table.dtype)
            fb = (b - ib).unsqueeze(1).to(table.dtype)
            base = int(plane_offsets[l * 6 + p])
            s = ((1 - fa) * (1 - fb) * table[base + ia + r * ib]
                 + fa * (1 - fb) * table[base + ia + 1 + r * ib]
                 + (1 - fa) * fb * table[base + ia + r * (ib + 1)]
                 + fa * fb * table[base + ia + 1 + r * (ib + 1)])
            prod = prod * s
        feats.append(prod)
    return torch.cat(feats, dim=1)
