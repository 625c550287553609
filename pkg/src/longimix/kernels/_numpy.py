"""Pure-numpy voxel kernels (fallback backend).

The compiled backend must agree with these bit-for-bit, so both apply the
same stencils in the same order: central differences in the interior,
first-order one-sided differences on boundary faces, each scaled by a
precomputed reciprocal of the voxel spacing, and the same cofactor
expansion for the determinant.
"""

from __future__ import annotations

import numpy as np


def _axis_derivative(comp: np.ndarray, axis: int, h: float) -> np.ndarray:
    """Finite-difference derivative of one component along one axis."""
    inv2 = 0.5 / h
    inv1 = 1.0 / h

    def at(s):
        idx = [slice(None)] * 3
        idx[axis] = s
        return tuple(idx)

    out = np.empty_like(comp)
    out[at(slice(1, -1))] = (comp[at(slice(2, None))] - comp[at(slice(None, -2))]) * inv2
    out[at(0)] = (comp[at(1)] - comp[at(0)]) * inv1
    out[at(-1)] = (comp[at(-1)] - comp[at(-2)]) * inv1
    return out


def displacement_gradient(vectors: np.ndarray, spacing) -> np.ndarray:
    """Gradient tensor g[..., c, a] = d u_c / d x_a over the whole grid."""
    nx, ny, nz, _ = vectors.shape
    g = np.empty((nx, ny, nz, 3, 3))
    for c in range(3):
        comp = vectors[..., c]
        for a in range(3):
            g[..., c, a] = _axis_derivative(comp, a, spacing[a])
    return g


def jacobian_det_field(vectors: np.ndarray, sx: float, sy: float, sz: float) -> np.ndarray:
    """det(I + grad u) at every voxel of a displacement field."""
    g = displacement_gradient(vectors, (sx, sy, sz))
    g01 = g[..., 0, 1]
    g02 = g[..., 0, 2]
    g10 = g[..., 1, 0]
    g12 = g[..., 1, 2]
    g20 = g[..., 2, 0]
    g21 = g[..., 2, 1]
    j00 = 1.0 + g[..., 0, 0]
    j11 = 1.0 + g[..., 1, 1]
    j22 = 1.0 + g[..., 2, 2]
    return (
        j00 * (j11 * j22 - g12 * g21)
        - g01 * (g10 * j22 - g12 * g20)
        + g02 * (g10 * g21 - j11 * g20)
    )
