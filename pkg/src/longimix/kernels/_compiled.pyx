# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled voxel kernels.

Single fused pass over the grid: no gradient tensor is materialized, which
is the point of this backend on full-size volumes.  Arithmetic (stencils,
scaling by precomputed reciprocals, cofactor expansion) mirrors
``kernels._numpy`` exactly so the two backends agree bit-for-bit; the build
disables FP contraction for the same reason.
"""

import numpy as np


def jacobian_det_field(const double[:, :, :, ::1] vectors, double sx, double sy, double sz):
    """det(I + grad u) at every voxel of a displacement field."""
    cdef Py_ssize_t nx = vectors.shape[0]
    cdef Py_ssize_t ny = vectors.shape[1]
    cdef Py_ssize_t nz = vectors.shape[2]
    cdef double inv2x = 0.5 / sx, inv1x = 1.0 / sx
    cdef double inv2y = 0.5 / sy, inv1y = 1.0 / sy
    cdef double inv2z = 0.5 / sz, inv1z = 1.0 / sz

    out_arr = np.empty((nx, ny, nz), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr

    cdef Py_ssize_t ix, iy, iz
    cdef int c
    cdef double g[3][3]
    cdef double j00, j11, j22

    with nogil:
        for ix in range(nx):
            for iy in range(ny):
                for iz in range(nz):
                    for c in range(3):
                        if 0 < ix < nx - 1:
                            g[c][0] = (vectors[ix + 1, iy, iz, c] - vectors[ix - 1, iy, iz, c]) * inv2x
                        elif ix == 0:
                            g[c][0] = (vectors[1, iy, iz, c] - vectors[0, iy, iz, c]) * inv1x
                        else:
                            g[c][0] = (vectors[nx - 1, iy, iz, c] - vectors[nx - 2, iy, iz, c]) * inv1x

                        if 0 < iy < ny - 1:
                            g[c][1] = (vectors[ix, iy + 1, iz, c] - vectors[ix, iy - 1, iz, c]) * inv2y
                        elif iy == 0:
                            g[c][1] = (vectors[ix, 1, iz, c] - vectors[ix, 0, iz, c]) * inv1y
                        else:
                            g[c][1] = (vectors[ix, ny - 1, iz, c] - vectors[ix, ny - 2, iz, c]) * inv1y

                        if 0 < iz < nz - 1:
                            g[c][2] = (vectors[ix, iy, iz + 1, c] - vectors[ix, iy, iz - 1, c]) * inv2z
                        elif iz == 0:
                            g[c][2] = (vectors[ix, iy, 1, c] - vectors[ix, iy, 0, c]) * inv1z
                        else:
                            g[c][2] = (vectors[ix, iy, nz - 1, c] - vectors[ix, iy, nz - 2, c]) * inv1z

                    j00 = 1.0 + g[0][0]
                    j11 = 1.0 + g[1][1]
                    j22 = 1.0 + g[2][2]
                    out[ix, iy, iz] = (
                        j00 * (j11 * j22 - g[1][2] * g[2][1])
                        - g[0][1] * (g[1][0] * j22 - g[1][2] * g[2][0])
                        + g[0][2] * (g[1][0] * g[2][1] - j11 * g[2][0])
                    )
    return out_arr
