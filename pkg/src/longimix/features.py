"""Tumor features from volumetric inputs.

Two families: tumor volume (occupied voxel count times physical voxel
volume) and moment statistics of the deformation Jacobian over the tumor
region.  The deformation convention is x -> x + u(x), so the per-voxel
Jacobian is J = I + grad u; statistics are taken over det(J), the local
volume-change factor.  A literal-text alternative taking moments over the
raw grad-u entries is available via ``source="gradient"``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DimensionError, EmptyMaskError, MismatchError, ValidationError
from .volumes import DisplacementField, VoxelMask

#: Moments of a constant sample accumulate at most a few ulps of spread;
#: sample variance at or below this many eps of the RMS (squared) is treated
#: as exactly degenerate so skewness/kurtosis do not amplify roundoff.
_DEGENERATE_EPS_FACTOR = 16.0


@dataclass(frozen=True)
class JacobianStats:
    """Four moments of a scalar voxel sample.

    ``variance`` is the population (divide-by-n) second central moment;
    ``kurtosis`` is raw, so a normal sample gives 3.  A zero-variance sample
    reports skewness and kurtosis of 0 by convention.
    """

    mean: float
    variance: float
    skewness: float
    kurtosis: float

    def __post_init__(self):
        if self.variance < 0:
            raise ValidationError(f"variance must be >= 0, got {self.variance!r}")


def tumor_volume(mask: VoxelMask) -> float:
    """Occupied voxel count times the physical volume of one voxel, in mm^3."""
    sx, sy, sz = mask.spacing
    voxel_volume = sx * sy * sz
    return mask.count() * voxel_volume


def _require_differentiable(dims):
    if any(d < 2 for d in dims):
        raise DimensionError(f"finite differences need every dim >= 2, got {dims}")


def jacobian_field(field: DisplacementField) -> np.ndarray:
    """Per-voxel 3x3 Jacobian J = I + grad u, shape dims + (3, 3)."""
    _require_differentiable(field.dims)
    jac = kernels.displacement_gradient(field.vectors, field.spacing)
    for c in range(3):
        jac[..., c, c] += 1.0
    return jac


def jacobian_determinants(field: DisplacementField) -> np.ndarray:
    """det(I + grad u) at every voxel, via the selected kernel backend."""
    _require_differentiable(field.dims)
    vectors = np.ascontiguousarray(field.vectors)
    sx, sy, sz = field.spacing
    return np.asarray(kernels.jacobian_det_field(vectors, sx, sy, sz))


def moments(sample: np.ndarray) -> JacobianStats:
    """Mean, population variance, skewness m3/m2^1.5 and kurtosis m4/m2^2."""
    sample = np.asarray(sample, dtype=float).ravel()
    if sample.size == 0:
        raise EmptyMaskError("cannot take moments of an empty sample")
    mean = float(sample.mean())
    d = sample - mean
    m2 = float((d * d).mean())
    rms = float(np.sqrt((sample * sample).mean()))
    degenerate_tol = (_DEGENERATE_EPS_FACTOR * np.finfo(float).eps * rms) ** 2
    if m2 <= degenerate_tol:
        return JacobianStats(mean, max(m2, 0.0), 0.0, 0.0)
    m3 = float((d * d * d).mean())
    m4 = float((d * d * d * d).mean())
    return JacobianStats(mean, m2, m3 / m2**1.5, m4 / (m2 * m2))


def jacobian_stats(field: DisplacementField, mask: VoxelMask,
                   source: str = "determinant") -> JacobianStats:
    """Moment statistics of the deformation Jacobian over the masked region.

    ``source="determinant"`` (default) samples det(I + grad u) at each
    masked voxel.  ``source="gradient"`` samples the nine raw grad-u entries
    at each masked voxel instead.
    """
    if field.dims != mask.dims:
        raise MismatchError(f"field dims {field.dims} != mask dims {mask.dims}")
    if field.spacing != mask.spacing:
        raise MismatchError(f"field spacing {field.spacing} != mask spacing {mask.spacing}")
    if mask.count() == 0:
        raise EmptyMaskError("mask selects no voxels")
    _require_differentiable(field.dims)

    if source == "determinant":
        sample = jacobian_determinants(field)[mask.voxels]
    elif source == "gradient":
        grad = kernels.displacement_gradient(field.vectors, field.spacing)
        sample = grad[mask.voxels].ravel()
    else:
        raise ValidationError(f"unknown stats source: {source!r}")
    return moments(sample)
