"""Vector-field algebra: trilinear sampling, warping, composition, resampling,
and Jacobian computation.

Conventions, used everywhere in this package:
  * displacements u are in full-resolution voxel units; the deformation is
    phi(p) = p + u(p) with p in voxel coordinates,
  * out-of-bounds sample coordinates are clamped to the boundary
    (border-replicate), which makes every sampler total,
  * resampling follows the align-corners rule: destination index d maps to
    source coordinate d * (Dsrc - 1) / (Ddst - 1).

Besides the forward operations this module provides the gradient/adjoint
building blocks (sample-with-gradient, scatter, stencil transpose) that the
optimizer's reverse pass is assembled from.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DegenerateInputError, FormatError, ShapeError, ValidationError
from .volume import DTYPE_FLOAT32, Volume, _pack_header, _read_payload, read_header


@dataclass
class VectorField:
    """A 3D grid of 3-vectors in voxel units, indexed [x, y, z, component]."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[3] != 3:
            raise ValidationError(
                f"vector field data must have shape (X, Y, Z, 3), got {self.data.shape}"
            )
        if any(d < 1 for d in self.data.shape[:3]):
            raise ValidationError(f"vector field dims must be positive: {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise ValidationError(f"spacing must be strictly positive, got {self.spacing}")
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("vector field contains NaN or Inf")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]


def zero_field(dims, spacing=(1.0, 1.0, 1.0)) -> VectorField:
    return VectorField(np.zeros(tuple(dims) + (3,)), spacing=spacing)


@lru_cache(maxsize=8)
def _identity_grid_cached(dims: tuple[int, int, int]) -> np.ndarray:
    ax = [np.arange(d, dtype=np.float64) for d in dims]
    gx, gy, gz = np.meshgrid(*ax, indexing="ij")
    g = np.stack([gx, gy, gz], axis=-1)
    g.setflags(write=False)
    return g


def identity_grid(dims) -> np.ndarray:
    """Voxel-coordinate lattice of shape (X, Y, Z, 3). Read-only; do not mutate."""
    return _identity_grid_cached(tuple(int(d) for d in dims))


# ---------------------------------------------------------------------------
# trilinear sampling core
# ---------------------------------------------------------------------------

def _corner_setup(dims, pts):
    """Per-axis base index, fractional offset, and in-bounds mask for pts (..., 3).

    The base index i0 satisfies 0 <= i0 <= D-2 (or 0 when D == 1) so that the
    upper corner i0 + 1 is always valid. The mask is the derivative of the
    clamp: zero outside [0, D-1], one inside (including the endpoints).
    """
    i0s, fracs, masks = [], [], []
    for a in range(3):
        d = dims[a]
        q = pts[..., a]
        inb = (q >= 0.0) & (q <= d - 1.0)
        qc = np.clip(q, 0.0, float(d - 1))
        if d == 1:
            i0 = np.zeros(q.shape, dtype=np.intp)
            fr = np.zeros_like(qc)
        else:
            i0 = np.floor(qc).astype(np.intp)
            np.minimum(i0, d - 2, out=i0)
            fr = qc - i0
        i0s.append(i0)
        fracs.append(fr)
        masks.append(inb.astype(np.float64))
    return i0s, fracs, masks


def _corner_weights(fracs):
    """Weights per corner bit pattern: returns dict {(cx,cy,cz): w}."""
    fx, fy, fz = fracs
    wx = (1.0 - fx, fx)
    wy = (1.0 - fy, fy)
    wz = (1.0 - fz, fz)
    return wx, wy, wz


def _upper(i0, d):
    return i0 + 1 if d > 1 else i0


def sample_scalar(data: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of a (X, Y, Z) array at pts (..., 3), clamped."""
    dims = data.shape
    (ix0, iy0, iz0), fracs, _ = _corner_setup(dims, pts)
    wx, wy, wz = _corner_weights(fracs)
    ix = (ix0, _upper(ix0, dims[0]))
    iy = (iy0, _upper(iy0, dims[1]))
    iz = (iz0, _upper(iz0, dims[2]))
    out = np.zeros(pts.shape[:-1], dtype=np.float64)
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                w = wx[cx] * wy[cy] * wz[cz]
                out += w * data[ix[cx], iy[cy], iz[cz]]
    return out


def sample_scalar_with_grad(data: np.ndarray, pts: np.ndarray):
    """Sample and the derivative of the sample w.r.t. the point coordinates.

    Returns (values, grad) with grad shape (..., 3); clamped axes get zero
    derivative via the bounds mask.
    """
    dims = data.shape
    (ix0, iy0, iz0), fracs, masks = _corner_setup(dims, pts)
    wx, wy, wz = _corner_weights(fracs)
    ix = (ix0, _upper(ix0, dims[0]))
    iy = (iy0, _upper(iy0, dims[1]))
    iz = (iz0, _upper(iz0, dims[2]))
    sgn = (-1.0, 1.0)
    out = np.zeros(pts.shape[:-1], dtype=np.float64)
    grad = np.zeros(pts.shape[:-1] + (3,), dtype=np.float64)
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                v = data[ix[cx], iy[cy], iz[cz]]
                out += wx[cx] * wy[cy] * wz[cz] * v
                grad[..., 0] += sgn[cx] * wy[cy] * wz[cz] * v
                grad[..., 1] += wx[cx] * sgn[cy] * wz[cz] * v
                grad[..., 2] += wx[cx] * wy[cy] * sgn[cz] * v
    for a in range(3):
        grad[..., a] *= masks[a]
    return out, grad


def sample_vector(fdata: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of a (X, Y, Z, 3) field at pts (..., 3)."""
    dims = fdata.shape[:3]
    (ix0, iy0, iz0), fracs, _ = _corner_setup(dims, pts)
    wx, wy, wz = _corner_weights(fracs)
    ix = (ix0, _upper(ix0, dims[0]))
    iy = (iy0, _upper(iy0, dims[1]))
    iz = (iz0, _upper(iz0, dims[2]))
    out = np.zeros(pts.shape[:-1] + (3,), dtype=np.float64)
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                w = (wx[cx] * wy[cy] * wz[cz])[..., None]
                out += w * fdata[ix[cx], iy[cy], iz[cz]]
    return out


def sample_vector_with_jac(fdata: np.ndarray, pts: np.ndarray):
    """Sample a vector field and its Jacobian w.r.t. the point coordinates.

    Returns (values (..., 3), jac (..., 3, 3)) where jac[..., c, a] is the
    derivative of sampled component c along point axis a.
    """
    dims = fdata.shape[:3]
    (ix0, iy0, iz0), fracs, masks = _corner_setup(dims, pts)
    wx, wy, wz = _corner_weights(fracs)
    ix = (ix0, _upper(ix0, dims[0]))
    iy = (iy0, _upper(iy0, dims[1]))
    iz = (iz0, _upper(iz0, dims[2]))
    sgn = (-1.0, 1.0)
    out = np.zeros(pts.shape[:-1] + (3,), dtype=np.float64)
    jac = np.zeros(pts.shape[:-1] + (3, 3), dtype=np.float64)
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                v = fdata[ix[cx], iy[cy], iz[cz]]
                out += (wx[cx] * wy[cy] * wz[cz])[..., None] * v
                jac[..., :, 0] += (sgn[cx] * wy[cy] * wz[cz])[..., None] * v
                jac[..., :, 1] += (wx[cx] * sgn[cy] * wz[cz])[..., None] * v
                jac[..., :, 2] += (wx[cx] * wy[cy] * sgn[cz])[..., None] * v
    for a in range(3):
        jac[..., :, a] *= masks[a][..., None]
    return out, jac


def _flat_corner_index(ix, iy, iz, dims):
    return (ix * dims[1] + iy) * dims[2] + iz


def scatter_scalar(dims, pts: np.ndarray, cot: np.ndarray) -> np.ndarray:
    """Adjoint of sample_scalar w.r.t. the source array.

    Accumulates cot (..., matching pts) into a zero (X, Y, Z) array through
    the same clamped trilinear weights. Deterministic (bincount reduction).
    """
    (ix0, iy0, iz0), fracs, _ = _corner_setup(dims, pts)
    wx, wy, wz = _corner_weights(fracs)
    ix = (ix0, _upper(ix0, dims[0]))
    iy = (iy0, _upper(iy0, dims[1]))
    iz = (iz0, _upper(iz0, dims[2]))
    n = dims[0] * dims[1] * dims[2]
    acc = np.zeros(n, dtype=np.float64)
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                idx = _flat_corner_index(ix[cx], iy[cy], iz[cz], dims).ravel()
                w = (wx[cx] * wy[cy] * wz[cz] * cot).ravel()
                acc += np.bincount(idx, weights=w, minlength=n)
    return acc.reshape(dims)


def scatter_vector(dims, pts: np.ndarray, cot: np.ndarray) -> np.ndarray:
    """Adjoint of sample_vector w.r.t. the source field; cot has shape (..., 3)."""
    (ix0, iy0, iz0), fracs, _ = _corner_setup(dims, pts)
    wx, wy, wz = _corner_weights(fracs)
    ix = (ix0, _upper(ix0, dims[0]))
    iy = (iy0, _upper(iy0, dims[1]))
    iz = (iz0, _upper(iz0, dims[2]))
    n = dims[0] * dims[1] * dims[2]
    acc = np.zeros((n, 3), dtype=np.float64)
    for cx in (0, 1):
        for cy in (0, 1):
            for cz in (0, 1):
                idx = _flat_corner_index(ix[cx], iy[cy], iz[cz], dims).ravel()
                w = wx[cx] * wy[cy] * wz[cz]
                for c in range(3):
                    acc[:, c] += np.bincount(
                        idx, weights=(w * cot[..., c]).ravel(), minlength=n
                    )
    return acc.reshape(tuple(dims) + (3,))


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def sample_trilinear_scalar(v: Volume, q) -> float | np.ndarray:
    """Trilinear sample of an intensity volume at continuous voxel coords q.

    q may be a single (3,) point or an (..., 3) array; out-of-bounds
    coordinates are clamped (border-replicate).
    """
    if v.kind != "intensity":
        raise ValidationError("trilinear sampling requires an intensity volume")
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    out = sample_scalar(v.data, q[None, :] if single else q)
    return float(out[0]) if single else out


def warp_volume(v: Volume, u: VectorField) -> Volume:
    """Warp a volume by displacement u: output(p) = v(p + u(p)).

    Intensity volumes are sampled trilinearly; label volumes use
    nearest-neighbor sampling.
    """
    if v.dims != u.dims:
        raise ShapeError(f"volume dims {v.dims} do not match field dims {u.dims}")
    pts = identity_grid(v.dims) + u.data
    if v.kind == "intensity":
        return Volume(sample_scalar(v.data, pts), spacing=v.spacing, kind="intensity")
    idx = []
    for a in range(3):
        ia = np.rint(np.clip(pts[..., a], 0.0, v.dims[a] - 1.0)).astype(np.intp)
        idx.append(ia)
    return Volume(v.data[idx[0], idx[1], idx[2]], spacing=v.spacing, kind="label")


def compose_displacements(u_outer: VectorField, u_inner: VectorField) -> VectorField:
    """Displacement of phi_outer o phi_inner.

    result(p) = u_inner(p) + u_outer(p + u_inner(p)), sampled trilinearly.
    """
    if u_outer.dims != u_inner.dims:
        raise ShapeError(f"field dims mismatch: {u_outer.dims} vs {u_inner.dims}")
    pts = identity_grid(u_inner.dims) + u_inner.data
    data = u_inner.data + sample_vector(u_outer.data, pts)
    return VectorField(data, spacing=u_inner.spacing)


def resample_points(src_dims, dst_dims) -> np.ndarray:
    """Align-corners source coordinates for every destination lattice point."""
    coords = []
    for a in range(3):
        dd, sd = dst_dims[a], src_dims[a]
        d = np.arange(dd, dtype=np.float64)
        coords.append(d * ((sd - 1) / (dd - 1)) if dd > 1 else np.zeros(1))
    gx, gy, gz = np.meshgrid(*coords, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def resample_field(u: VectorField, new_dims) -> VectorField:
    """Component-wise trilinear resampling to new_dims (align-corners).

    Vector values are voxel-unit displacements at full resolution and are
    not rescaled.
    """
    new_dims = tuple(int(d) for d in new_dims)
    if any(d < 1 for d in new_dims):
        raise ValidationError(f"target dims must be positive, got {new_dims}")
    pts = resample_points(u.dims, new_dims)
    return VectorField(sample_vector(u.data, pts), spacing=u.spacing)


class TrilinearMap:
    """Sampling at a fixed set of points as a linear operator with an adjoint.

    Used for the coarse-to-full velocity upsampling, where the sample
    locations never change between iterations.
    """

    def __init__(self, src_dims, pts: np.ndarray):
        self.src_dims = tuple(int(d) for d in src_dims)
        self.pts = pts

    def apply(self, fdata: np.ndarray) -> np.ndarray:
        return sample_vector(fdata, self.pts)

    def adjoint(self, cot: np.ndarray) -> np.ndarray:
        return scatter_vector(self.src_dims, self.pts, cot)


# ---------------------------------------------------------------------------
# finite-difference stencils and Jacobians
# ---------------------------------------------------------------------------

def grad_axis(f: np.ndarray, axis: int) -> np.ndarray:
    """Derivative along one axis: central differences inside, one-sided at faces."""
    d = f.shape[axis]
    if d < 2:
        raise DegenerateInputError(f"axis {axis} has length {d}; need at least 2")
    g = np.empty_like(f)
    fm = np.moveaxis(f, axis, 0)
    gm = np.moveaxis(g, axis, 0)
    gm[1:-1] = 0.5 * (fm[2:] - fm[:-2])
    gm[0] = fm[1] - fm[0]
    gm[-1] = fm[-1] - fm[-2]
    return g


def grad_axis_adjoint(g: np.ndarray, axis: int) -> np.ndarray:
    """Transpose of grad_axis as a linear operator."""
    d = g.shape[axis]
    if d < 2:
        raise DegenerateInputError(f"axis {axis} has length {d}; need at least 2")
    z = np.zeros_like(g)
    gm = np.moveaxis(g, axis, 0)
    zm = np.moveaxis(z, axis, 0)
    zm[2:] += 0.5 * gm[1:-1]
    zm[:-2] -= 0.5 * gm[1:-1]
    zm[1] += gm[0]
    zm[0] -= gm[0]
    zm[-1] += gm[-1]
    zm[-2] -= gm[-1]
    return z


def displacement_gradient(udata: np.ndarray) -> np.ndarray:
    """All nine partials of a displacement: out[..., i, j] = d u_i / d x_j."""
    dims = udata.shape[:3]
    out = np.empty(tuple(dims) + (3, 3), dtype=np.float64)
    for i in range(3):
        for j in range(3):
            out[..., i, j] = grad_axis(udata[..., i], j)
    return out


def det3(j: np.ndarray) -> np.ndarray:
    """Determinant of (..., 3, 3) matrices via cofactor expansion."""
    return (
        j[..., 0, 0] * (j[..., 1, 1] * j[..., 2, 2] - j[..., 1, 2] * j[..., 2, 1])
        - j[..., 0, 1] * (j[..., 1, 0] * j[..., 2, 2] - j[..., 1, 2] * j[..., 2, 0])
        + j[..., 0, 2] * (j[..., 1, 0] * j[..., 2, 1] - j[..., 1, 1] * j[..., 2, 0])
    )


def cofactor3(j: np.ndarray) -> np.ndarray:
    """Cofactor matrix C with C[..., i, k] = d det / d J[..., i, k]."""
    c = np.empty_like(j)
    c[..., 0, 0] = j[..., 1, 1] * j[..., 2, 2] - j[..., 1, 2] * j[..., 2, 1]
    c[..., 0, 1] = -(j[..., 1, 0] * j[..., 2, 2] - j[..., 1, 2] * j[..., 2, 0])
    c[..., 0, 2] = j[..., 1, 0] * j[..., 2, 1] - j[..., 1, 1] * j[..., 2, 0]
    c[..., 1, 0] = -(j[..., 0, 1] * j[..., 2, 2] - j[..., 0, 2] * j[..., 2, 1])
    c[..., 1, 1] = j[..., 0, 0] * j[..., 2, 2] - j[..., 0, 2] * j[..., 2, 0]
    c[..., 1, 2] = -(j[..., 0, 0] * j[..., 2, 1] - j[..., 0, 1] * j[..., 2, 0])
    c[..., 2, 0] = j[..., 0, 1] * j[..., 1, 2] - j[..., 0, 2] * j[..., 1, 1]
    c[..., 2, 1] = -(j[..., 0, 0] * j[..., 1, 2] - j[..., 0, 2] * j[..., 1, 0])
    c[..., 2, 2] = j[..., 0, 0] * j[..., 1, 1] - j[..., 0, 1] * j[..., 1, 0]
    return c


@dataclass
class JacobianVolume:
    """Per-voxel deformation Jacobian J_phi = I + grad(u) and its determinant."""

    matrices: np.ndarray  # (X, Y, Z, 3, 3)
    determinants: np.ndarray  # (X, Y, Z)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.determinants.shape


def jacobian(u: VectorField) -> JacobianVolume:
    """Deformation Jacobian of phi(p) = p + u(p) from finite differences."""
    if any(d < 2 for d in u.dims):
        raise DegenerateInputError(f"jacobian needs dims >= 2 on every axis, got {u.dims}")
    j = displacement_gradient(u.data)
    for i in range(3):
        j[..., i, i] += 1.0
    return JacobianVolume(matrices=j, determinants=det3(j))


def load_field(path) -> VectorField:
    """Load a 3-channel NVF1 file as a VectorField."""
    with open(path, "rb") as f:
        raw = f.read()
    dtype_code, channels, dims, spacing = read_header(raw)
    if channels != 3:
        raise FormatError(f"expected a 3-channel field, file has {channels} channels")
    if dtype_code != DTYPE_FLOAT32:
        raise FormatError("vector fields must have dtype float32")
    data = _read_payload(raw, dims, 3, np.dtype("<f4"))
    return VectorField(data.astype(np.float64), spacing=spacing)


def save_field(u: VectorField, path) -> None:
    """Write a VectorField as a 3-channel float32 NVF1 file."""
    header = _pack_header(DTYPE_FLOAT32, 3, u.dims, u.spacing)
    payload = u.data.astype("<f4").transpose(3, 0, 1, 2)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes(order="F"))
