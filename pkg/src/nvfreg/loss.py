"""Similarity and regularization losses with analytic gradients.

Similarity is windowed squared normalized cross-correlation (negated and
averaged over voxels); regularizers are a hinge on negative Jacobian
determinants and a squared-gradient smoothness term. Window sums run over
clamped (border-replicate) windows of fixed size n^3, computed separably
with shifted adds so the adjoint is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ShapeError, ValidationError
from .field import (
    VectorField,
    cofactor3,
    det3,
    displacement_gradient,
    grad_axis_adjoint,
)
from .volume import Volume

NCC_EPS = 1e-9


@dataclass
class LossWeights:
    lambda_jdet: float = 100.0
    lambda_smooth: float = 0.1
    ncc_window: int = 9
    smooth_on_phi: bool = False  # penalize grad(phi) literally instead of grad(u)

    def validate(self):
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ConfigurationError("ncc_window must be odd and >= 3")
        for name in ("lambda_jdet", "lambda_smooth"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigurationError(f"{name} must be finite and nonnegative")


@dataclass
class LossBreakdown:
    sim: float
    jdet: float
    smooth: float
    total: float


# ---------------------------------------------------------------------------
# clamped box sums (separable, with exact adjoint)
# ---------------------------------------------------------------------------

def _shift_clamped(x: np.ndarray, k: int, axis: int) -> np.ndarray:
    """y[i] = x[clip(i + k, 0, D-1)] along one axis."""
    d = x.shape[axis]
    idx = np.clip(np.arange(d) + k, 0, d - 1)
    return np.take(x, idx, axis=axis)


def _shift_clamped_adjoint(g: np.ndarray, k: int, axis: int) -> np.ndarray:
    """Transpose of _shift_clamped: scatter g back through the clamped map."""
    d = g.shape[axis]
    z = np.zeros_like(g)
    gm = np.moveaxis(g, axis, 0)
    zm = np.moveaxis(z, axis, 0)
    if k == 0:
        zm[:] = gm
    elif k > 0:
        if k <= d - 2:
            zm[k : d - 1] = gm[: d - 1 - k]
        zm[d - 1] = gm[max(d - 1 - k, 0) :].sum(axis=0)
    else:
        kk = -k
        if kk <= d - 2:
            zm[1 : d - kk] = gm[kk + 1 :]
        zm[0] = gm[: min(kk + 1, d)].sum(axis=0)
    return z


def box_sum(x: np.ndarray, radius: int) -> np.ndarray:
    """Sum over the clamped (2r+1)^3 window centered at each voxel."""
    out = x
    for axis in range(3):
        acc = np.zeros_like(out)
        for k in range(-radius, radius + 1):
            acc += _shift_clamped(out, k, axis)
        out = acc
    return out


def box_sum_adjoint(g: np.ndarray, radius: int) -> np.ndarray:
    """Transpose of box_sum (axes applied in reverse order)."""
    out = g
    for axis in (2, 1, 0):
        acc = np.zeros_like(out)
        for k in range(-radius, radius + 1):
            acc += _shift_clamped_adjoint(out, k, axis)
        out = acc
    return out


# ---------------------------------------------------------------------------
# NCC
# ---------------------------------------------------------------------------

def _check_pair(warped: Volume, fixed: Volume):
    if warped.kind != "intensity" or fixed.kind != "intensity":
        raise ValidationError("NCC requires intensity volumes")
    if warped.dims != fixed.dims:
        raise ShapeError(f"volume dims mismatch: {warped.dims} vs {fixed.dims}")


def _ncc_fields(w: np.ndarray, f: np.ndarray, window: int):
    r = window // 2
    m = float(window**3)
    sw = box_sum(w, r)
    sf = box_sum(f, r)
    sww = box_sum(w * w, r)
    sff = box_sum(f * f, r)
    swf = box_sum(w * f, r)
    mw = sw / m
    mf = sf / m
    cross = swf - sw * mf
    varw = sww - sw * mw
    varf = sff - sf * mf
    den = varw * varf + NCC_EPS
    cc = cross * cross / den
    return cc, cross, varw, varf, den, mw, mf


def ncc_loss(warped: Volume, fixed: Volume, window: int = 9) -> float:
    """Negative mean of per-voxel squared windowed correlation."""
    if window < 3 or window % 2 == 0:
        raise ConfigurationError("window must be odd and >= 3")
    _check_pair(warped, fixed)
    cc, *_ = _ncc_fields(warped.data, fixed.data, window)
    return float(-cc.mean())


def ncc_loss_grad(warped: Volume, fixed: Volume, window: int = 9):
    """(loss, d loss / d warped.data)."""
    if window < 3 or window % 2 == 0:
        raise ConfigurationError("window must be odd and >= 3")
    _check_pair(warped, fixed)
    w = warped.data
    f = fixed.data
    cc, cross, varw, varf, den, mw, mf = _ncc_fields(w, f, window)
    n = w.size
    r = window // 2
    a = 2.0 * cross / den
    b = 2.0 * cc * varf / den
    grad = (
        f * box_sum_adjoint(a, r)
        - box_sum_adjoint(a * mf, r)
        - w * box_sum_adjoint(b, r)
        + box_sum_adjoint(b * mw, r)
    ) * (-1.0 / n)
    return float(-cc.mean()), grad


# ---------------------------------------------------------------------------
# Jacobian-orientation hinge
# ---------------------------------------------------------------------------

def _phi_jacobian(u: VectorField) -> np.ndarray:
    j = displacement_gradient(u.data)
    for i in range(3):
        j[..., i, i] += 1.0
    return j


def jdet_loss(u: VectorField) -> float:
    """Mean hinge on negative deformation-Jacobian determinants."""
    det = det3(_phi_jacobian(u))
    return float(np.maximum(0.0, -det).mean())


def jdet_loss_grad(u: VectorField):
    """(loss, d loss / d u.data); zero wherever every determinant is positive."""
    j = _phi_jacobian(u)
    det = det3(j)
    n = det.size
    loss = float(np.maximum(0.0, -det).mean())
    active = det < 0.0
    if not active.any():
        return loss, np.zeros_like(u.data)
    dj = (-(1.0 / n) * active.astype(np.float64))[..., None, None] * cofactor3(j)
    grad = np.zeros_like(u.data)
    for i in range(3):
        for ax in range(3):
            grad[..., i] += grad_axis_adjoint(dj[..., i, ax], ax)
    return loss, grad


# ---------------------------------------------------------------------------
# smoothness
# ---------------------------------------------------------------------------

def smooth_loss(u: VectorField, on_phi: bool = False) -> float:
    """Mean squared Frobenius norm of the displacement gradient.

    With on_phi the penalty applies to grad(phi) = I + grad(u) instead,
    which is nonzero at the identity.
    """
    g = displacement_gradient(u.data)
    if on_phi:
        for i in range(3):
            g[..., i, i] += 1.0
    n = u.data.shape[0] * u.data.shape[1] * u.data.shape[2]
    return float((g * g).sum() / n)


def smooth_loss_grad(u: VectorField, on_phi: bool = False):
    """(loss, d loss / d u.data)."""
    g = displacement_gradient(u.data)
    if on_phi:
        for i in range(3):
            g[..., i, i] += 1.0
    n = u.data.shape[0] * u.data.shape[1] * u.data.shape[2]
    loss = float((g * g).sum() / n)
    dg = (2.0 / n) * g
    grad = np.zeros_like(u.data)
    for i in range(3):
        for ax in range(3):
            grad[..., i] += grad_axis_adjoint(dg[..., i, ax], ax)
    return loss, grad


# ---------------------------------------------------------------------------
# weighted total
# ---------------------------------------------------------------------------

def total_loss(warped: Volume, fixed: Volume, u: VectorField,
               weights: LossWeights | None = None) -> LossBreakdown:
    """sim + lambda_jdet * jdet + lambda_smooth * smooth."""
    weights = weights or LossWeights()
    weights.validate()
    if warped.dims != u.dims:
        raise ShapeError(f"warped dims {warped.dims} do not match field dims {u.dims}")
    sim = ncc_loss(warped, fixed, weights.ncc_window)
    jd = jdet_loss(u)
    sm = smooth_loss(u, on_phi=weights.smooth_on_phi)
    total = sim + weights.lambda_jdet * jd + weights.lambda_smooth * sm
    return LossBreakdown(sim=sim, jdet=jd, smooth=sm, total=total)


def total_loss_grads(warped: Volume, fixed: Volume, u: VectorField,
                     weights: LossWeights):
    """(breakdown, d total / d warped.data, d total / d u.data)."""
    weights.validate()
    if warped.dims != u.dims:
        raise ShapeError(f"warped dims {warped.dims} do not match field dims {u.dims}")
    sim, dsim_dw = ncc_loss_grad(warped, fixed, weights.ncc_window)
    jd, djd_du = jdet_loss_grad(u)
    sm, dsm_du = smooth_loss_grad(u, on_phi=weights.smooth_on_phi)
    total = sim + weights.lambda_jdet * jd + weights.lambda_smooth * sm
    breakdown = LossBreakdown(sim=sim, jdet=jd, smooth=sm, total=total)
    du = weights.lambda_jdet * djd_du + weights.lambda_smooth * dsm_du
    return breakdown, dsim_dw, du
