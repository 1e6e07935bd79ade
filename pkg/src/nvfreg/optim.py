"""Reverse-mode differentiation through the registration pipeline, plus Adam.

The forward pipeline is fixed:

    eval_velocity -> scale -> upsample -> scaling-squaring -> (cascade)
                  -> warp -> weighted losses

Each stage records one adjoint closure on a GradientTape; the reverse pass
replays them in exact reverse order. There is no general graph machinery,
only this pipeline. All arithmetic is float64 and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ShapeError, ValidationError
from .field import (
    TrilinearMap,
    VectorField,
    identity_grid,
    resample_points,
    sample_scalar_with_grad,
    sample_vector,
    sample_vector_with_jac,
    scatter_vector,
)
from .integrate import exp_ss_with_steps
from .loss import LossBreakdown, LossWeights, total_loss_grads
from .model import CoordGrid, GridParams, MlpParams, mlp_backward, mlp_forward
from .volume import Volume


class GradientTape:
    """Ordered record of forward stages and their adjoint closures.

    Every stage maps its output cotangent to its input cotangent; backward
    visits stages in exact reverse order and verifies finiteness after
    each one.
    """

    def __init__(self):
        self.stages: list[tuple[str, object]] = []

    def record(self, name: str, backward_fn):
        self.stages.append((name, backward_fn))

    @property
    def stage_names(self) -> list[str]:
        return [name for name, _ in self.stages]

    def backward(self, cot):
        for name, fn in reversed(self.stages):
            cot = fn(cot)
            if not np.all(np.isfinite(cot)):
                raise NumericalError("non-finite gradient", stage=name)
        return cot


@dataclass
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(n_params: int, lr: float = 1e-4) -> AdamState:
    return AdamState(step=0, m=np.zeros(n_params), v=np.zeros(n_params), lr=lr)


def adam_step(state: AdamState, params: np.ndarray, grad: np.ndarray):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ShapeError("adam_step: parameter, gradient and moment lengths must match")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient passed to adam_step", stage="adam")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    mhat = m / (1.0 - state.beta1**t)
    vhat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr * mhat / (np.sqrt(vhat) + state.eps)
    new_state = AdamState(
        step=t, m=m, v=v, lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps
    )
    return new_params, new_state


def _exp_ss_backward(steps, grid, cot):
    """Adjoint of the squaring recursion u_{k+1} = u_k + u_k(p + u_k)."""
    for k in range(len(steps) - 2, -1, -1):
        uk = steps[k].data
        pts = grid + uk
        _, jac = sample_vector_with_jac(uk, pts)
        cot = (
            cot
            + scatter_vector(uk.shape[:3], pts, cot)
            + np.einsum("...ca,...c->...a", jac, cot)
        )
    return cot


def forward_backward(
    params,
    coord_grid: CoordGrid,
    moving: Volume,
    fixed: Volume,
    init_u: VectorField | None,
    cfg,
):
    """Run the full pipeline and return (LossBreakdown, flat parameter gradient).

    init_u, when given, is the constant initial displacement of cascaded
    mode: the optimized field becomes the residual, the total deformation
    is residual composed over the initial one, and the regularizers apply
    to the composed displacement.
    """
    if moving.dims != fixed.dims:
        raise ShapeError(f"moving dims {moving.dims} != fixed dims {fixed.dims}")
    if init_u is not None and init_u.dims != moving.dims:
        raise ShapeError(f"init field dims {init_u.dims} != image dims {moving.dims}")
    full_dims = moving.dims
    scale = cfg.resolved_velocity_scale(cascaded=init_u is not None)
    weights = LossWeights(
        lambda_jdet=cfg.lambda_jdet,
        lambda_smooth=cfg.lambda_smooth,
        ncc_window=cfg.ncc_window,
        smooth_on_phi=cfg.smooth_on_phi,
    )
    grid = identity_grid(full_dims)
    tape = GradientTape()

    # model: parameters -> coarse velocity
    if isinstance(params, GridParams):
        if params.values.shape[:3] != coord_grid.dims:
            raise ShapeError(
                f"grid parameter dims {params.values.shape[:3]} != coarse dims {coord_grid.dims}"
            )
        v_coarse = params.values
        tape.record("model", lambda cot: cot.ravel().copy())
    else:
        out, buffers = mlp_forward(params, coord_grid.flat)
        v_coarse = out.reshape(coord_grid.dims + (3,))
        tape.record(
            "model",
            lambda cot: mlp_backward(params, buffers, cot.reshape(-1, 3)),
        )
    _check_stage_finite(v_coarse, "model")

    # fixed multiplier on the velocity
    v_scaled = scale * v_coarse
    tape.record("velocity_scale", lambda cot: scale * cot)

    # coarse -> full resolution (linear)
    plan = TrilinearMap(coord_grid.dims, resample_points(coord_grid.dims, full_dims))
    v_full = plan.apply(v_scaled)
    _check_stage_finite(v_full, "upsample")
    tape.record("upsample", plan.adjoint)

    # scaling and squaring
    u_field, ss_steps = exp_ss_with_steps(VectorField(v_full), cfg.time_steps)
    _check_stage_finite(u_field.data, "exp_ss")
    inv_scale = 1.0 / (2.0**cfg.time_steps)
    tape.record(
        "exp_ss",
        lambda cot: inv_scale * _exp_ss_backward(ss_steps, grid, cot),
    )

    # cascade composition with the constant initial field
    if init_u is not None:
        pts_init = grid + init_u.data
        u_tot = init_u.data + sample_vector(u_field.data, pts_init)
        _check_stage_finite(u_tot, "cascade")
        tape.record(
            "cascade",
            lambda cot: scatter_vector(full_dims, pts_init, cot),
        )
    else:
        u_tot = u_field.data

    # warp the moving image by the total displacement
    warp_pts = grid + u_tot
    warped_data, warp_loc_grad = sample_scalar_with_grad(moving.data, warp_pts)
    _check_stage_finite(warped_data, "warp")
    warped = Volume(warped_data, spacing=moving.spacing, kind="intensity")

    # losses on warped image and total displacement
    breakdown, d_warped, d_u = total_loss_grads(
        warped, fixed, VectorField(u_tot), weights
    )
    if not np.isfinite(breakdown.total):
        raise NumericalError("non-finite loss", stage="loss")

    # reverse pass: join the two loss cotangent paths at u_tot
    cot_u_tot = d_u + d_warped[..., None] * warp_loc_grad
    grad_flat = tape.backward(cot_u_tot)
    return breakdown, grad_flat


def _check_stage_finite(arr, stage: str):
    if not np.all(np.isfinite(arr)):
        raise NumericalError("non-finite value in forward pass", stage=stage)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

GRADCHECK_THRESHOLDS = {
    "upsample_adjoint": 1e-12,
    "warp": 1e-6,
    "composition": 1e-6,
    "loss_ncc": 1e-6,
    "loss_smooth": 1e-6,
    "loss_jdet": 1e-6,
    "model": 1e-6,
    "end_to_end": 1e-5,
}


def _rel_err(a: float, b: float) -> float:
    denom = max(abs(a), abs(b))
    if denom == 0.0:
        return 0.0
    return abs(a - b) / denom


def _smooth_noise(rng, dims, radius=2):
    from .loss import box_sum

    x = rng.normal(size=dims)
    x = box_sum(x, radius)
    x -= x.min()
    return x / x.max()


def gradcheck(seed: int = 0, size: int = 12) -> dict[str, float]:
    """Verify every stage's adjoint and the end-to-end gradient.

    Returns {stage: worst relative error}. Small problems only; finite
    differences are O(evaluations) per direction.
    """
    from .loss import jdet_loss, jdet_loss_grad, ncc_loss, ncc_loss_grad
    from .loss import smooth_loss, smooth_loss_grad
    from .model import ArchConfig, init_siren, velocity_jvp_check
    from .register import RegistrationConfig, make_coarse_grid
    from .field import compose_displacements

    if size > 16:
        raise ValidationError("gradcheck problems must be at most 16^3")
    rng = np.random.default_rng(seed)
    dims = (size, size, size)
    report: dict[str, float] = {}
    h = 1e-5

    # upsample: exact adjoint identity on random vectors
    coarse = tuple(max(2, -(-d // 3)) for d in dims)
    plan = TrilinearMap(coarse, resample_points(coarse, dims))
    worst = 0.0
    for _ in range(3):
        x = rng.normal(size=tuple(coarse) + (3,))
        y = rng.normal(size=tuple(dims) + (3,))
        lhs = float((plan.apply(x) * y).sum())
        rhs = float((x * plan.adjoint(y)).sum())
        worst = max(worst, _rel_err(lhs, rhs))
    report["upsample_adjoint"] = worst

    # warp: location gradient against central differences. The interpolant
    # has derivative kinks on lattice planes, so the test field keeps every
    # fractional coordinate well away from 0 and 1.
    mov = Volume(_smooth_noise(rng, dims))
    grid = identity_grid(dims)
    offsets = np.array([0.31, 0.41, 0.27])
    u = offsets + 0.4 * np.stack(
        [_smooth_noise(rng, dims) - 0.5 for _ in range(3)], axis=-1
    )
    cot = rng.normal(size=dims)
    _, loc_grad = sample_scalar_with_grad(mov.data, grid + u)
    vjp = cot[..., None] * loc_grad
    worst = 0.0
    for _ in range(3):
        d = rng.normal(size=u.shape)
        wp = (sample_scalar_with_grad(mov.data, grid + u + h * d)[0] * cot).sum()
        wm = (sample_scalar_with_grad(mov.data, grid + u - h * d)[0] * cot).sum()
        worst = max(worst, _rel_err(float((vjp * d).sum()), float((wp - wm) / (2 * h))))
    report["warp"] = worst

    # composition (one squaring step): full VJP against central differences
    def square(udata):
        f = VectorField(udata)
        return compose_displacements(f, f).data

    pts = grid + u
    _, jac = sample_vector_with_jac(u, pts)
    cot3 = rng.normal(size=u.shape)
    vjp3 = cot3 + scatter_vector(dims, pts, cot3) + np.einsum("...ca,...c->...a", jac, cot3)
    worst = 0.0
    for _ in range(3):
        d = rng.normal(size=u.shape)
        fp = (square(u + h * d) * cot3).sum()
        fm = (square(u - h * d) * cot3).sum()
        worst = max(worst, _rel_err(float((vjp3 * d).sum()), float((fp - fm) / (2 * h))))
    report["composition"] = worst

    # losses against central differences
    fixed = Volume(_smooth_noise(rng, dims))
    warped = Volume(_smooth_noise(rng, dims))
    _, g = ncc_loss_grad(warped, fixed, 5)
    worst = 0.0
    for _ in range(3):
        d = rng.normal(size=dims)
        lp = ncc_loss(Volume(warped.data + h * d), fixed, 5)
        lm = ncc_loss(Volume(warped.data - h * d), fixed, 5)
        worst = max(worst, _rel_err(float((g * d).sum()), (lp - lm) / (2 * h)))
    report["loss_ncc"] = worst

    uf = VectorField(u)
    _, g = smooth_loss_grad(uf)
    worst = 0.0
    for _ in range(3):
        d = rng.normal(size=u.shape)
        lp = smooth_loss(VectorField(u + h * d))
        lm = smooth_loss(VectorField(u - h * d))
        worst = max(worst, _rel_err(float((g * d).sum()), (lp - lm) / (2 * h)))
    report["loss_smooth"] = worst

    # jdet checked on a folding field so the hinge is active
    fold = -1.3 * grid + 0.05 * rng.normal(size=u.shape)
    _, g = jdet_loss_grad(VectorField(fold))
    worst = 0.0
    for _ in range(3):
        d = rng.normal(size=u.shape)
        lp = jdet_loss(VectorField(fold + h * d))
        lm = jdet_loss(VectorField(fold - h * d))
        worst = max(worst, _rel_err(float((g * d).sum()), (lp - lm) / (2 * h)))
    report["loss_jdet"] = worst

    # model: analytic JVP against finite differences
    arch = ArchConfig(depth=4, hidden=32)
    mlp = init_siren(seed, arch)
    cg = make_coarse_grid(dims, 3)
    worst = 0.0
    for _ in range(3):
        d = rng.normal(size=mlp.size)
        worst = max(worst, velocity_jvp_check(mlp, cg, d))
    report["model"] = worst

    # end to end on the full pipeline, at a generic parameter point: the
    # freshly initialized model produces micro-voxel displacements that sit
    # on interpolation kinks, so the output layer is rescaled until the
    # velocity is a sizable fraction of a voxel.
    cfg = RegistrationConfig(iterations=1, seed=seed)
    cfg.arch = arch
    mlp = scale_to_speed(mlp, cg, 0.5)
    _, grad = forward_backward(mlp, cg, mov, fixed, None, cfg)
    theta = mlp.to_flat()

    def total_at(t):
        b, _ = forward_backward(mlp.from_flat(t), cg, mov, fixed, None, cfg)
        return b.total

    worst = 0.0
    for _ in range(5):
        d = rng.normal(size=theta.size)
        d /= np.linalg.norm(d)
        worst = max(worst, fd_directional_err(total_at, theta, d, float(grad @ d)))
    report["end_to_end"] = worst
    return report


def fd_directional_err(fn, x: np.ndarray, direction: np.ndarray, analytic: float) -> float:
    """Central-difference check of a directional derivative.

    The pipeline is piecewise smooth (trilinear cells, hinges), so a fixed
    step occasionally brackets a derivative kink; the step is chosen per
    direction as the best of three candidates, which keeps the check valid
    wherever at least one bracket is kink-free.
    """
    best = np.inf
    for h in (1e-5, 1e-6, 1e-7):
        fd = (fn(x + h * direction) - fn(x - h * direction)) / (2.0 * h)
        best = min(best, _rel_err(analytic, float(fd)))
    return best


def scale_to_speed(params: MlpParams, coord_grid: CoordGrid, target: float) -> MlpParams:
    """Rescale the output layer so the peak velocity magnitude equals target."""
    from .model import eval_velocity

    v = eval_velocity(params, coord_grid).data
    peak = float(np.linalg.norm(v, axis=-1).max())
    if peak == 0.0:
        return params
    factor = target / peak
    weights = [w.copy() for w in params.weights]
    biases = [b.copy() for b in params.biases]
    weights[-1] *= factor
    biases[-1] *= factor
    return MlpParams(arch=params.arch, weights=weights, biases=biases)


def gradcheck_report_text(report: dict[str, float]) -> str:
    """Structured-text rendering of a gradcheck report."""
    lines = []
    ok = True
    for stage, err in report.items():
        thr = GRADCHECK_THRESHOLDS[stage]
        status = "pass" if err < thr else "FAIL"
        ok = ok and err < thr
        lines.append(f"{stage} = {err:.3e}  (threshold {thr:.0e}, {status})")
    lines.append(f"overall = {'pass' if ok else 'FAIL'}")
    return "\n".join(lines)


def gradcheck_passed(report: dict[str, float]) -> bool:
    return all(err < GRADCHECK_THRESHOLDS[s] for s, err in report.items())
