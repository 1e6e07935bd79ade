"""Registration runs: configuration, coarse grid, optimization loop, outputs.

A run owns its model parameters and optimizer state exclusively; the
per-iteration loop is forward_backward followed by one Adam step. The
returned displacement always corresponds to the final parameters (one
extra forward pass after the last update).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from .errors import ConfigurationError, NumericalError, ShapeError, ValidationError
from .field import (
    VectorField,
    TrilinearMap,
    identity_grid,
    resample_points,
    sample_scalar,
    sample_vector,
)
from .integrate import exp_ss, IntegrationConfig
from .loss import LossBreakdown, LossWeights, total_loss
from .model import ArchConfig, CoordGrid, GridParams, MlpParams, eval_velocity, init_grid, init_siren
from .optim import adam_step, forward_backward, init_adam
from .volume import Volume

log = logging.getLogger(__name__)

STANDALONE_VELOCITY_SCALE = 1.0
CASCADED_VELOCITY_SCALE = 0.1


@dataclass
class RegistrationConfig:
    """Every tunable of a registration run."""

    iterations: int = 300
    lr: float = 1e-4
    lambda_jdet: float = 100.0
    lambda_smooth: float = 0.1
    ncc_window: int = 9
    time_steps: int = 7
    downsample_factor: int = 3
    velocity_scale: float | None = None  # resolved by mode when unset
    seed: int = 0
    log_every: int = 25
    smooth_on_phi: bool = False
    arch: ArchConfig = dc_field(default_factory=ArchConfig)

    def validate(self):
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if not (self.lr > 0):
            raise ConfigurationError("lr must be positive")
        for name in ("lambda_jdet", "lambda_smooth"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if self.ncc_window < 3 or self.ncc_window % 2 == 0:
            raise ConfigurationError("ncc_window must be odd and >= 3")
        if self.time_steps < 1:
            raise ConfigurationError("time_steps must be >= 1")
        if self.downsample_factor < 1:
            raise ConfigurationError("downsample_factor must be >= 1")
        if self.velocity_scale is not None and not (self.velocity_scale > 0):
            raise ConfigurationError("velocity_scale must be positive")
        if self.log_every < 1:
            raise ConfigurationError("log_every must be >= 1")
        self.arch.validate()

    def resolved_velocity_scale(self, cascaded: bool) -> float:
        if self.velocity_scale is not None:
            return self.velocity_scale
        return CASCADED_VELOCITY_SCALE if cascaded else STANDALONE_VELOCITY_SCALE

    def resolve(self, cascaded: bool) -> "RegistrationConfig":
        """Copy with velocity_scale pinned to its effective value."""
        return replace(self, velocity_scale=self.resolved_velocity_scale(cascaded))


@dataclass
class RegistrationResult:
    displacement: VectorField
    trace: list[LossBreakdown]
    trace_seconds: list[float]
    wall_time_s: float
    iterations: int
    params: MlpParams | GridParams
    final_loss: LossBreakdown
    config: RegistrationConfig


def make_coarse_grid(dims, factor: int) -> CoordGrid:
    """Coarse lattice for the velocity model.

    Coarse dims are ceil(D / factor) with a floor of 2; lattice point k
    maps to full-resolution position k * (D-1) / (Dc-1) (align-corners)
    and is then normalized per axis from [0, D-1] to [-1, 1].
    """
    dims = tuple(int(d) for d in dims)
    factor = int(factor)
    if factor < 1:
        raise ConfigurationError("downsample factor must be >= 1")
    if any(d < 2 for d in dims):
        raise ConfigurationError(f"cannot build a coarse grid over dims {dims}: axis < 2")
    coarse = tuple(max(2, math.ceil(d / factor)) for d in dims)
    axes = []
    for a in range(3):
        k = np.arange(coarse[a], dtype=np.float64)
        pos = k * ((dims[a] - 1) / (coarse[a] - 1))
        axes.append(2.0 * pos / (dims[a] - 1) - 1.0)
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return CoordGrid(coords=np.stack([gx, gy, gz], axis=-1), full_dims=dims)


def init_params(cfg: RegistrationConfig, coord_grid: CoordGrid):
    """Fresh model parameters: seeded sinusoidal init or an all-zero grid."""
    if cfg.arch.representation == "grid":
        return init_grid(coord_grid.dims)
    return init_siren(cfg.seed, cfg.arch)


def predict_displacement(
    params,
    coord_grid: CoordGrid,
    full_dims,
    cfg: RegistrationConfig,
    init_u: VectorField | None = None,
) -> VectorField:
    """Forward pipeline only: parameters -> total displacement field."""
    scale = cfg.resolved_velocity_scale(cascaded=init_u is not None)
    v_coarse = eval_velocity(params, coord_grid)
    plan = TrilinearMap(coord_grid.dims, resample_points(coord_grid.dims, full_dims))
    v_full = VectorField(plan.apply(scale * v_coarse.data))
    u = exp_ss(v_full, IntegrationConfig(time_steps=cfg.time_steps))
    if init_u is None:
        return u
    pts = identity_grid(full_dims) + init_u.data
    return VectorField(init_u.data + sample_vector(u.data, pts), spacing=init_u.spacing)


def register_pair(
    moving: Volume,
    fixed: Volume,
    cfg: RegistrationConfig | None = None,
    init_u: VectorField | None = None,
) -> RegistrationResult:
    """Optimize the velocity model for one image pair.

    With init_u the run is cascaded: the model learns a residual whose
    deformation is composed over the constant initial displacement.
    """
    cfg = cfg or RegistrationConfig()
    cfg.validate()
    if moving.kind != "intensity" or fixed.kind != "intensity":
        raise ValidationError("register_pair requires intensity volumes")
    if moving.dims != fixed.dims:
        raise ShapeError(f"moving dims {moving.dims} != fixed dims {fixed.dims}")
    if init_u is not None and init_u.dims != moving.dims:
        raise ShapeError(f"init field dims {init_u.dims} != image dims {moving.dims}")

    resolved = cfg.resolve(cascaded=init_u is not None)
    coord_grid = make_coarse_grid(moving.dims, resolved.downsample_factor)
    template = init_params(resolved, coord_grid)
    flat = template.to_flat()
    adam = init_adam(flat.size, resolved.lr)

    trace: list[LossBreakdown] = []
    trace_seconds: list[float] = []
    t0 = time.perf_counter()
    for it in range(resolved.iterations):
        params = template.from_flat(flat)
        try:
            breakdown, grad = forward_backward(
                params, coord_grid, moving, fixed, init_u, resolved
            )
            flat, adam = adam_step(adam, flat, grad)
        except NumericalError as exc:
            raise NumericalError(str(exc), iteration=it) from exc
        trace.append(breakdown)
        trace_seconds.append(time.perf_counter() - t0)
        if (it + 1) % resolved.log_every == 0 or it == 0:
            log.info(
                "iter %d/%d total=%.6f sim=%.6f jdet=%.3e smooth=%.5f",
                it + 1, resolved.iterations, breakdown.total,
                breakdown.sim, breakdown.jdet, breakdown.smooth,
            )

    final_params = template.from_flat(flat)
    displacement = predict_displacement(
        final_params, coord_grid, moving.dims, resolved, init_u
    )
    displacement = VectorField(displacement.data, spacing=moving.spacing)
    warped = _warp_intensity(moving, displacement)
    weights = LossWeights(
        lambda_jdet=resolved.lambda_jdet,
        lambda_smooth=resolved.lambda_smooth,
        ncc_window=resolved.ncc_window,
        smooth_on_phi=resolved.smooth_on_phi,
    )
    final_loss = total_loss(warped, fixed, displacement, weights)
    return RegistrationResult(
        displacement=displacement,
        trace=trace,
        trace_seconds=trace_seconds,
        wall_time_s=time.perf_counter() - t0,
        iterations=resolved.iterations,
        params=final_params,
        final_loss=final_loss,
        config=resolved,
    )


def _warp_intensity(v: Volume, u: VectorField) -> Volume:
    pts = identity_grid(v.dims) + u.data
    return Volume(sample_scalar(v.data, pts), spacing=v.spacing, kind="intensity")


# ---------------------------------------------------------------------------
# configuration files: "key = value" lines with an [arch] section
# ---------------------------------------------------------------------------

_TOP_INT = {"iterations", "ncc_window", "time_steps", "downsample_factor", "seed", "log_every"}
_TOP_FLOAT = {"lr", "lambda_jdet", "lambda_smooth", "velocity_scale"}
_TOP_BOOL = {"smooth_on_phi"}
_ARCH_INT = {"depth", "hidden", "pe_octaves"}
_ARCH_FLOAT = {"omega0"}
_ARCH_STR = {"activation", "representation"}


def _parse_bool(key: str, raw: str) -> bool:
    low = raw.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigurationError(f"key {key!r}: expected a boolean, got {raw!r}")


def _parse_scalar(key: str, raw: str, caster, kind: str):
    try:
        return caster(raw)
    except ValueError:
        raise ConfigurationError(f"key {key!r}: expected {kind}, got {raw!r}") from None


def parse_config(text: str) -> RegistrationConfig:
    """Parse configuration text; unknown keys are rejected by name."""
    cfg = RegistrationConfig()
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            if section != "arch":
                raise ConfigurationError(f"unknown section [{section}] at line {lineno}")
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if section == "arch":
            if key in _ARCH_INT:
                setattr(cfg.arch, key, _parse_scalar(f"arch.{key}", raw, int, "an integer"))
            elif key in _ARCH_FLOAT:
                setattr(cfg.arch, key, _parse_scalar(f"arch.{key}", raw, float, "a number"))
            elif key in _ARCH_STR:
                setattr(cfg.arch, key, raw)
            else:
                raise ConfigurationError(f"unknown key 'arch.{key}'")
        elif key in _TOP_INT:
            setattr(cfg, key, _parse_scalar(key, raw, int, "an integer"))
        elif key in _TOP_FLOAT:
            setattr(cfg, key, _parse_scalar(key, raw, float, "a number"))
        elif key in _TOP_BOOL:
            setattr(cfg, key, _parse_bool(key, raw))
        else:
            raise ConfigurationError(f"unknown key {key!r}")
    cfg.validate()
    return cfg


def load_config(path) -> RegistrationConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())


def dump_config(cfg: RegistrationConfig) -> str:
    """Configuration text that parse_config maps back to an identical config."""
    lines = [
        f"iterations = {cfg.iterations}",
        f"lr = {cfg.lr!r}",
        f"lambda_jdet = {cfg.lambda_jdet!r}",
        f"lambda_smooth = {cfg.lambda_smooth!r}",
        f"ncc_window = {cfg.ncc_window}",
        f"time_steps = {cfg.time_steps}",
        f"downsample_factor = {cfg.downsample_factor}",
    ]
    if cfg.velocity_scale is not None:
        lines.append(f"velocity_scale = {cfg.velocity_scale!r}")
    lines += [
        f"seed = {cfg.seed}",
        f"log_every = {cfg.log_every}",
        f"smooth_on_phi = {'true' if cfg.smooth_on_phi else 'false'}",
        "",
        "[arch]",
        f"depth = {cfg.arch.depth}",
        f"hidden = {cfg.arch.hidden}",
        f"activation = {cfg.arch.activation}",
        f"omega0 = {cfg.arch.omega0!r}",
        f"representation = {cfg.arch.representation}",
        f"pe_octaves = {cfg.arch.pe_octaves}",
    ]
    return "\n".join(lines) + "\n"


def save_config(cfg: RegistrationConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dump_config(cfg))


def write_trace_csv(trace: list[LossBreakdown], seconds: list[float], path) -> None:
    """Comma-separated trace: iter,sim,jdet,smooth,total,seconds."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("iter,sim,jdet,smooth,total,seconds\n")
        for i, (b, s) in enumerate(zip(trace, seconds)):
            f.write(f"{i},{b.sim!r},{b.jdet!r},{b.smooth!r},{b.total!r},{s:.3f}\n")
