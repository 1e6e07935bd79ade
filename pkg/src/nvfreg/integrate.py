"""Velocity-field integration to a diffeomorphic displacement.

exp_ss is the production path: halve the field T times, then square the
small deformation T times through trilinear composition. exp_euler traces
a per-voxel trajectory with fixed-step forward Euler and exists purely as
an independent oracle for tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .field import VectorField, compose_displacements, identity_grid, sample_vector


@dataclass
class IntegrationConfig:
    time_steps: int = 7
    method: str = "scaling_squaring"
    euler_steps: int = 128

    def validate(self):
        if self.time_steps < 1:
            raise ConfigurationError("time_steps must be >= 1")
        if self.euler_steps < 1:
            raise ConfigurationError("euler_steps must be >= 1")
        if self.method not in ("scaling_squaring", "euler_oracle"):
            raise ConfigurationError(f"unknown integration method {self.method!r}")


def exp_ss(v: VectorField, cfg: IntegrationConfig | None = None) -> VectorField:
    """Displacement of exp(v) by scaling and squaring.

    u0 = v / 2^T, then u <- u o u repeated T times. Introduces no
    learnable parameters.
    """
    cfg = cfg or IntegrationConfig()
    cfg.validate()
    u = VectorField(v.data / (2.0 ** cfg.time_steps), spacing=v.spacing)
    for _ in range(cfg.time_steps):
        u = compose_displacements(u, u)
    return u


def exp_ss_with_steps(v: VectorField, time_steps: int):
    """exp_ss keeping every intermediate displacement (for the reverse pass)."""
    u = VectorField(v.data / (2.0 ** time_steps), spacing=v.spacing)
    steps = [u]
    for _ in range(time_steps):
        u = compose_displacements(u, u)
        steps.append(u)
    return u, steps


def exp_euler(v: VectorField, steps: int) -> VectorField:
    """Fixed-step Euler flow of the stationary velocity field (oracle only).

    Each voxel follows its own trajectory q <- q + h * v(q); the velocity
    is the only interpolated quantity.
    """
    if steps < 1:
        raise ConfigurationError("euler steps must be >= 1")
    h = 1.0 / steps
    grid = identity_grid(v.dims)
    u = np.zeros_like(v.data)
    for _ in range(steps):
        u = u + h * sample_vector(v.data, grid + u)
    return VectorField(u, spacing=v.spacing)
