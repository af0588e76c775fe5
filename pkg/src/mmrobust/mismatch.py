"""Device-mismatch noise: Gaussian perturbation with std proportional to |theta|."""

from __future__ import annotations

import numpy as np

from .diffcore import RngStream
from .models import ParameterSet


def _check_zeta(zeta):
    if zeta < 0:
        raise ValueError(f"mismatch level must be non-negative, got {zeta}")


def proportional_direction(params: ParameterSet, zeta: float, rng: RngStream) -> dict[str, np.ndarray]:
    """Random perturbation v with v_i ~ N(0, (zeta |theta_i|)^2) on susceptible arrays.

    Non-susceptible arrays get all-zero entries. Draws consume ``rng`` in
    parameter order.
    """
    _check_zeta(zeta)
    out = {}
    for name in params:
        theta = params[name]
        if params.susceptible[name]:
            std = zeta * np.abs(theta.astype(np.float64))
            out[name] = (std * rng.normal(theta.shape)).astype(theta.dtype)
        else:
            out[name] = np.zeros_like(theta)
    return out


def sample_mismatch(params: ParameterSet, zeta: float, rng: RngStream) -> ParameterSet:
    """One simulated chip deployment: fresh ParameterSet with mismatched susceptible arrays."""
    _check_zeta(zeta)
    arrays = {}
    for name in params:
        theta = params[name]
        if not params.susceptible[name]:
            arrays[name] = theta.copy()
            continue
        std = zeta * np.abs(theta.astype(np.float64))
        arrays[name] = (theta + std * rng.normal(theta.shape)).astype(theta.dtype)
    return ParameterSet(arrays, dict(params.susceptible))
