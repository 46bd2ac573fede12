"""Rectified-flow interpolation, losses and the ODE sampler."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from . import velocitymodel as vm


class SamplerError(FloatingPointError):
    def __init__(self, step, msg="non-finite state"):
        super().__init__(f"{msg} at sampler step {step}")
        self.step = step


@dataclass(frozen=True)
class FlowPoint:
    z0: np.ndarray
    z1: np.ndarray
    t: float
    zt: np.ndarray
    vt: np.ndarray


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 32
    scheme: str = "euler"
    seed: int = 0

    def __post_init__(self):
        if int(self.steps) < 1:
            raise ValueError("steps must be >= 1")
        if self.scheme not in ("euler", "heun"):
            raise ValueError(f"unknown sampler scheme {self.scheme!r}")


def make_flow_point(z0, z1, t) -> FlowPoint:
    z0 = np.asarray(z0, dtype=np.float64)
    z1 = np.asarray(z1, dtype=np.float64)
    if z0.shape != z1.shape:
        raise tc.ShapeError(f"z0 {list(z0.shape)} and z1 {list(z1.shape)} differ")
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(t_arr < 0) or np.any(t_arr > 1):
        raise ValueError("t must lie in [0, 1]")
    if t_arr.ndim == 1 and z0.ndim == 2:
        t_arr = t_arr[:, None]
    zt = t_arr * z1 + (1.0 - t_arr) * z0
    # exact endpoints regardless of rounding in the blend
    zt = np.where(t_arr == 0.0, z0, np.where(t_arr == 1.0, z1, zt))
    return FlowPoint(z0, z1, t, zt, z1 - z0)


def fm_loss(pred_velocity, target_velocity):
    """Mean squared velocity error as a scalar graph node."""
    pred = pred_velocity if isinstance(pred_velocity, tc.Node) else tc.const(pred_velocity)
    target = target_velocity if isinstance(target_velocity, tc.Node) else tc.const(target_velocity)
    if pred.shape != target.shape:
        raise tc.ShapeError(f"fm_loss: {list(pred.shape)} vs {list(target.shape)}")
    return tc.mean(tc.square(tc.sub(pred, target)))


def predicted_clean(u_out, z0):
    """One-step clean estimate u + z0 (node in, node out)."""
    u = u_out if isinstance(u_out, tc.Node) else tc.const(u_out)
    z = z0 if isinstance(z0, tc.Node) else tc.const(z0)
    if u.shape != z.shape:
        raise tc.ShapeError(f"predicted_clean: {list(u.shape)} vs {list(z.shape)}")
    return tc.add(u, z)


def integrate(velocity, z0, steps, scheme="euler", t0=0.0):
    """Integrate dz/dt = velocity(z, t) from ``t0`` to 1 with uniform steps."""
    z = np.array(z0, dtype=np.float64)
    h = (1.0 - t0) / steps
    for k in range(steps):
        t = t0 + k * h
        f0 = velocity(z, t)
        if scheme == "euler":
            z = z + h * f0
        else:
            z_pred = z + h * f0
            f1 = velocity(z_pred, min(t + h, 1.0))
            z = z + 0.5 * h * (f0 + f1)
        if not np.all(np.isfinite(z)):
            raise SamplerError(k)
    return z


def noise(seed, dim):
    return np.random.default_rng(seed).standard_normal(dim)


def sample(params: vm.ModelParams, cond, sampler: SamplerConfig):
    cond = np.asarray(cond, dtype=np.float64)
    if cond.shape != (params.config.cond_dim,):
        raise tc.ShapeError(f"cond length {cond.shape} != {params.config.cond_dim}")
    z0 = noise(sampler.seed, params.config.latent_dim)
    return integrate(lambda z, t: vm.forward(params, z, cond, t), z0, sampler.steps, sampler.scheme)


def sample_batch(params: vm.ModelParams, conds, seeds, sampler: SamplerConfig):
    """Batched sampling; row i starts from the noise of ``seeds[i]``."""
    conds = np.atleast_2d(np.asarray(conds, dtype=np.float64))
    z0 = np.stack([noise(s, params.config.latent_dim) for s in seeds])
    return integrate(lambda z, t: vm.forward(params, z, conds, t), z0, sampler.steps, sampler.scheme)
