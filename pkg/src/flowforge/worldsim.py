"""Toy object-trajectory world: oracle simulator, defects, latent codec, renderer.

A trajectory is a ``(T, K, 4)`` array of per-frame object states
``[x, y, r, a]`` (position in the unit square with y pointing up, radius,
intensity). Empty slots carry ``a = 0`` and sit at the centre with r = 0.125.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._util import rng
from .dims import (
    COMPASS,
    FIELDS,
    K_OBJECTS,
    LATENT_DIM,
    RELATIONS,
    T_FRAMES,
    PromptSpec,
)

DEFECT_KINDS = ("teleport", "vanish", "wrong_gravity", "shuffle_order", "drift_camera")
R_MIN = 1e-3
ABSENT = (0.5, 0.5, 0.125, 0.0)
PRESENCE = 0.2  # intensity that counts as "object present" (matches ScorerConfig.a_min)


class ObjectState(NamedTuple):
    x: float
    y: float
    r: float
    a: float


@dataclass(frozen=True)
class WorldConfig:
    frames: int = T_FRAMES
    objects: int = K_OBJECTS


class VideoTrajectory:
    """Thin wrapper around a ``(T, K, 4)`` state array."""

    __slots__ = ("states",)

    def __init__(self, states):
        arr = np.array(states, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != FIELDS:
            raise ValueError(f"trajectory array must be (T, K, 4), got {arr.shape}")
        self.states = arr

    @property
    def T(self):
        return self.states.shape[0]

    @property
    def K(self):
        return self.states.shape[1]

    @property
    def x(self):
        return self.states[:, :, 0]

    @property
    def y(self):
        return self.states[:, :, 1]

    @property
    def r(self):
        return self.states[:, :, 2]

    @property
    def a(self):
        return self.states[:, :, 3]

    @property
    def frames(self):
        return [[ObjectState(*map(float, s)) for s in frame] for frame in self.states]

    def present(self, threshold=PRESENCE):
        return self.a >= threshold

    def copy(self):
        return VideoTrajectory(self.states.copy())

    def __eq__(self, other):
        return isinstance(other, VideoTrajectory) and np.array_equal(self.states, other.states)


def _clamp_states(s):
    s[..., 0] = np.clip(s[..., 0], 0.0, 1.0)
    s[..., 1] = np.clip(s[..., 1], 0.0, 1.0)
    s[..., 2] = np.clip(s[..., 2], R_MIN, 0.25)
    s[..., 3] = np.clip(s[..., 3], 0.0, 1.0)
    return s


def _fold(p, lo, hi):
    """Reflect unbounded coordinates back into [lo, hi] (elastic walls)."""
    span = hi - lo
    q = np.mod(p - lo, 2.0 * span)
    return lo + np.where(q > span, 2.0 * span - q, q)


def _empty_states(T, K):
    s = np.empty((T, K, FIELDS))
    s[:] = ABSENT
    return s


def simulate(spec: PromptSpec, seed: int = 0) -> VideoTrajectory:
    """Ideal trajectory for ``spec``; deterministic per ``(spec, seed)``."""
    gen = rng("simulate", seed, spec.layout_seed)
    T, K = T_FRAMES, K_OBJECTS
    n = spec.object_count
    s = _empty_states(T, K)
    t = np.arange(T, dtype=np.float64)
    radii = np.array(spec.radii[:n])
    s[:, :n, 2] = radii
    s[:, :n, 3] = np.array(spec.intensities[:n])
    dim = spec.dimension

    if dim in ("motion_rationality", "instance_preservation"):
        # headings spread around the circle so no two objects share a drift
        theta0 = gen.uniform(0.0, 2.0 * np.pi)
        for k in range(n):
            r = radii[k]
            p0 = gen.uniform(r, 1.0 - r, size=2)
            theta = theta0 + 2.0 * np.pi * k / n + gen.uniform(-0.5, 0.5) * np.pi / (2 * n)
            v = spec.speed * np.array([np.cos(theta), np.sin(theta)])
            s[:, k, 0] = _fold(p0[0] + v[0] * t, r, 1.0 - r)
            s[:, k, 1] = _fold(p0[1] + v[1] * t, r, 1.0 - r)

    elif dim == "mechanics_gravity":
        g = spec.g
        for k in range(n):
            r = radii[k]
            s[:, k, 0] = gen.uniform(0.1, 0.9)
            h0 = gen.uniform(0.72, 0.95)
            H = h0 - r
            period = 2.0 * np.sqrt(2.0 * H / g)
            tau = np.mod(t + period / 2.0, period) - period / 2.0
            s[:, k, 1] = r + H - 0.5 * g * tau * tau

    elif dim == "dynamic_spatial":
        i, j = spec.pair
        horizontal = spec.relation in ("left_of", "right_of")
        # ordering axis: x for left/right, y for above/below; motion on the other axis
        order_axis, move_axis = (0, 1) if horizontal else (1, 0)
        first_low = spec.relation in ("left_of", "below")
        sign0 = gen.choice([-1.0, 1.0])
        for k in range(n):
            r = radii[k]
            if k == i:
                lo, hi = (0.1, 0.4) if first_low else (0.6, 0.9)
                s[:, k, order_axis] = gen.uniform(lo, hi)
            elif k == j:
                lo, hi = (0.6, 0.9) if first_low else (0.1, 0.4)
                s[:, k, order_axis] = gen.uniform(lo, hi)
            else:
                s[:, k, order_axis] = gen.uniform(0.1, 0.9)
            p0 = gen.uniform(r, 1.0 - r)
            # neighbours move in opposite senses (a shared drift would read as a pan)
            sign = sign0 * (-1.0) ** k
            s[:, k, move_axis] = _fold(p0 + sign * spec.speed * t, r, 1.0 - r)

    elif dim == "camera_motion":
        d = np.array(COMPASS[spec.direction]) * spec.speed
        travel = d * (T - 1)
        for k in range(n):
            r = radii[k]
            for ax in range(2):
                lo = r + max(0.0, -travel[ax])
                hi = 1.0 - r - max(0.0, travel[ax])
                s[:, k, ax] = gen.uniform(lo, hi) + d[ax] * t
    else:
        raise ValueError(f"no dynamics for dimension {dim!r}")
    return VideoTrajectory(_clamp_states(s))


# defects ---------------------------------------------------------------------

@dataclass(frozen=True)
class DefectConfig:
    rate: float = 0.0
    kinds: tuple = DEFECT_KINDS
    magnitude: float = 0.3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kinds", tuple(self.kinds))
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("defect rate must lie in [0, 1]")
        bad = set(self.kinds) - set(DEFECT_KINDS)
        if bad:
            raise ValueError(f"unknown defect kinds {sorted(bad)}")


def inject_defects(traj: VideoTrajectory, defects: DefectConfig, stream=0) -> VideoTrajectory:
    """Corrupt ``traj`` with probability ``defects.rate``.

    ``stream`` distinguishes trajectories that share one config (e.g. the
    sample index within a corpus). All selected kinds are applied together.
    """
    gen = rng("defect", defects.seed, stream)
    if not gen.random() < defects.rate or not defects.kinds:
        return traj
    s = traj.states.copy()
    T = s.shape[0]
    present = np.flatnonzero(s[0, :, 3] >= PRESENCE)
    if present.size == 0:
        return traj
    m = defects.magnitude
    t = np.arange(T, dtype=np.float64)
    kinds = [k for k in DEFECT_KINDS if k in defects.kinds]

    if "wrong_gravity" in kinds:
        factor = gen.choice([max(0.0, 1.0 - 5.0 * m), 1.0 + 5.0 * m])
        for k in present:
            y = s[:, k, 1]
            base = y[0] + (y[1] - y[0]) * t
            s[:, k, 1] = base + factor * (y - base)
    if "drift_camera" in kinds:
        rho, omega = m / 2.0, 2.0 * np.pi / 6.0
        phi = 0.0
        off = rho * np.stack([np.cos(omega * t + phi) - np.cos(phi), np.sin(omega * t + phi) - np.sin(phi)], 1)
        s[:, present, 0] += off[:, None, 0]
        s[:, present, 1] += off[:, None, 1]
    if "shuffle_order" in kinds and present.size >= 2:
        i, j = gen.choice(present, size=2, replace=False)
        f = int(gen.integers(T // 4, 3 * T // 4 + 1))
        xi = s[f:, i, 0].copy()
        s[f:, i, 0] = s[f:, j, 0]
        s[f:, j, 0] = xi
    _clamp_states(s)
    if "teleport" in kinds:
        k = gen.choice(present)
        f = int(gen.integers(1, T - 1))
        phi = gen.uniform(0.0, 2.0 * np.pi)
        p = s[f, k, :2]
        for turn in range(8):
            ang = phi + turn * np.pi / 4.0
            q = np.clip(p + m * np.array([np.cos(ang), np.sin(ang)]), 0.0, 1.0)
            if np.linalg.norm(q - p) >= 0.75 * m:
                break
        s[f, k, :2] = q
    if "vanish" in kinds:
        k = gen.choice(present)
        f = int(gen.integers(T // 4, 3 * T // 4 + 1))
        s[f:, k, 3] = 0.0
    return VideoTrajectory(_clamp_states(s))


# latent codec ------------------------------------------------------------------

def encode(traj: VideoTrajectory) -> np.ndarray:
    s = traj.states
    z = np.empty_like(s)
    z[..., 0] = 2.0 * s[..., 0] - 1.0
    z[..., 1] = 2.0 * s[..., 1] - 1.0
    z[..., 2] = (s[..., 2] - 0.125) / 0.125
    z[..., 3] = 2.0 * s[..., 3] - 1.0
    return z.reshape(-1)


def decode_unclamped(latent) -> np.ndarray:
    z = np.asarray(latent, dtype=np.float64)
    if z.shape[-1] != LATENT_DIM:
        raise ValueError(f"latent length {z.shape[-1]} != {LATENT_DIM}")
    z = z.reshape(z.shape[:-1] + (T_FRAMES, K_OBJECTS, FIELDS))
    s = np.empty_like(z)
    s[..., 0] = (z[..., 0] + 1.0) / 2.0
    s[..., 1] = (z[..., 1] + 1.0) / 2.0
    s[..., 2] = z[..., 2] * 0.125 + 0.125
    s[..., 3] = (z[..., 3] + 1.0) / 2.0
    return s


def decode(latent) -> VideoTrajectory:
    z = np.asarray(latent, dtype=np.float64)
    if z.ndim != 1:
        raise ValueError(f"decode expects a flat latent of length {LATENT_DIM}")
    return VideoTrajectory(_clamp_states(decode_unclamped(z)))


# rendering -----------------------------------------------------------------------

def render_frame(traj: VideoTrajectory, frame_index: int, resolution: int = 64) -> np.ndarray:
    """8-bit grayscale image of one frame (row 0 is the top of the scene)."""
    if not 0 <= frame_index < traj.T:
        raise IndexError(f"frame {frame_index} out of range for {traj.T} frames")
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    centers = (np.arange(resolution) + 0.5) / resolution
    px, py = np.meshgrid(centers, 1.0 - centers)
    img = np.zeros((resolution, resolution))
    for x, y, r, a in traj.states[frame_index]:
        if a <= 0.0:
            continue
        sigma = r / 2.0
        img += a * np.exp(-((px - x) ** 2 + (py - y) ** 2) / (2.0 * sigma * sigma))
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def pgm_bytes(img: np.ndarray) -> bytes:
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.astype(np.uint8).tobytes()


def export_frames(traj: VideoTrajectory, directory, resolution: int = 64):
    """Write ``frame_%03d.pgm`` for every frame; returns the written paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []
    for f in range(traj.T):
        path = os.path.join(directory, f"frame_{f:03d}.pgm")
        with open(path, "wb") as fh:
            fh.write(pgm_bytes(render_frame(traj, f, resolution)))
        paths.append(path)
    return paths
