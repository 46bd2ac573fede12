"""Dimension-specific reward scoring.

Each dimension is judged by a fixed set of yes/no checks; the score is the
fraction of checks passed (or a clamped relative error for gravity). Hard
scorers work on decoded trajectories; soft scorers are differentiable graph
versions with every indicator replaced by a sigmoid.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass

import numpy as np

from . import kinematics as km
from . import promptengine as pe
from . import tensorcore as tc
from . import worldsim as ws
from ._util import fnv1a64
from .dims import COMPASS, DIMENSIONS, FIELDS, K_OBJECTS, LATENT_DIM, T_FRAMES, PromptSpec, RewardScore

log = logging.getLogger(__name__)

SPATIAL_SCALE = 0.1


@dataclass(frozen=True)
class ScorerConfig:
    delta_max: float = 0.08
    a_min: float = 0.2
    eps_cam: float = 0.01
    softness: float = 25.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"{k} must be positive")

    def canonical(self) -> str:
        return json.dumps({k: repr(float(v)) for k, v in asdict(self).items()}, sort_keys=True)

    def hash(self) -> int:
        return fnv1a64(self.canonical().encode())


# hard scorers ------------------------------------------------------------------

def _motion(states, spec, cfg):
    vec, mask = km.displacement_pairs(states, cfg.a_min)
    if not mask.any():
        return RewardScore(0.0, True)
    ok = np.linalg.norm(vec, axis=-1)[mask] <= cfg.delta_max
    return RewardScore(float(ok.mean()), True)


def _instance(states, spec, cfg):
    counts = (states[:, :, 3] >= cfg.a_min).sum(axis=1)
    return RewardScore(float(np.mean(counts == spec.object_count)), True)


def _gravity(states, spec, cfg):
    est = km.gravity_estimate(states, cfg.a_min)
    if est is None or est[1] < 3:
        return RewardScore(0.0, False)
    g_hat = est[0]
    return RewardScore(float(np.clip(1.0 - abs(g_hat - spec.g) / spec.g, 0.0, 1.0)), True)


def spatial_gap(states, spec):
    """Signed per-frame gap that is positive when the prompted relation holds."""
    i, j = spec.pair
    if spec.relation == "left_of":
        return states[:, j, 0] - states[:, i, 0]
    if spec.relation == "right_of":
        return states[:, i, 0] - states[:, j, 0]
    if spec.relation == "above":
        return states[:, i, 1] - states[:, j, 1]
    return states[:, j, 1] - states[:, i, 1]


def _spatial(states, spec, cfg):
    return RewardScore(float(np.mean(spatial_gap(states, spec) > 0)), True)


def camera_drift(states, cfg):
    vec, mask = km.displacement_pairs(states, cfg.a_min)
    if not mask.any():
        return None
    return vec[mask].mean(axis=0)


def _camera(states, spec, cfg):
    d = camera_drift(states, cfg)
    if d is None:
        return RewardScore(0.0, False)
    norm = float(np.linalg.norm(d))
    if norm < cfg.eps_cam:
        return RewardScore(0.0, False)
    u = np.array(COMPASS[spec.direction])
    return RewardScore(float(np.clip(np.dot(d, u) / norm, 0.0, 1.0)), True)


_HARD = {
    "motion_rationality": _motion,
    "instance_preservation": _instance,
    "mechanics_gravity": _gravity,
    "dynamic_spatial": _spatial,
    "camera_motion": _camera,
}


def score_hard(dimension, traj: ws.VideoTrajectory, spec: PromptSpec, cfg: ScorerConfig = ScorerConfig()) -> RewardScore:
    if spec.dimension != dimension:
        raise ValueError(f"spec dimension {spec.dimension!r} does not match {dimension!r}")
    return _HARD[dimension](traj.states, spec, cfg)


# soft scorers ------------------------------------------------------------------

def _selector(frames, objs, field):
    """Constant matrix picking coordinate ``field`` of (frame, object) cells."""
    m = np.zeros((LATENT_DIM, len(frames)))
    for col, (f, k) in enumerate(zip(frames, objs)):
        m[(f * K_OBJECTS + k) * FIELDS + field, col] = 1.0
    return m


def _decode_field(latent, frames, objs, field):
    """Affine-decoded field values (no clamping) as a (1, n) node."""
    sel = tc.matmul(latent, tc.const(_selector(frames, objs, field)))
    if field == 2:
        return tc.add(tc.scale(sel, 0.125), tc.const(0.125))
    return tc.add(tc.scale(sel, 0.5), tc.const(0.5))


def _soft_indicator(margin_node, cfg):
    # factor 2 matches the slope of the quadratic motion margin at its threshold
    return tc.sigmoid(tc.scale(margin_node, 2.0 * cfg.softness))


def _soft_motion(z, states, spec, cfg):
    _, mask = km.displacement_pairs(states, cfg.a_min)
    fs, ks = np.nonzero(mask)
    if fs.size == 0:
        return tc.const(0.0)
    x0, x1 = _decode_field(z, fs, ks, 0), _decode_field(z, fs + 1, ks, 0)
    y0, y1 = _decode_field(z, fs, ks, 1), _decode_field(z, fs + 1, ks, 1)
    d2 = tc.add(tc.square(tc.sub(x1, x0)), tc.square(tc.sub(y1, y0)))
    # 1 - d^2/delta^2 has slope ~2 in the relative margin, so no extra factor
    margin = tc.add(tc.scale(d2, -1.0 / cfg.delta_max**2), tc.const(1.0))
    ind = tc.sigmoid(tc.scale(margin, cfg.softness))
    return tc.mean(ind)


def _soft_instance(z, states, spec, cfg):
    T = states.shape[0]
    frames = np.repeat(np.arange(T), K_OBJECTS)
    objs = np.tile(np.arange(K_OBJECTS), T)
    a = _decode_field(z, frames, objs, 3)
    pres = _soft_indicator(tc.scale(tc.add(a, tc.const(-cfg.a_min)), 1.0 / cfg.a_min), cfg)
    group = np.zeros((T * K_OBJECTS, T))
    group[np.arange(T * K_OBJECTS), frames] = 1.0
    count = tc.matmul(pres, tc.const(group))
    err = tc.square(tc.add(count, tc.const(-float(spec.object_count))))
    ind = tc.sigmoid(tc.scale(tc.add(tc.scale(err, -1.0), tc.const(0.25)), cfg.softness))
    return tc.mean(ind)


def _soft_gravity(z, states, spec, cfg):
    est = km.gravity_estimate(states, cfg.a_min)
    if est is None or est[1] < 3:
        return tc.const(0.0)
    pres = states[:, 0, 3] >= cfg.a_min
    stop = len(pres) if pres.all() else int(np.argmin(pres))
    idx = km.prebounce_window(states[:stop, 0, 1], states[0, 0, 2])
    # mean of -(y[i+1] - 2y[i] + y[i-1]) over the window, as one linear map
    w = np.zeros((LATENT_DIM, 1))
    for i in idx:
        for f, c in ((i + 1, 1.0), (i, -2.0), (i - 1, 1.0)):
            # decoded y = 0.5 * z + 0.5; constants cancel in a second difference
            w[(f * K_OBJECTS + 0) * FIELDS + 1, 0] += -0.5 * c / idx.size
    g_hat = tc.matmul(z, tc.const(w))
    e = tc.scale(tc.add(g_hat, tc.const(-spec.g)), 1.0 / spec.g)
    abs_e = tc.add(tc.relu(e), tc.relu(tc.scale(e, -1.0)))
    return tc.sum_all(tc.relu(tc.add(tc.scale(abs_e, -1.0), tc.const(1.0))))


def _soft_spatial(z, states, spec, cfg):
    T = states.shape[0]
    i, j = spec.pair
    frames = np.arange(T)
    axis = 0 if spec.relation in ("left_of", "right_of") else 1
    pi = _decode_field(z, frames, np.full(T, i), axis)
    pj = _decode_field(z, frames, np.full(T, j), axis)
    gap = tc.sub(pj, pi) if spec.relation in ("left_of", "below") else tc.sub(pi, pj)
    return tc.mean(_soft_indicator(tc.scale(gap, 1.0 / SPATIAL_SCALE), cfg))


def _soft_camera(z, states, spec, cfg):
    _, mask = km.displacement_pairs(states, cfg.a_min)
    fs, ks = np.nonzero(mask)
    d = camera_drift(states, cfg)
    if d is None or np.linalg.norm(d) < cfg.eps_cam:
        return tc.const(0.0)
    n = fs.size
    dx = tc.sub(_decode_field(z, fs + 1, ks, 0), _decode_field(z, fs, ks, 0))
    dy = tc.sub(_decode_field(z, fs + 1, ks, 1), _decode_field(z, fs, ks, 1))
    avg = tc.const(np.full((n, 1), 1.0 / n))
    mx, my = tc.matmul(dx, avg), tc.matmul(dy, avg)
    ux, uy = COMPASS[spec.direction]
    dot = tc.add(tc.scale(mx, ux), tc.scale(my, uy))
    norm_sq = tc.add(tc.square(mx), tc.square(my))
    inv_norm = tc.exp(tc.scale(tc.log(norm_sq), -0.5))
    return tc.sum_all(tc.relu(tc.mul(dot, inv_norm)))


_SOFT = {
    "motion_rationality": _soft_motion,
    "instance_preservation": _soft_instance,
    "mechanics_gravity": _soft_gravity,
    "dynamic_spatial": _soft_spatial,
    "camera_motion": _soft_camera,
}


def score_soft(dimension, latent, spec: PromptSpec, cfg: ScorerConfig = ScorerConfig()):
    """Differentiable surrogate of :func:`score_hard` as a scalar node.

    ``latent`` is a ``(1, D)`` node (or an array). Presence masks and the
    gravity pre-bounce window are read from the hard-decoded trajectory and
    held constant.
    """
    if spec.dimension != dimension:
        raise ValueError(f"spec dimension {spec.dimension!r} does not match {dimension!r}")
    if isinstance(latent, tc.Node):
        z = latent
    else:
        z = tc.const(np.asarray(latent, dtype=np.float64).reshape(1, -1))
    if z.shape != (1, LATENT_DIM):
        raise tc.ShapeError(f"soft scorer expects a (1, {LATENT_DIM}) latent, got {list(z.shape)}")
    states = ws.decode(z.value[0]).states
    return _SOFT[dimension](z, states, spec, cfg)


# dataset-level scoring -----------------------------------------------------------

def scoring_spec(record, dimension, a_min=0.2):
    """Spec a record is judged against for ``dimension``, or None if not estimable.

    Records whose own prompt targets another dimension borrow parameters from
    the real trajectory behind their caption (the sampled latent for PsVs).
    """
    if record.spec.dimension == dimension:
        return record.spec
    source_latent = record.real_latent if record.real_latent is not None else record.latent
    return pe.estimate_spec(ws.decode(source_latent), dimension, a_min)


def score_record(record, dimension, cfg: ScorerConfig = ScorerConfig()):
    spec = scoring_spec(record, dimension, cfg.a_min)
    if spec is None:
        return RewardScore(0.0, False)
    return score_hard(dimension, ws.decode(record.latent), spec, cfg)


def record_dimension(record, targets):
    """Target dimension a record is scored under (its own one if it is a target)."""
    return record.spec.dimension if record.spec.dimension in targets else targets[0]


class ScoreCache:
    """Append-only ``id<TAB>dimension<TAB>cfg_hash<TAB>value<TAB>valid`` lines."""

    def __init__(self, path):
        self.path = path
        self.entries = {}
        if path and os.path.exists(path):
            with open(path) as fh:
                for line in fh:
                    parts = line.rstrip("\n").split("\t")
                    if len(parts) != 5:
                        continue
                    rid, dim, h, value, valid = parts
                    self.entries[(int(rid), dim, int(h, 16))] = RewardScore(float(value), valid == "1")

    def hashes(self):
        return {k[2] for k in self.entries}

    def get(self, rid, dim, h):
        return self.entries.get((rid, dim, h))

    def reset(self):
        self.entries = {}
        if self.path:
            open(self.path, "w").close()

    def put(self, rid, dim, h, score):
        self.entries[(rid, dim, h)] = score
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(f"{rid}\t{dim}\t{h:016x}\t{score.value!r}\t{int(score.valid)}\n")


def score_dataset(records, cfg: ScorerConfig = ScorerConfig(), targets=("motion_rationality",), cache_path=None, workers=1):
    """Fill ``record.reward`` for every record (in place) and return the list."""
    targets = tuple(targets)
    for d in targets:
        if d not in DIMENSIONS:
            raise ValueError(f"unknown dimension {d!r}")
    h = cfg.hash()
    cache = ScoreCache(cache_path)
    stale = cache.hashes() - {h}
    if stale:
        log.warning("score cache %s built with a different scorer config; rebuilding", cache_path)
        cache.reset()
    todo = []
    for rec in records:
        dim = record_dimension(rec, targets)
        hit = cache.get(rec.id, dim, h)
        if hit is not None:
            rec.reward = hit
        else:
            todo.append((rec, dim))
    scores = _map(lambda item: score_record(item[0], item[1], cfg), todo, workers)
    for (rec, dim), s in zip(todo, scores):
        rec.reward = s
        cache.put(rec.id, dim, h, s)
    return records


def _map(fn, items, workers):
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def filter_dataset(records):
    """Keep records whose reward is valid and strictly positive (order preserved)."""
    missing = [r.id for r in records if r.reward is None]
    if missing:
        raise ValueError(f"records without rewards: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    kept = [r for r in records if r.reward.valid and r.reward.value > 0]
    if not kept:
        log.warning("filter_dataset: no records survived filtering (count 0)")
    return kept
