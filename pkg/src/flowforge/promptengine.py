"""Prompt-driven data engine.

Base prompts are drawn per dimension from seeded templates, expanded into
style-only variants, and paired with latents from three sources:

* ``PsVs`` - synthetic prompt, video sampled from the current model;
* ``PrVs`` - caption inferred from an oracle ("real") trajectory, video
  sampled from the model for that caption, real latent kept alongside;
* ``PrVr`` - caption and latent both taken from the oracle trajectory.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import flowmatch as fm
from . import kinematics as km
from . import worldsim as ws
from ._util import derive_seed, rng
from .dims import (
    COMPASS,
    COND_DIM,
    DIMENSIONS,
    GEN_SPEED_RANGE,
    GRAVITY_RANGE,
    INTENSITY_RANGE,
    K_OBJECTS,
    MIN_OBJECTS,
    PAIRS,
    RADIUS_RANGE,
    RELATIONS,
    SPEED_RANGE,
    PromptSpec,
    RewardScore,
    norm_g,
    norm_speed,
)

SOURCES = ("PsVs", "PrVs", "PrVr")
DATASET_FORMAT = "flowforge-dataset/1"

CAMERA_TOL = 1e-3
GRAVITY_SPREAD_TOL = 1e-3
GRAVITY_MIN = 0.004
STATIC_SPEED = 0.0015
INSTANCE_SPEED_MAX = 0.0125


@dataclass(frozen=True)
class Prompt:
    spec: PromptSpec
    text: str
    cond: np.ndarray

    @classmethod
    def from_spec(cls, spec):
        return cls(spec, render_text(spec), encode_conditioning(spec))


@dataclass
class DatasetRecord:
    id: int
    source: str
    prompt: Prompt
    latent: np.ndarray
    real_latent: np.ndarray | None = None
    reward: RewardScore | None = None
    gen_seed: int = 0

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        if (self.real_latent is None) != (self.source == "PsVs"):
            raise ValueError(f"{self.source}: real_latent presence violates source rule")

    @property
    def spec(self):
        return self.prompt.spec

    def to_json(self):
        return json.dumps(
            {
                "id": self.id,
                "source": self.source,
                "spec": self.prompt.spec.to_dict(),
                "text": self.prompt.text,
                "cond": self.prompt.cond.tolist(),
                "latent": self.latent.tolist(),
                "real_latent": None if self.real_latent is None else self.real_latent.tolist(),
                "gen_seed": self.gen_seed,
                "reward": None if self.reward is None else self.reward.to_dict(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line):
        d = json.loads(line)
        spec = PromptSpec.from_dict(d["spec"])
        return cls(
            id=int(d["id"]),
            source=d["source"],
            prompt=Prompt(spec, d["text"], np.array(d["cond"], dtype=np.float64)),
            latent=np.array(d["latent"], dtype=np.float64),
            real_latent=None if d["real_latent"] is None else np.array(d["real_latent"], dtype=np.float64),
            reward=None if d["reward"] is None else RewardScore.from_dict(d["reward"]),
            gen_seed=int(d["gen_seed"]),
        )


@dataclass(frozen=True)
class DataMixConfig:
    include: tuple = SOURCES
    counts: dict = field(default_factory=lambda: {"PsVs": 950, "PrVs": 175, "PrVr": 175})
    target_dimensions: tuple = ("motion_rationality",)
    real_dimensions: tuple = DIMENSIONS
    n_variants: int = 4
    defects: ws.DefectConfig = field(default_factory=ws.DefectConfig)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "include", tuple(self.include))
        object.__setattr__(self, "target_dimensions", tuple(self.target_dimensions))
        object.__setattr__(self, "real_dimensions", tuple(self.real_dimensions))
        if not self.include:
            raise ValueError("include must name at least one source")
        for src in self.include:
            if src not in SOURCES:
                raise ValueError(f"unknown source {src!r}")
            if int(self.counts.get(src, 0)) <= 0:
                raise ValueError(f"count for {src} must be positive")
        for d in (*self.target_dimensions, *self.real_dimensions):
            if d not in DIMENSIONS:
                raise ValueError(f"unknown dimension {d!r}")
        if not self.target_dimensions:
            raise ValueError("at least one target dimension is required")

    def to_dict(self):
        d = asdict(self)
        d["counts"] = {k: int(self.counts[k]) for k in sorted(self.counts)}
        return d


# prompt generation -------------------------------------------------------------

def _style(gen, spec_kwargs):
    spec_kwargs["radii"] = tuple(gen.uniform(*RADIUS_RANGE, size=K_OBJECTS))
    spec_kwargs["intensities"] = tuple(gen.uniform(*INTENSITY_RANGE, size=K_OBJECTS))
    spec_kwargs["layout_seed"] = int(gen.integers(0, 2**31))
    return spec_kwargs


def _draw_spec(dimension, gen):
    n = int(gen.integers(MIN_OBJECTS.get(dimension, 1), 4))
    kw = {"dimension": dimension, "object_count": n}
    if dimension in GEN_SPEED_RANGE:
        kw["speed"] = float(gen.uniform(*GEN_SPEED_RANGE[dimension]))
    if dimension == "mechanics_gravity":
        kw["g"] = float(gen.uniform(*GRAVITY_RANGE))
    if dimension == "camera_motion":
        kw["direction"] = str(gen.choice(list(COMPASS)))
    if dimension == "dynamic_spatial":
        kw["relation"] = str(gen.choice(RELATIONS))
        pairs = [p for p in PAIRS if max(p) < n]
        kw["pair"] = pairs[int(gen.integers(len(pairs)))]
    return PromptSpec(**_style(gen, kw))


def gen_base_prompts(dimension, n, seed):
    if dimension not in DIMENSIONS:
        raise ValueError(f"unknown dimension {dimension!r}")
    if n < 1:
        raise ValueError("n must be >= 1")
    return [_draw_spec(dimension, rng("base-prompt", dimension, seed, i)) for i in range(n)]


def augment(spec: PromptSpec, n_variants, seed):
    """Stylistic variants: new radii, intensities and layout; critical slots untouched."""
    if n_variants < 1:
        raise ValueError("n_variants must be >= 1")
    out = []
    for v in range(1, n_variants + 1):
        gen = rng("augment", seed, v, spec.layout_seed)
        out.append(spec.with_(**_style(gen, {}), variant_id=v))
    return out


_TEMPLATES = {
    "motion_rationality": "{count} moving at a steady {speed:.3f} per frame, bouncing off the walls without jumps",
    "instance_preservation": "{count} drifting slowly at {speed:.3f} per frame, every object stays visible",
    "mechanics_gravity": "{count} dropped from rest, falling under gravity {g:.4f} and bouncing on the floor",
    "dynamic_spatial": "{count}; object {i} stays {rel} object {j} while moving at {speed:.3f} per frame",
    "camera_motion": "camera pans {direction} at {speed:.3f} per frame over {count}",
}


def render_text(spec: PromptSpec) -> str:
    n = spec.object_count
    count = "one ball" if n == 1 else f"{n} balls"
    return _TEMPLATES[spec.dimension].format(
        count=count,
        speed=spec.speed,
        g=spec.g,
        i=spec.pair[0],
        j=spec.pair[1],
        rel=spec.relation.replace("_", " "),
        direction=spec.direction,
    )


def encode_conditioning(spec: PromptSpec) -> np.ndarray:
    """One-hot dimension (5) followed by 8 normalised parameter slots.

    Slot 0 is always object_count / 3 and slot 1 the speed (or g); the
    direction / relation slots follow.
    """
    c = np.zeros(COND_DIM)
    c[DIMENSIONS.index(spec.dimension)] = 1.0
    slots = []
    d = spec.dimension
    n = spec.object_count / 3.0
    if d in ("motion_rationality", "instance_preservation"):
        slots = [n, norm_speed(d, spec.speed)]
    elif d == "mechanics_gravity":
        slots = [n, norm_g(spec.g)]
    elif d == "dynamic_spatial":
        rel = [1.0 if spec.relation == r else 0.0 for r in RELATIONS]
        slots = [n, norm_speed(d, spec.speed)] + rel + [PAIRS.index(spec.pair) / 2.0]
    elif d == "camera_motion":
        ux, uy = COMPASS[spec.direction]
        slots = [n, norm_speed(d, spec.speed), ux, uy]
    c[len(DIMENSIONS):len(DIMENSIONS) + len(slots)] = slots
    return c


# caption inference ---------------------------------------------------------------

def _clip(v, lo, hi):
    return float(min(max(v, lo), hi))


def _style_from(states, present):
    radii = [0.05] * K_OBJECTS
    inten = [0.8] * K_OBJECTS
    for slot, k in enumerate(present[:K_OBJECTS]):
        radii[k] = _clip(float(np.mean(states[:, k, 2])), 1e-3, 0.25)
        inten[k] = _clip(float(np.mean(states[:, k, 3])), 0.0, 1.0)
    return {"radii": tuple(radii), "intensities": tuple(inten)}


def _median_speed(states, a_min):
    vec, mask = km.displacement_pairs(states, a_min)
    if not mask.any():
        return 0.0
    return float(np.median(np.linalg.norm(vec, axis=-1)[mask]))


def _est_camera(states, present, a_min):
    if present.size < 2:
        return None
    vec = states[1:, present, :2] - states[:-1, present, :2]
    mean = vec.reshape(-1, 2).mean(axis=0)
    if np.max(np.abs(vec - mean)) > CAMERA_TOL or np.linalg.norm(mean) < 0.5 * SPEED_RANGE["camera_motion"][0]:
        return None
    ang = {k: float(np.dot(mean, v)) for k, v in COMPASS.items()}
    direction = max(ang, key=ang.get)
    return {
        "dimension": "camera_motion",
        "object_count": int(present.size),
        "direction": direction,
        "speed": _clip(float(np.linalg.norm(mean)), *SPEED_RANGE["camera_motion"]),
    }


def _est_gravity(states, present, a_min):
    est = km.gravity_estimate(states, a_min)
    if est is None:
        return None
    g_hat, count, spread = est
    if count < 3 or spread > GRAVITY_SPREAD_TOL or g_hat < GRAVITY_MIN:
        return None
    return {"dimension": "mechanics_gravity", "object_count": int(present.size), "g": _clip(g_hat, *GRAVITY_RANGE)}


def _relation(axis, positive):
    if axis == 0:
        return "left_of" if positive else "right_of"
    return "below" if positive else "above"


def _est_spatial(states, present, a_min):
    """Axis-locked scene: one coordinate frozen, the other moving, a pair strictly ordered."""
    if present.size < 2:
        return None
    n = int(present.size)
    vec = states[1:, present, :2] - states[:-1, present, :2]
    for order_axis in (0, 1):
        move_axis = 1 - order_axis
        fixed = np.max(np.abs(vec[..., order_axis])) <= 1e-9
        moving = np.max(np.abs(vec[..., move_axis])) > 1e-9
        if not (fixed and moving):
            continue
        best = None
        for i, j in PAIRS:
            if i not in present or j not in present:
                continue
            gap = states[:, j, order_axis] - states[:, i, order_axis]
            margin = float(np.min(np.abs(gap)))
            if (np.all(gap > 0) or np.all(gap < 0)) and (best is None or margin > best[0]):
                best = (margin, (i, j), bool(gap[0] > 0))
        if best is None:
            continue
        speeds = np.abs(vec[..., move_axis]).reshape(-1)
        return {
            "dimension": "dynamic_spatial",
            "object_count": n,
            "relation": _relation(order_axis, best[2]),
            "pair": best[1],
            "speed": _clip(float(np.median(speeds)), *SPEED_RANGE["dynamic_spatial"]),
        }
    return None


def _best_spatial(states, present, a_min):
    """Any pair ordering that holds on every frame, widest margin first."""
    best = None
    for i, j in PAIRS:
        if i not in present or j not in present:
            continue
        for axis in (0, 1):
            gap = states[:, j, axis] - states[:, i, axis]
            if np.all(gap > 0) or np.all(gap < 0):
                margin = float(np.min(np.abs(gap)))
                if best is None or margin > best[0]:
                    best = (margin, (i, j), axis, bool(gap[0] > 0))
    if best is None:
        return None
    _, pair, axis, positive = best
    return {
        "dimension": "dynamic_spatial",
        "object_count": int(present.size),
        "relation": _relation(axis, positive),
        "pair": pair,
        "speed": _clip(_median_speed(states, a_min), *SPEED_RANGE["dynamic_spatial"]),
    }


def estimate_spec(traj: ws.VideoTrajectory, dimension, a_min=ws.PRESENCE):
    """Parameters of ``dimension`` read off ``traj``; None when not estimable."""
    states = traj.states
    present = km.present_at_start(states, a_min)
    if present.size == 0:
        return None
    if dimension == "camera_motion":
        kw = _est_camera(states, present, a_min)
    elif dimension == "mechanics_gravity":
        kw = _est_gravity(states, present, a_min)
    elif dimension == "dynamic_spatial":
        kw = _est_spatial(states, present, a_min) or _best_spatial(states, present, a_min)
    elif dimension == "instance_preservation":
        kw = {
            "dimension": dimension,
            "object_count": int(min(present.size, 3)),
            "speed": _clip(_median_speed(states, a_min), *SPEED_RANGE[dimension]),
        }
    elif dimension == "motion_rationality":
        kw = {
            "dimension": dimension,
            "object_count": int(min(present.size, 3)),
            "speed": _clip(_median_speed(states, a_min), *SPEED_RANGE[dimension]),
        }
    else:
        raise ValueError(f"unknown dimension {dimension!r}")
    if kw is None:
        return None
    kw.update(_style_from(states, present))
    return PromptSpec(**kw)


def caption_from_trajectory(traj: ws.VideoTrajectory, a_min=ws.PRESENCE) -> PromptSpec:
    """Infer the dominant dimension of an (oracle) trajectory and its parameters.

    Rules are tried in order: a rigid shared constant drift of two or more
    objects is camera motion; a constant downward acceleration of slot 0 is
    gravity; axis-locked motion with a preserved pair ordering is a spatial
    relation; otherwise the median per-frame speed separates slow
    instance-preservation scenes from motion scenes (static scenes fall back
    to motion with speed ~0).
    """
    states = traj.states
    present = km.present_at_start(states, a_min)
    if present.size == 0:
        return PromptSpec("motion_rationality", object_count=1, speed=0.0)
    kw = (
        _est_camera(states, present, a_min)
        or _est_gravity(states, present, a_min)
        or _est_spatial(states, present, a_min)
    )
    if kw is None:
        speed = _median_speed(states, a_min)
        n = int(min(present.size, 3))
        if STATIC_SPEED <= speed <= INSTANCE_SPEED_MAX:
            kw = {
                "dimension": "instance_preservation",
                "object_count": n,
                "speed": _clip(speed, *SPEED_RANGE["instance_preservation"]),
            }
        else:
            kw = {"dimension": "motion_rationality", "object_count": n, "speed": _clip(speed, *SPEED_RANGE["motion_rationality"])}
    kw.update(_style_from(states, present))
    return PromptSpec(**kw)


# dataset assembly ----------------------------------------------------------------

class MissingModelError(ValueError):
    pass


SAMPLE_CHUNK = 64


def _sample_latents(model, conds, seeds, sampler):
    out = []
    for i in range(0, len(seeds), SAMPLE_CHUNK):
        out.append(fm.sample_batch(model, conds[i:i + SAMPLE_CHUNK], seeds[i:i + SAMPLE_CHUNK], sampler))
    return np.concatenate(out) if out else np.zeros((0, model.config.latent_dim))


def synthetic_specs(dimensions, count, n_variants, seed):
    """``count`` prompts per the base+variants scheme, round-robin over dimensions."""
    per_dim = [count // len(dimensions) + (i < count % len(dimensions)) for i in range(len(dimensions))]
    specs = []
    for dim, c in zip(dimensions, per_dim):
        if c == 0:
            continue
        n_base = math.ceil(c / (1 + n_variants))
        block = []
        for j, base in enumerate(gen_base_prompts(dim, n_base, derive_seed(seed, "PsVs", dim))):
            block.append(base)
            block.extend(augment(base, n_variants, derive_seed(seed, "aug", dim, j)))
        specs.extend(block[:c])
    return specs


def real_corpus(dimensions, count, seed, tag):
    """Oracle trajectories over mixed dimensions; returns [(spec, traj)]."""
    out = []
    for i in range(count):
        gen = rng("real", seed, tag, i)
        dim = dimensions[int(gen.integers(len(dimensions)))]
        spec = gen_base_prompts(dim, 1, derive_seed(seed, tag, "prompt", i))[0]
        out.append((spec, ws.simulate(spec, derive_seed(seed, tag, "sim", i))))
    return out


def build_dataset(mix: DataMixConfig, model=None, sampler: fm.SamplerConfig | None = None, path=None):
    """Assemble the configured source mix; writes a dataset file when ``path`` is given."""
    sampler = sampler or fm.SamplerConfig()
    needs_model = any(s in mix.include for s in ("PsVs", "PrVs"))
    if needs_model and model is None:
        raise MissingModelError("a model checkpoint is required for PsVs/PrVs sources")
    records = []
    next_id = 0
    if "PsVs" in mix.include:
        specs = synthetic_specs(mix.target_dimensions, int(mix.counts["PsVs"]), mix.n_variants, mix.seed)
        prompts = [Prompt.from_spec(s) for s in specs]
        seeds = [derive_seed(mix.seed, "PsVs-gen", i) for i in range(len(prompts))]
        lat = _sample_latents(model, np.stack([p.cond for p in prompts]), seeds, sampler)
        for p, z, s in zip(prompts, lat, seeds):
            records.append(DatasetRecord(next_id, "PsVs", p, z, None, None, s))
            next_id += 1
    for src in ("PrVs", "PrVr"):
        if src not in mix.include:
            continue
        corpus = real_corpus(mix.real_dimensions, int(mix.counts[src]), mix.seed, src)
        prompts = [Prompt.from_spec(caption_from_trajectory(traj)) for _, traj in corpus]
        reals = [ws.encode(traj) for _, traj in corpus]
        seeds = [derive_seed(mix.seed, f"{src}-gen", i) for i in range(len(corpus))]
        if src == "PrVs":
            lat = _sample_latents(model, np.stack([p.cond for p in prompts]), seeds, sampler)
        else:
            lat = [z.copy() for z in reals]
        for p, z, zr, s in zip(prompts, lat, reals, seeds):
            records.append(DatasetRecord(next_id, src, p, np.asarray(z), zr, None, s))
            next_id += 1
    if path is not None:
        write_dataset(path, records, {"mix": mix.to_dict(), "sampler": asdict(sampler)})
    return records


def write_dataset(path, records, meta=None):
    header = {"format": DATASET_FORMAT, **(meta or {})}
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in sorted(records, key=lambda r: r.id):
            fh.write(rec.to_json() + "\n")


def read_dataset(path):
    """Returns ``(header, records)``."""
    with open(path) as fh:
        first = fh.readline()
        if not first:
            raise ValueError(f"{path}: empty dataset file")
        header = json.loads(first)
        if header.get("format") != DATASET_FORMAT:
            raise ValueError(f"{path}: unsupported dataset format {header.get('format')!r}")
        records = [DatasetRecord.from_json(line) for line in fh if line.strip()]
    return header, records
