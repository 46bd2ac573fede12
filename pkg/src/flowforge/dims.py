"""Evaluation dimensions, their parameter ranges and the PromptSpec record."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

DIMENSIONS = (
    "motion_rationality",
    "instance_preservation",
    "mechanics_gravity",
    "dynamic_spatial",
    "camera_motion",
)

T_FRAMES = 16
K_OBJECTS = 3
FIELDS = 4  # x, y, r, a
LATENT_DIM = T_FRAMES * K_OBJECTS * FIELDS
COND_DIM = len(DIMENSIONS) + 8

# admissible ranges (also used for min-max normalisation)
SPEED_RANGE = {
    "motion_rationality": (0.0, 0.04),
    "instance_preservation": (0.003, 0.01),
    "dynamic_spatial": (0.01, 0.03),
    "camera_motion": (0.01, 0.04),
}
# ranges prompts are drawn from; motion excludes near-static scenes
GEN_SPEED_RANGE = {**SPEED_RANGE, "motion_rationality": (0.015, 0.04)}
GRAVITY_RANGE = (0.005, 0.05)
RADIUS_RANGE = (0.03, 0.07)
INTENSITY_RANGE = (0.6, 1.0)
MIN_OBJECTS = {"dynamic_spatial": 2, "camera_motion": 2}

COMPASS = {
    "E": (1.0, 0.0),
    "NE": (np.sqrt(0.5), np.sqrt(0.5)),
    "N": (0.0, 1.0),
    "NW": (-np.sqrt(0.5), np.sqrt(0.5)),
    "W": (-1.0, 0.0),
    "SW": (-np.sqrt(0.5), -np.sqrt(0.5)),
    "S": (0.0, -1.0),
    "SE": (np.sqrt(0.5), -np.sqrt(0.5)),
}
RELATIONS = ("left_of", "right_of", "above", "below")
PAIRS = ((0, 1), (0, 2), (1, 2))


@dataclass(frozen=True)
class PromptSpec:
    """Structured prompt: one dimension tag plus fixed parameter slots.

    ``speed``, ``g``, ``direction``, ``relation`` and ``pair`` are the
    dimension-critical slots (unused ones keep their neutral defaults);
    ``radii``, ``intensities`` and ``layout_seed`` are style-only.
    """

    dimension: str
    object_count: int = 1
    speed: float = 0.0
    g: float = 0.0
    direction: str = ""
    relation: str = ""
    pair: tuple = (0, 1)
    radii: tuple = (0.05, 0.05, 0.05)
    intensities: tuple = (0.8, 0.8, 0.8)
    layout_seed: int = 0
    variant_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "pair", tuple(int(p) for p in self.pair))
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        object.__setattr__(self, "intensities", tuple(float(a) for a in self.intensities))
        validate_spec(self)

    def with_(self, **kw):
        return replace(self, **kw)

    def critical(self):
        """Dimension-critical parameters (unchanged by augmentation)."""
        return (self.dimension, self.object_count, self.speed, self.g, self.direction, self.relation, self.pair)

    def to_dict(self):
        return {
            "dimension": self.dimension,
            "object_count": self.object_count,
            "speed": self.speed,
            "g": self.g,
            "direction": self.direction,
            "relation": self.relation,
            "pair": list(self.pair),
            "radii": list(self.radii),
            "intensities": list(self.intensities),
            "layout_seed": self.layout_seed,
            "variant_id": self.variant_id,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{**d, "pair": tuple(d["pair"]), "radii": tuple(d["radii"]), "intensities": tuple(d["intensities"])})


def validate_spec(spec: PromptSpec):
    d = spec.dimension
    if d not in DIMENSIONS:
        raise ValueError(f"unknown dimension {d!r}")
    if spec.object_count not in (1, 2, 3) or spec.object_count < MIN_OBJECTS.get(d, 1):
        raise ValueError(f"{d}: object_count {spec.object_count} out of range")
    if len(spec.radii) != K_OBJECTS or len(spec.intensities) != K_OBJECTS:
        raise ValueError("radii/intensities need one entry per object slot")
    if any(not 0 < r <= 0.25 for r in spec.radii) or any(not 0 <= a <= 1 for a in spec.intensities):
        raise ValueError("style slots out of range")
    if d in SPEED_RANGE:
        lo, hi = SPEED_RANGE[d]
        if not lo - 1e-12 <= spec.speed <= hi + 1e-12:
            raise ValueError(f"{d}: speed {spec.speed} outside [{lo}, {hi}]")
    if d == "mechanics_gravity" and not GRAVITY_RANGE[0] - 1e-12 <= spec.g <= GRAVITY_RANGE[1] + 1e-12:
        raise ValueError(f"gravity g {spec.g} outside {GRAVITY_RANGE}")
    if d == "camera_motion" and spec.direction not in COMPASS:
        raise ValueError(f"unknown compass direction {spec.direction!r}")
    if d == "dynamic_spatial":
        if spec.relation not in RELATIONS:
            raise ValueError(f"unknown spatial relation {spec.relation!r}")
        if spec.pair not in PAIRS or max(spec.pair) >= spec.object_count:
            raise ValueError(f"object pair {spec.pair} invalid for {spec.object_count} objects")


def norm_speed(dimension, speed):
    lo, hi = SPEED_RANGE[dimension]
    return (speed - lo) / (hi - lo)


def norm_g(g):
    lo, hi = GRAVITY_RANGE
    return (g - lo) / (hi - lo)


@dataclass(frozen=True)
class RewardScore:
    """Scalar agreement score in [0, 1]; ``valid=False`` means "not scorable"."""

    value: float
    valid: bool = True

    def __post_init__(self):
        if self.valid and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"reward {self.value} outside [0, 1]")

    def to_dict(self):
        return {"value": self.value, "valid": self.valid}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["value"]), bool(d["valid"]))
