import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from flowforge import promptengine as pe
from flowforge import rewardlab as rl
from flowforge import worldsim as ws
from flowforge.dims import DIMENSIONS, LATENT_DIM, PromptSpec


def test_gravity_second_differences_equal_g_before_bounce():
    spec = PromptSpec("mechanics_gravity", object_count=1, g=0.02)
    y = ws.simulate(spec, 0).y[:, 0]
    d2 = y[2:] - 2 * y[1:-1] + y[:-2]
    first_bounce = int(np.argmax(d2 > 0))
    assert first_bounce >= 3
    np.testing.assert_allclose(d2[:first_bounce - 1], -0.02, atol=1e-9)


def test_camera_east_moves_every_object_right():
    spec = PromptSpec("camera_motion", object_count=3, speed=0.02, direction="E")
    s = ws.simulate(spec, 4).states
    d = s[1:, :, :2] - s[:-1, :, :2]
    assert np.all(d[..., 0] > 0) and np.all(np.abs(d[..., 1]) < 1e-9)


@pytest.mark.parametrize("dim", DIMENSIONS)
def test_simulate_deterministic_and_in_range(dim):
    spec = pe.gen_base_prompts(dim, 1, 3)[0]
    a, b = ws.simulate(spec, 9), ws.simulate(spec, 9)
    assert a.states.tobytes() == b.states.tobytes()
    s = a.states
    assert s.shape == (16, 3, 4)
    assert np.all((s[..., :2] >= 0) & (s[..., :2] <= 1))
    assert np.all((s[..., 2] > 0) & (s[..., 2] <= 0.25)) and np.all((s[..., 3] >= 0) & (s[..., 3] <= 1))
    absent = s[:, spec.object_count:, 3]
    assert np.all(absent == 0)


def test_defects_rate_zero_is_identity():
    traj = ws.simulate(pe.gen_base_prompts("motion_rationality", 1, 0)[0], 0)
    out = ws.inject_defects(traj, ws.DefectConfig(rate=0.0))
    assert out.states.tobytes() == traj.states.tobytes()


def test_vanish_zeroes_exactly_one_object_at_the_end():
    for seed in range(20):
        spec = pe.gen_base_prompts("instance_preservation", 1, seed)[0].with_(object_count=3)
        traj = ws.simulate(spec, seed)
        out = ws.inject_defects(traj, ws.DefectConfig(rate=1.0, kinds=("vanish",), seed=seed))
        assert int(np.sum(out.states[-1, :, 3] == 0)) == 1


def test_teleport_breaks_motion_rationality():
    cfg = rl.ScorerConfig()
    for seed in range(20):
        spec = pe.gen_base_prompts("motion_rationality", 1, seed)[0]
        traj = ws.simulate(spec, seed)
        out = ws.inject_defects(traj, ws.DefectConfig(rate=1.0, kinds=("teleport",), magnitude=0.3, seed=seed))
        assert rl.score_hard("motion_rationality", out, spec, cfg).value < 1.0


def _dimension_mean(dim, rate, kinds):
    vals = []
    for seed in range(100):
        spec = pe.gen_base_prompts(dim, 1, seed)[0]
        traj = ws.inject_defects(ws.simulate(spec, seed), ws.DefectConfig(rate=rate, kinds=kinds, seed=seed), seed)
        s = rl.score_hard(dim, traj, spec)
        vals.append(s.value if s.valid else 0.0)
    return float(np.mean(vals))


@pytest.mark.parametrize("dim,kinds", [
    ("motion_rationality", ("teleport",)),
    ("instance_preservation", ("vanish",)),
    ("mechanics_gravity", ("wrong_gravity",)),
    ("dynamic_spatial", ("shuffle_order",)),
    ("camera_motion", ("drift_camera",)),
])
def test_rate_one_defects_lower_the_matching_score(dim, kinds):
    assert _dimension_mean(dim, 1.0, kinds) < _dimension_mean(dim, 0.0, kinds)


def test_defect_config_validation():
    with pytest.raises(ValueError):
        ws.DefectConfig(rate=1.5)
    with pytest.raises(ValueError):
        ws.DefectConfig(kinds=("melt",))


def test_codec_examples():
    zero = ws.decode(np.zeros(LATENT_DIM)).states
    assert np.all(zero[..., 0] == 0.5) and np.all(zero[..., 1] == 0.5)
    assert np.all(zero[..., 2] == 0.125) and np.all(zero[..., 3] == 0.5)
    s = np.tile(np.array(ws.ABSENT), (16, 3, 1))
    s[0, 0, 0] = 0.5
    assert ws.encode(ws.VideoTrajectory(s))[0] == 0.0
    with pytest.raises(ValueError):
        ws.decode(np.zeros(10))


in_range = hnp.arrays(np.float64, LATENT_DIM, elements=st.floats(-0.99, 0.99, allow_nan=False))


@settings(max_examples=100, deadline=None)
@given(z=in_range)
def test_encode_decode_round_trip(z):
    # affine maps in float64: identity up to one rounding each way
    np.testing.assert_allclose(ws.encode(ws.decode(z)), z, rtol=0, atol=4.5e-16)


@settings(max_examples=50, deadline=None)
@given(z=hnp.arrays(np.float64, LATENT_DIM, elements=st.floats(-1e6, 1e6, allow_nan=False)))
def test_decode_is_total(z):
    s = ws.decode(z).states
    assert np.all(np.isfinite(s)) and np.all((s[..., 3] >= 0) & (s[..., 3] <= 1))


@pytest.mark.parametrize("dim", DIMENSIONS)
def test_oracle_latents_round_trip_exactly_in_trajectory_space(dim):
    spec = pe.gen_base_prompts(dim, 1, 5)[0]
    traj = ws.simulate(spec, 5)
    np.testing.assert_allclose(ws.decode(ws.encode(traj)).states, traj.states, rtol=0, atol=1e-15)


def test_render_examples(tmp_path):
    s = np.tile(np.array(ws.ABSENT), (16, 3, 1))
    empty = ws.VideoTrajectory(s)
    assert not ws.render_frame(empty, 0, 16).any()
    s2 = s.copy()
    s2[:, 0] = (0.5, 0.5, 0.1, 1.0)
    img = ws.render_frame(ws.VideoTrajectory(s2), 0, 17)
    assert np.unravel_index(np.argmax(img), img.shape) == (8, 8)
    assert ws.render_frame(ws.VideoTrajectory(s2), 3, 17).tobytes() == img.tobytes()
    with pytest.raises(IndexError):
        ws.render_frame(empty, 16)
    with pytest.raises(ValueError):
        ws.render_frame(empty, 0, 4)
    paths = ws.export_frames(ws.VideoTrajectory(s2), tmp_path / "f", 8)
    assert len(paths) == 16 and paths[0].endswith("frame_000.pgm")
    assert open(paths[0], "rb").read().startswith(b"P5\n8 8\n255\n")
