import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from flowforge import flowmatch as fm
from flowforge import tensorcore as tc
from flowforge import velocitymodel as vm


def expm_sym(a):
    """Matrix exponential of a symmetric matrix via its eigenbasis."""
    lam, v = np.linalg.eigh(a)
    return (v * np.exp(lam)) @ v.T


def linear_field(seed=0, d=6):
    gen = np.random.default_rng(seed)
    m = gen.standard_normal((d, d))
    a = 0.5 * (m + m.T) / np.sqrt(d)
    z0 = gen.standard_normal(d)
    return a, z0, expm_sym(a) @ z0


def test_flow_point_examples():
    p = fm.make_flow_point([0.0, 0.0], [2.0, 4.0], 0.25)
    assert p.zt.tolist() == [0.5, 1.0] and p.vt.tolist() == [2.0, 4.0]
    z0, z1 = np.array([0.1, -3.3]), np.array([7.7, 0.2])
    assert np.array_equal(fm.make_flow_point(z0, z1, 0.0).zt, z0)
    assert np.array_equal(fm.make_flow_point(z0, z1, 1.0).zt, z1)


def test_flow_point_errors():
    with pytest.raises(tc.ShapeError):
        fm.make_flow_point(np.zeros(2), np.zeros(3), 0.5)
    with pytest.raises(ValueError):
        fm.make_flow_point(np.zeros(2), np.zeros(2), 1.5)


def test_batched_flow_point_uses_per_row_t():
    z0, z1 = np.zeros((2, 3)), np.ones((2, 3))
    p = fm.make_flow_point(z0, z1, np.array([0.0, 0.5]))
    assert p.zt[0].tolist() == [0.0] * 3 and p.zt[1].tolist() == [0.5] * 3


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=200, deadline=None)
@given(z0=hnp.arrays(np.float64, 5, elements=finite), z1=hnp.arrays(np.float64, 5, elements=finite),
       t=st.floats(0.0, 1.0))
def test_flow_invariants(z0, z1, t):
    p = fm.make_flow_point(z0, z1, t)
    assert np.array_equal(p.vt, z1 - z0)
    assert np.array_equal(fm.make_flow_point(z0, z1, 0.0).zt, z0)
    assert np.array_equal(fm.make_flow_point(z0, z1, 1.0).zt, z1)
    if 0.0 < t < 1.0:
        np.testing.assert_allclose(p.zt, t * z1 + (1 - t) * z0, rtol=1e-12, atol=1e-6)


def test_fm_loss_examples():
    assert fm.fm_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0])).item() == 0.0
    assert fm.fm_loss(np.array([3.0, 4.0]), np.zeros(2)).item() == 12.5
    with pytest.raises(tc.ShapeError):
        fm.fm_loss(np.zeros(2), np.zeros(3))


def test_fm_loss_gradient():
    target = np.array([0.3, -1.0, 2.0, 0.5])
    pred = np.array([1.0, 1.0, -1.0, 0.0])
    p = tc.leaf(pred)
    g = tc.backward(fm.fm_loss(p, target))[p]
    np.testing.assert_allclose(g, 2 * (pred - target) / 4, rtol=1e-15)
    assert tc.finite_diff_check(lambda w: fm.fm_loss(w, target), pred) < 1e-6


def test_predicted_clean_examples():
    z0, z1 = np.array([2.0, 3.0]), np.array([-1.0, 5.0])
    assert fm.predicted_clean(z1 - z0, z0).value.tolist() == z1.tolist()
    assert fm.predicted_clean(np.zeros(2), z0).value.tolist() == z0.tolist()
    assert fm.predicted_clean(np.ones(2), z0).value.tolist() == [3.0, 4.0]
    with pytest.raises(tc.ShapeError):
        fm.predicted_clean(np.ones(3), z0)


def test_constant_field_single_euler_step():
    c = np.array([0.5, -2.0])
    out = fm.integrate(lambda z, t: c, np.array([1.0, 1.0]), 1)
    assert out.tolist() == [1.5, -1.0]


@pytest.mark.parametrize("steps", [1, 3, 32])
@pytest.mark.parametrize("scheme", ["euler", "heun"])
def test_rectified_oracle_reaches_target(steps, scheme):
    z0, a = np.array([0.2, -1.0, 3.0]), np.array([1.0, 2.0, -0.5])
    out = fm.integrate(lambda z, t: a - z0, z0, steps, scheme)
    np.testing.assert_allclose(out, a, atol=1e-12)


def test_euler_error_halves_from_32_to_64_steps():
    a, z0, exact = linear_field()
    e32 = np.linalg.norm(fm.integrate(lambda z, t: a @ z, z0, 32) - exact)
    e64 = np.linalg.norm(fm.integrate(lambda z, t: a @ z, z0, 64) - exact)
    assert 1.6 <= e32 / e64 <= 2.4


def test_sampler_reports_failing_step():
    with pytest.raises(fm.SamplerError) as info, np.errstate(over="ignore"):
        fm.integrate(lambda z, t: z * 1e200, np.ones(2), 8)
    assert info.value.step >= 1


def test_sample_is_deterministic_and_checks_cond():
    params = vm.init_params(vm.ModelConfig(hidden_dims=(16,), seed=2))
    cfg = fm.SamplerConfig(steps=4, seed=11)
    cond = np.zeros(params.config.cond_dim)
    a, b = fm.sample(params, cond, cfg), fm.sample(params, cond, cfg)
    assert a.tobytes() == b.tobytes()
    assert fm.sample(params, cond, fm.SamplerConfig(steps=4, seed=12)).tobytes() != a.tobytes()
    with pytest.raises(tc.ShapeError):
        fm.sample(params, np.zeros(3), cfg)


def test_sample_batch_matches_single_samples():
    params = vm.init_params(vm.ModelConfig(hidden_dims=(16,), seed=2))
    conds = np.random.default_rng(0).uniform(size=(3, params.config.cond_dim))
    batch = fm.sample_batch(params, conds, [5, 6, 7], fm.SamplerConfig(steps=4))
    for i, s in enumerate([5, 6, 7]):
        np.testing.assert_allclose(batch[i], fm.sample(params, conds[i], fm.SamplerConfig(steps=4, seed=s)),
                                   atol=1e-12)


def test_sampler_config_validation():
    with pytest.raises(ValueError):
        fm.SamplerConfig(steps=0)
    with pytest.raises(ValueError):
        fm.SamplerConfig(scheme="rk4")
