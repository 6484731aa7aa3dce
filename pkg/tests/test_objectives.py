import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import small_config
from okaf.errors import NumericError, ParameterError, ShapeError
from okaf.model import ModalityTag, Mode, UnifiedModel, build_sequence
from okaf.objectives import (LossWeights, combined_loss, euler_integrate, euler_sample, euler_sample_latent,
                             flow_loss, make_flow_pair, ntp_loss, velocity_field)
from okaf.tensor import Tensor, grad_check


def test_ntp_examples():
    assert ntp_loss(Tensor(np.zeros((3, 4))), [0, 1, 2]).item() == pytest.approx(math.log(4), abs=1e-15)
    logits = np.zeros((2, 5))
    logits[[0, 1], [3, 1]] = 30.0
    assert ntp_loss(Tensor(logits), [3, 1]).item() < 1e-9


def test_ntp_scalar_oracle():
    # -log softmax_0([1, 0]) and -log softmax_0([0, 2]) written out by hand
    a = -(1.0 - math.log(math.exp(1.0) + 1.0))
    b = -(0.0 - math.log(1.0 + math.exp(2.0)))
    got = ntp_loss(Tensor([[1.0, 0.0], [0.0, 2.0]]), [0, 0]).item()
    assert abs(got - 0.5 * (a + b)) <= 1e-12


def test_ntp_ignore_and_range():
    logits = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    full = ntp_loss(Tensor(logits.data[:2]), [1, 2]).item()
    assert ntp_loss(logits, [1, 2, 0], ignore=[False, False, True]).item() == pytest.approx(full)
    with pytest.raises(IndexError):
        ntp_loss(logits, [0, 4, 1])


def test_flow_pair_examples():
    p = make_flow_pair(0.0, 0.25, z1=1.0)
    assert p.z_t == 0.25 and p.v_target == 1.0
    z0 = np.random.default_rng(0).normal(size=(3, 2))
    assert np.array_equal(make_flow_pair(z0, 0.0, noise_seed=4).z_t, z0)
    one = make_flow_pair(z0, 1.0, noise_seed=4)
    assert np.array_equal(one.z_t, one.z1)
    with pytest.raises(ParameterError):
        make_flow_pair(z0, 1.5)


def test_flow_pair_noise_is_seeded():
    z0 = np.zeros(5)
    assert np.array_equal(make_flow_pair(z0, 0.3, 11).z1, make_flow_pair(z0, 0.3, 11).z1)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 0.5), st.sampled_from([0.5, 0.25, 0.125]), st.integers(0, 2**31 - 1))
def test_interpolant_is_affine(t, h, seed):
    rng = np.random.default_rng(seed)
    z0, z1 = rng.integers(-8, 8, size=4).astype(float), rng.integers(-8, 8, size=4).astype(float)
    a, b = make_flow_pair(z0, t, z1=z1), make_flow_pair(z0, t + h, z1=z1)
    np.testing.assert_allclose((b.z_t - a.z_t) / h, a.v_target, rtol=0, atol=1e-12)


def test_flow_loss_examples_and_gradient():
    rng = np.random.default_rng(1)
    target = rng.normal(size=(4, 3))
    assert flow_loss(Tensor(target), target).item() == 0.0
    assert flow_loss(Tensor(target + 1.0), target).item() == pytest.approx(1.0)
    v = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    flow_loss(v, target).backward()
    np.testing.assert_allclose(v.grad, 2 * (v.data - target) / 12, rtol=1e-14)
    assert grad_check(lambda: flow_loss(v, target), v) < 1e-8
    with pytest.raises(ShapeError):
        flow_loss(v, target[:2])


def test_combined_loss_examples():
    assert combined_loss(2.0, 1.0, LossWeights(1.0, 4.0)) == 6.0
    assert combined_loss(4.0, 1.0, LossWeights()) == 2.0
    assert combined_loss(3.0, 9.0, LossWeights(1.0, 0.0)) == 3.0
    assert LossWeights(1.0, 4.0).alpha == 4.0 and LossWeights().alpha == 4.0
    with pytest.raises(NumericError):
        combined_loss(float("nan"), 1.0, LossWeights())
    with pytest.raises(ParameterError):
        LossWeights(0.0, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 5), st.floats(0, 5), st.floats(0, 3))
def test_combined_loss_is_monotone(a, b, wc, wm, bump):
    if wc == 0 and wm == 0:
        return
    w = LossWeights(wc, wm)
    base = combined_loss(a, b, w)
    assert combined_loss(a + bump, b, w) >= base and combined_loss(a, b + bump, w) >= base


def _generate_batch(model):
    rng = np.random.default_rng(0)
    z = Tensor(rng.normal(size=(4, model.config.latent_dim)))
    seq = build_sequence([1, 5, 6, 3], None, z, Mode.GENERATE, flow_time=0.4)
    hidden = model.forward(seq)
    v = model.predict_velocity(hidden, seq.positions_of(ModalityTag.VAE), 0.4)
    return seq, flow_loss(v, rng.normal(size=v.shape))


def test_no_text_loss_means_no_language_head_gradient():
    m = UnifiedModel(small_config())
    _, l_flow = _generate_batch(m)
    combined_loss(0.0, l_flow, LossWeights(0.0, 1.0)).backward()
    assert m.params["lm_head.w"].grad is None or not m.params["lm_head.w"].grad.any()


def test_understanding_expert_gets_no_gradient_when_latents_cannot_read_text():
    m = UnifiedModel(small_config())
    rng = np.random.default_rng(0)
    z = Tensor(rng.normal(size=(4, 4)))
    seq = build_sequence([1, 5, 6], None, z, Mode.GENERATE, flow_time=0.4)
    seq.attn_mask[:] = np.eye(len(seq), dtype=bool)
    v = m.predict_velocity(m.forward(seq), seq.positions_of(ModalityTag.VAE), 0.4)
    combined_loss(0.0, flow_loss(v, rng.normal(size=v.shape)), LossWeights(0.0, 1.0)).backward()
    for name in m.names("understanding"):
        g = m.params[name].grad
        assert g is None or not g.any(), name


@pytest.mark.parametrize("steps", [1, 5, 50])
def test_euler_on_constant_field(steps):
    z1 = np.random.default_rng(steps).normal(size=(3, 2))
    c0 = np.array([0.3, -1.7])
    np.testing.assert_allclose(euler_integrate(lambda z, t: np.broadcast_to(c0, z.shape), z1, steps),
                               z1 - c0, rtol=0, atol=1e-12)


def test_single_step_equals_one_field_evaluation():
    m = UnifiedModel(small_config())
    field = velocity_field(m, [1, 2])
    z1 = np.random.default_rng(0).standard_normal((4, 4))
    np.testing.assert_array_equal(euler_sample_latent(m, [1, 2], 4, steps=1, seed=0), z1 - field(z1, 1.0))


def test_sampler_is_bit_deterministic_and_validates():
    m = UnifiedModel(small_config())
    a = euler_sample(m, [1, 2], (8, 8), steps=3, seed=7)
    b = euler_sample(m, [1, 2], (8, 8), steps=3, seed=7)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    with pytest.raises(ParameterError):
        euler_sample(m, [1, 2], (8, 8), steps=0)


def test_non_finite_sampling_names_the_step():
    def field(z, t):
        return np.full_like(z, np.inf if t < 0.7 else 1.0)
    with pytest.raises(NumericError, match="step 2") as err:
        euler_integrate(field, np.zeros(2), 5)
    assert err.value.step == 2
