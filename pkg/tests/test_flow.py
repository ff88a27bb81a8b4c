import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowprior.flow import (CHECKPOINT_MAGIC, CouplingLayer, FlowModel, alternating_mask, checkpoint_from_bytes,
                            checkpoint_load, checkpoint_save, coupling_forward, coupling_inverse,
                            flow_find_mode, flow_grad_logprob_x, flow_grad_z, flow_log_prob, flow_param_grad,
                            flow_sample)
from flowprior.numkit import FormatError, InvalidArgument, NumericError, finite_diff_grad, make_rng

from helpers import fd_jacobian, random_flow, rel


def constant_layer(s_value, t_value, s_clamp=3.0):
    """d=2 coupling, first coordinate passes through, conditioner output pinned to constants."""
    layer = CouplingLayer([1, 0], hidden=4, s_clamp=s_clamp)
    flat = np.zeros(layer.n_params)
    layer.bind(flat)
    layer.b3[0] = math.atanh(s_value / s_clamp)
    layer.b3[1] = t_value
    return layer


def test_zero_conditioner_is_identity():
    layer = constant_layer(0.0, 0.0)
    y, ld = coupling_forward(layer, np.array([0.7, -1.2]))
    np.testing.assert_array_equal(y, [0.7, -1.2])
    assert ld == 0.0


def test_pure_shift():
    layer = constant_layer(0.0, 1.0)
    y, ld = coupling_forward(layer, np.array([1.0, 2.0]))
    np.testing.assert_allclose(y, [1.0, 3.0], atol=1e-15)
    assert ld == 0.0
    x, ild = coupling_inverse(layer, y)
    np.testing.assert_allclose(x, [1.0, 2.0], atol=1e-15)


def test_pure_scale():
    layer = constant_layer(math.log(2.0), 0.0)
    y, ld = coupling_forward(layer, np.array([1.0, 2.0]))
    np.testing.assert_allclose(y, [1.0, 4.0], atol=1e-14)
    assert ld == pytest.approx(0.693147, abs=1e-6)
    x, ild = coupling_inverse(layer, y)
    np.testing.assert_allclose(x, [1.0, 2.0], atol=1e-14)
    assert ild == pytest.approx(-math.log(2.0), abs=1e-14)


def test_alternating_masks():
    np.testing.assert_array_equal(alternating_mask(4, 0), [1, 0, 1, 0])
    np.testing.assert_array_equal(alternating_mask(4, 1), [0, 1, 0, 1])


def test_mask_validation():
    with pytest.raises(InvalidArgument):
        CouplingLayer([1, 1], 4)
    with pytest.raises(InvalidArgument):
        CouplingLayer([1, 0.5], 4)


def test_scale_is_clamped():
    layer = CouplingLayer([1, 0], hidden=4, s_clamp=2.0)
    layer.bind(np.zeros(layer.n_params))
    layer.b3[0] = 1e6
    _, ld = coupling_forward(layer, np.array([0.0, 1.0]))
    assert ld == pytest.approx(2.0)


def test_nonfinite_conditioner_names_layer():
    layer = CouplingLayer([1, 0], hidden=4, index=3)
    layer.bind(np.zeros(layer.n_params))
    layer.b3[1] = np.inf
    with pytest.raises(NumericError, match="layer 3"):
        coupling_forward(layer, np.array([0.0, 1.0]))


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 7), st.integers(0, 10_000))
def test_round_trip_property(d, seed):
    model = random_flow(d, layers=3, hidden=8, seed=seed)
    z = make_rng(seed).standard_normal((5, d))
    x, ld = model.forward(z)
    z2, ild = model.inverse(x)
    np.testing.assert_allclose(z2, z, atol=1e-10)
    np.testing.assert_allclose(ld, -ild, atol=1e-10)


def test_round_trip_1000_points():
    model = random_flow(6, layers=4, hidden=32, seed=1)
    z = make_rng(2).standard_normal((1000, 6)) * 2.0
    x, _ = model.forward(z)
    assert np.max(np.abs(model.inverse(x)[0] - z)) <= 1e-8


@pytest.mark.parametrize("d", [2, 4, 6])
def test_logdet_matches_brute_force_jacobian(d):
    model = random_flow(d, layers=4, hidden=16, seed=d)
    for x in make_rng(d).standard_normal((5, d)):
        jac = fd_jacobian(lambda v: model.inverse(v)[0], x, h=1e-6)
        sign, logabs = np.linalg.slogdet(jac)
        assert sign > 0
        base = -0.5 * d * math.log(2 * math.pi) - 0.5 * float(model.inverse(x)[0] @ model.inverse(x)[0])
        assert rel(model.log_prob(x), base + logabs) <= 1e-4
        assert abs(model.inverse(x)[1] - logabs) <= 1e-6


def test_identity_model_log_prob():
    assert flow_log_prob(FlowModel(2, 2, 8), np.zeros(2)) == pytest.approx(-math.log(2 * math.pi), abs=1e-12)
    assert flow_log_prob(FlowModel(2, 2, 8), np.zeros(2)) == pytest.approx(-1.837877, abs=1e-6)
    assert flow_log_prob(FlowModel(1, 0), np.array([1.0])) == pytest.approx(-1.418939, abs=1e-6)


def test_identity_model_samples():
    x = flow_sample(FlowModel(2, 2, 8, rng=make_rng(0)), make_rng(3), 10_000)
    assert np.all(np.abs(x.mean(0)) < 0.05)
    assert np.all(np.abs(x.std(0) - 1) < 0.05)


def test_sample_determinism_and_round_trip():
    model = random_flow(4, seed=5)
    a = flow_sample(model, make_rng(9), 1)
    b = flow_sample(model, make_rng(9), 1)
    np.testing.assert_array_equal(a, b)
    many = flow_sample(model, make_rng(9), 200)
    z, _ = model.inverse(many)
    x, _ = model.forward(z)
    np.testing.assert_allclose(x, many, atol=1e-8)


def test_density_normalizes(mixture_flow):
    model, _ = mixture_flow
    grid = np.linspace(-6, 6, 401)
    h = grid[1] - grid[0]
    xx, yy = np.meshgrid(grid, grid)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    mass = float(np.exp(model.log_prob(pts)).sum() * h * h)
    assert 0.95 <= mass <= 1.05


def test_vjp_identity_model_passes_upstream():
    u = np.array([0.3, -1.0, 2.0, 0.5])
    np.testing.assert_array_equal(flow_grad_z(FlowModel(4, 2, 8), np.ones(4), u), u)


@pytest.mark.parametrize("seed", range(5))
def test_vjp_matches_finite_differences(seed):
    model = random_flow(5, layers=3, seed=seed)
    rng = make_rng([seed, 1])
    z, u = rng.standard_normal(5), rng.standard_normal(5)
    fd = finite_diff_grad(lambda v: float(u @ model.forward(v)[0]), z)
    assert rel(flow_grad_z(model, z, u), fd) <= 1e-4


def test_vjp_linear_in_upstream():
    model = random_flow(3, seed=2)
    z, u = np.array([0.1, 0.2, -0.3]), np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(flow_grad_z(model, z, 3.5 * u), 3.5 * flow_grad_z(model, z, u), atol=1e-10)


def test_identity_model_score():
    x = np.array([0.4, -1.1, 2.0])
    np.testing.assert_allclose(flow_grad_logprob_x(FlowModel(3, 2, 8), x), -x, atol=1e-15)


def test_score_matches_fd_on_trained(mixture_flow):
    model, _ = mixture_flow
    for x in make_rng(4).standard_normal((5, 2)) * 2:
        fd = finite_diff_grad(lambda v: float(model.log_prob(v)), x)
        assert rel(flow_grad_logprob_x(model, x), fd) <= 1e-4


def test_mode_has_small_gradient(mixture_flow):
    model, _ = mixture_flow
    x, gnorm, _ = flow_find_mode(model, np.array([1.8, 0.1]), tol=1e-6)
    assert gnorm <= 1e-4
    assert np.linalg.norm(flow_grad_logprob_x(model, x)) <= 1e-4
    assert abs(x[0] - 2.0) < 0.5


def test_param_grad_per_parameter_fd():
    model = random_flow(2, layers=2, hidden=6, seed=3)
    batch = make_rng(8).standard_normal((7, 2))
    grad = flow_param_grad(model, batch)
    base = model.params.copy()

    def nll(p):
        model.params[...] = p
        out = -float(np.mean(model.log_prob(batch)))
        model.params[...] = base
        return out

    fd = finite_diff_grad(nll, base)
    assert rel(grad, fd) <= 1e-4
    # each parameter individually, skipping ones with negligible gradient
    big = np.abs(fd) > 1e-3
    assert np.max(np.abs(grad[big] - fd[big]) / np.abs(fd[big])) <= 1e-4


def test_param_grad_empty_batch():
    with pytest.raises(InvalidArgument):
        flow_param_grad(FlowModel(2, 2, 4), np.zeros((0, 2)))


def test_param_grad_duplicate_rows():
    model = random_flow(3, seed=4)
    row = np.array([[0.2, -0.5, 1.0]])
    np.testing.assert_allclose(flow_param_grad(model, np.repeat(row, 4, axis=0)),
                               flow_param_grad(model, row), atol=1e-13)


def test_checkpoint_round_trip(tmp_path):
    model = random_flow(4, layers=3, hidden=8, seed=6)
    path = tmp_path / "m.nfck"
    checkpoint_save(model, path)
    loaded = checkpoint_load(path)
    x = make_rng(1).standard_normal((10, 4))
    np.testing.assert_array_equal(loaded.log_prob(x), model.log_prob(x))
    np.testing.assert_array_equal(loaded.params, model.params)
    assert loaded.s_clamp == model.s_clamp
    checkpoint_save(loaded, tmp_path / "again.nfck")
    assert path.read_bytes() == (tmp_path / "again.nfck").read_bytes()


def test_checkpoint_rejects_corruption(tmp_path):
    path = tmp_path / "m.nfck"
    checkpoint_save(random_flow(2, seed=1), path)
    blob = path.read_bytes()
    with pytest.raises(FormatError) as err:
        checkpoint_from_bytes(b"XXXX" + blob[4:])
    assert err.value.offset == 0
    with pytest.raises(FormatError, match="version"):
        checkpoint_from_bytes(CHECKPOINT_MAGIC + (2).to_bytes(4, "little") + blob[8:])
    with pytest.raises(FormatError):
        checkpoint_from_bytes(blob[:-3])
    with pytest.raises(FormatError):
        checkpoint_from_bytes(blob + b"\0")


def test_pickled_model_keeps_views():
    import pickle
    model = random_flow(3, seed=2)
    clone = pickle.loads(pickle.dumps(model))
    clone.params[...] = 0.0
    np.testing.assert_allclose(clone.log_prob(np.zeros(3)), -1.5 * math.log(2 * math.pi))
