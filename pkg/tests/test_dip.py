import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from scoredistill import dip as dp
from scoredistill import ndgrad as nd
from scoredistill import nn
from scoredistill.cli import datasets as ds
from scoredistill.diffusion import Conditioning, DenoiserMLP, train_denoiser
from scoredistill.sds import SdsConfig, sds_grad


def grads(dip, params, cot=None):
    with nd.precision(np.float64):
        g, x = nd.forward(lambda p: dip.generate(p), {k: np.asarray(v, np.float64) for k, v in params.items()})
        return x.value, g.backward(x, np.ones(x.shape) if cot is None else cot)


def test_identity_zero_and_unit_gradient():
    x, g = grads(dp.IdentityDip((2, 3)), {"theta": np.zeros((2, 3))})
    np.testing.assert_array_equal(x, 0.0)
    np.testing.assert_array_equal(g["theta"], 1.0)
    np.testing.assert_array_equal(dp.identity_generate({"theta": np.zeros(3)}).value, 0.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2, 3), elements=st.floats(-50, 50)))
def test_mirror_is_exactly_symmetric(theta):
    x = dp.MirrorDip((3, 4, 3)).generate({"theta": nd.Tensor(theta)}).value
    assert np.array_equal(x, x[:, ::-1])


def test_mirror_vjp_folds_to_half():
    cot = np.zeros((2, 4, 1))
    cot[1, 0, 0] = 1.0
    _, g = grads(dp.MirrorDip((2, 4, 1)), {"theta": np.zeros((2, 2, 1))}, cot)
    expect = np.zeros((2, 2, 1))
    expect[1, 1, 0] = 1.0
    np.testing.assert_array_equal(g["theta"], expect)


def test_mirror_width_two():
    col = np.array([[[0.3]], [[-0.7]]])
    x = dp.mirror_generate(col).value
    np.testing.assert_array_equal(x, np.concatenate([col, col], axis=1))


def test_mirror_rejects_odd_width():
    with pytest.raises(dp.ConfigurationError):
        dp.MirrorDip((4, 5, 3))


def test_coordmlp_zero_weights_is_grey():
    d = dp.CoordMlpDip(resolution=(6, 6), width=8)
    p = {k: np.zeros(v) for k, v in d.param_shapes().items()}
    np.testing.assert_array_equal(d.generate(nn.as_tensors(p)).value, 0.5)


def test_coordmlp_resolution_consistency():
    d = dp.CoordMlpDip(resolution=(32, 32), width=32, n_freqs=3)
    p = nn.as_tensors(d.init_params(np.random.default_rng(0)))
    lo = d.generate(p).value
    hi = d.generate(p, aux=(64, 64)).value
    down = hi.reshape(32, 2, 32, 2, 3).mean(axis=(1, 3))
    assert np.abs(down - lo).mean() < 0.05


def test_coordmlp_gradcheck():
    d = dp.CoordMlpDip(resolution=(8, 8), width=8, layers=3, n_freqs=2)
    rep = nd.check_gradient(lambda p: d.generate(p), d.init_params(np.random.default_rng(1)), tol=1e-4)
    assert rep.passed, str(rep)


def test_model_space_maps_unit_interval():
    inner = dp.IdentityDip((2,), squash=True)
    x = dp.ModelSpaceDip(inner).generate({"theta": nd.Tensor(np.array([-40.0, 40.0]))}).value
    np.testing.assert_allclose(x, [-1.0, 1.0], atol=1e-6)
    np.testing.assert_allclose(dp.to_unit(np.array([-1.0, 0.0, 1.0])), [0.0, 0.5, 1.0])


@pytest.fixture(scope="module")
def pattern_model():
    m = DenoiserMLP.create((8, 8, 3), ds.pattern_vocab(), nd.make_rng(0, "pat"), width=64, blocks=1)

    def sample(rng):
        x, conds = ds.pattern_batch(rng, 32, 8)
        return x, conds

    train_denoiser(m, sample, 400, 2e-3, 0, lr_final=1e-4)
    return m


def test_sds_with_trained_denoiser_stays_bounded_and_fits(pattern_model):
    dip = dp.ModelSpaceDip(dp.IdentityDip((8, 8, 3), squash=True))
    params = dip.init_params(np.random.default_rng(2))
    opt = nn.Adam()
    norms = []
    cfg = SdsConfig(omega=3.0, batch=4)
    for k in range(300):
        rep = sds_grad(pattern_model, dip, params, Conditioning("stripes"), cfg, nd.make_rng(0, "dip", k))
        params = opt.update(params, rep.gradient, 0.05)
        norms.append(np.mean(rep.residual_norm ** 2))
    x = dip.generate(nn.as_tensors(params)).value
    assert np.all(np.isfinite(x)) and np.all(np.abs(x) <= 1.0)
    assert np.mean(norms[-50:]) < np.mean(norms[:50])
