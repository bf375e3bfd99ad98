import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scoredistill import ndgrad as nd
from scoredistill.diffusion import (
    COSINE,
    Conditioning,
    DenoiserMLP,
    GaussianMixtureScore,
    Mixture,
    ScheduleRangeError,
    SingularityError,
    T_EVAL_MAX,
    Vocabulary,
    VocabularyError,
    ancestral_sample,
    cfg_guide,
    denoiser_loss,
    diffuse,
    guided_eps,
    schedule_coeffs,
    train_denoiser,
    tweedie_denoise,
)


def test_schedule_endpoints():
    a, s = schedule_coeffs(0.0)
    assert (a, s) == (1.0, 0.0)
    a, s = schedule_coeffs(1.0)
    assert abs(a) < 1e-15 and s == 1.0
    a, s = schedule_coeffs(0.5)
    assert a == pytest.approx(np.sqrt(2) / 2, abs=1e-15)
    assert s == pytest.approx(np.sqrt(2) / 2, abs=1e-15)
    with pytest.raises(ScheduleRangeError):
        schedule_coeffs(1.2)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0))
def test_variance_preserving(t):
    a, s = schedule_coeffs(t)
    assert a * a + s * s == pytest.approx(1.0, abs=1e-12)


def test_diffuse_examples():
    x = np.array([0.3, -1.0])
    eps = np.array([2.0, 5.0])
    np.testing.assert_allclose(diffuse(x, 0.0, eps), x)
    np.testing.assert_allclose(diffuse(np.zeros(2), 1.0, eps), eps, atol=1e-15)
    # (alpha, sigma) = (0.8, 0.6) at t = 2/pi * atan(0.75)
    t = 2 / np.pi * np.arctan2(0.6, 0.8)
    assert diffuse(np.array([1.0]), t, np.array([-1.0]))[0] == pytest.approx(0.2, abs=1e-12)


def test_cfg_guide():
    c, u = np.array([1.0, 2.0]), np.array([0.5, -1.0])
    np.testing.assert_array_equal(cfg_guide(c, u, 0.0), c)
    np.testing.assert_allclose(cfg_guide(c, c, 100.0), c)
    np.testing.assert_allclose(cfg_guide(c, u, 100.0), 101 * c - 100 * u)
    with pytest.raises(ValueError):
        cfg_guide(c, u, -1.0)


def test_tweedie():
    r = np.random.default_rng(0)
    x, eps = r.standard_normal(5), r.standard_normal(5)
    z = diffuse(x, 0.37, eps)
    np.testing.assert_allclose(tweedie_denoise(z, eps, 0.37), x, atol=1e-12)
    a, s = schedule_coeffs(0.6)
    np.testing.assert_allclose(tweedie_denoise(z, s * z, 0.6), a * z, atol=1e-12)
    np.testing.assert_array_equal(tweedie_denoise(z, eps, 0.0), z)
    with pytest.raises(SingularityError):
        tweedie_denoise(z, eps, 1.0)


def test_gmm_unit_gaussian_is_sigma_z():
    gmm = GaussianMixtureScore.single((3,))
    z = np.random.default_rng(1).standard_normal((10, 3))
    for t in (0.1, 0.5, 0.9):
        np.testing.assert_allclose(gmm.predict_eps(z, t), schedule_coeffs(t)[1] * z, atol=1e-12)


def test_gmm_matches_mc_optimal_denoiser():
    # data N(mu, s^2): E[eps | z] is linear in z, so least squares over draws is the MC oracle
    mu, s_ = 1.5, 0.5
    gmm = GaussianMixtureScore.single((1,), mu, s_)
    r = np.random.default_rng(2)
    for t in (0.2, 0.5, 0.8):
        x = mu + s_ * r.standard_normal(100_000)
        eps = r.standard_normal(100_000)
        z = diffuse(x, t, eps)
        coef = np.linalg.lstsq(np.stack([np.ones_like(z), z], 1), eps, rcond=None)[0]
        # query where the draws live (+-2 marginal sd); the regression extrapolates poorly beyond
        zq = z.mean() + z.std() * np.linspace(-2, 2, 11)
        oracle = coef[0] + coef[1] * zq
        err = np.abs(gmm.predict_eps(zq[:, None], t)[:, 0] - oracle).max()
        assert err < 1e-2
        a, sg = schedule_coeffs(t)
        closed = sg * (zq - a * mu) / (a * a * s_ * s_ + sg * sg)
        np.testing.assert_allclose(gmm.predict_eps(zq[:, None], t)[:, 0], closed, atol=1e-12)


def test_gmm_symmetry_axis():
    gmm = GaussianMixtureScore((2,), {None: Mixture([0.5, 0.5], [[2.0, 0.0], [-2.0, 0.0]], [0.3, 0.3])})
    z = np.array([[0.0, 0.7], [0.0, -1.3]])
    assert np.all(gmm.predict_eps(z, 0.4)[:, 0] == 0.0)


def test_gmm_graph_matches_numpy(f64):
    gmm = GaussianMixtureScore((2,), {None: Mixture([0.3, 0.7], [[1.0, -1.0], [-0.5, 2.0]], [0.4, 0.9])})
    z = np.random.default_rng(3).standard_normal((6, 2))
    np.testing.assert_allclose(gmm.predict_eps_graph(nd.Tensor(z), 0.3).value, gmm.predict_eps(z, 0.3), atol=1e-12)


def test_guided_eps_skips_unconditional_when_unused():
    gmm = GaussianMixtureScore.single((1,))
    guided_eps(gmm, np.zeros((1, 1)), 0.5, Conditioning.null(), 100.0)
    assert gmm.calls["predict_eps"] == 1


def test_ancestral_single_step_is_tweedie():
    gmm = GaussianMixtureScore.single((2,), 0.5, 0.8)
    x = ancestral_sample(gmm, Conditioning.null(), 0.0, 1, rng=np.random.default_rng(4), n_samples=3)
    z = np.random.default_rng(4).standard_normal((3, 2))
    np.testing.assert_allclose(x, tweedie_denoise(z, gmm.predict_eps(z, T_EVAL_MAX), T_EVAL_MAX))


def test_ancestral_two_mode_weights():
    mix = GaussianMixtureScore((1,), {None: Mixture([0.5, 0.5], [[2.0], [-2.0]], [0.1, 0.1])})
    x = ancestral_sample(mix, Conditioning.null(), 0.0, 64, rng=np.random.default_rng(5), n_samples=10_000)
    assert abs(np.mean(x > 0) - 0.5) < 0.05
    near = np.minimum(np.abs(x - 2), np.abs(x + 2))
    assert np.median(near) < 0.15


def test_ancestral_rejects_bad_range():
    gmm = GaussianMixtureScore.single((1,))
    with pytest.raises(ValueError):
        ancestral_sample(gmm, Conditioning.null(), 0.0, 0)
    with pytest.raises(ValueError):
        ancestral_sample(gmm, Conditioning.null(), 0.0, 8, tmin=0.5, tmax=0.2)


def _tiny(shape=(2,), vocab=Vocabulary(()), seed=0):
    return DenoiserMLP.create(shape, vocab, np.random.default_rng(seed), width=16, blocks=1, n_freqs=2, d_tag=2,
                              d_view=2)


def test_denoiser_loss_matches_mc():
    m = _tiny()
    x = np.random.default_rng(6).standard_normal((10_000, 2))
    loss, grads = denoiser_loss(m, x, Conditioning.null(), np.random.default_rng(7))
    r = np.random.default_rng(7)
    t = r.uniform(0, 1, 10_000)
    eps = r.standard_normal((10_000, 2))
    z = diffuse(x, t, eps).astype(np.float32)
    ref = np.mean(np.sum((m.predict_eps(z, t) - eps) ** 2, axis=1))
    assert loss == pytest.approx(ref, rel=1e-4)
    assert set(grads) == set(m.params)


class _OracleDenoiser(DenoiserMLP):
    """Predicts eps exactly for data identically zero: z = sigma eps."""

    def apply(self, p, z, t, conds):
        s = schedule_coeffs(np.asarray(t, np.float64))[1]
        s = np.broadcast_to(s, (z.shape[0],))
        return nd.add(nd.mul(z, (1.0 / s)[:, None].astype(np.float32)), nd.mul(nd.sum(p["out.b"]), 0.0))


def test_denoiser_loss_zero_for_oracle():
    base = _tiny()
    m = _OracleDenoiser(base.data_shape, base.vocab, base.params, 16, 1, 2, 2, 2)
    loss, _ = denoiser_loss(m, np.zeros((64, 2)), Conditioning.null(), np.random.default_rng(8))
    assert loss < 1e-9


def test_vocabulary():
    v = Vocabulary(("sphere", "box"))
    assert v.tag_index(None) == 0 and v.tag_index("box") == 2
    with pytest.raises(VocabularyError):
        v.tag_index("teapot")
    tags, views = v.encode([Conditioning("sphere").with_view("back view"), Conditioning.null()])
    np.testing.assert_array_equal(tags, [[0, 1, 0], [1, 0, 0]])
    assert views[0, 3] == 1.0 and views[1, 0] == 1.0


def test_conditioning_changes_prediction():
    m = _tiny(vocab=Vocabulary(("a", "b")))
    z = np.random.default_rng(9).standard_normal((2,))
    assert not np.allclose(m.predict_eps(z, 0.5, Conditioning("a")), m.predict_eps(z, 0.5, Conditioning("b")))


def test_trained_denoiser_learns_gaussian_optimum():
    # unit-Gaussian data: the optimal noise prediction is sigma_t z. The check is
    # relative, so the loss is weighted by 1/sigma_t to spend capacity at small t;
    # any positive weighting leaves the optimum unchanged.
    model = DenoiserMLP.create((2,), Vocabulary(()), nd.make_rng(0, "init"), width=128, blocks=2, n_freqs=8)
    train_denoiser(model, lambda r: (r.standard_normal((1024, 2)), Conditioning.null()), 4000, 2e-3, 0,
                   lr_final=1e-5, weight=lambda t: 1.0 / np.maximum(schedule_coeffs(t)[1], 0.05))
    z = np.random.default_rng(5).standard_normal((4000, 2))
    for t in np.arange(0.1, 1.0, 0.1):
        target = schedule_coeffs(t)[1] * z
        rel = np.linalg.norm(model.predict_eps(z, t) - target) / np.linalg.norm(target)
        assert rel < 0.05, (t, rel)
