import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from scoredistill import ndgrad as nd
from scoredistill import renderer as rd
from scoredistill.diffusion import SingularityError

SMALL = rd.FieldConfig(width=8, blocks=1, L=3, bg_width=8, bg_freqs=2)


def test_ipe_limits():
    mu = np.array([[0.3, -0.2, 0.7]])
    plain = rd.integrated_pos_enc(mu, 0.0, 4)
    s = 2.0 ** np.arange(4)
    x = mu[0][None, :] * s[:, None]
    np.testing.assert_allclose(plain[0], np.concatenate([np.sin(x).ravel(), np.cos(x).ravel()]))
    assert np.abs(rd.integrated_pos_enc(mu, 1e3, 4)).max() < 1e-12
    f = rd.integrated_pos_enc(np.zeros(3), 0.1, 4)
    np.testing.assert_array_equal(f[:12], 0.0)
    np.testing.assert_allclose(f[12:].reshape(4, 3), np.exp(-0.5 * (s * 0.1) ** 2)[:, None] * np.ones(3))


def test_ipe_jacobian_fd():
    mu = np.random.default_rng(0).uniform(-1, 1, (4, 3))
    jac = rd.ipe_jacobian(mu, 0.03, 3)
    h = 1e-6
    for d in range(3):
        e = np.zeros(3)
        e[d] = h
        num = (rd.integrated_pos_enc(mu + e, 0.03, 3) - rd.integrated_pos_enc(mu - e, 0.03, 3)) / (2 * h)
        np.testing.assert_allclose(jac[d], num, atol=1e-6)


def test_zero_field_at_origin():
    p = rd.zero_field_params(SMALL)
    fs = rd.field_eval(p, np.zeros((1, 3)), 0.01, SMALL)
    assert fs.tau.value[0] == pytest.approx(6.0, abs=1e-6)
    np.testing.assert_allclose(fs.rho.value, 0.5)


def test_blob_values():
    assert rd.blob_density(np.array([0.2, 0.0, 0.0])) == pytest.approx(5 * np.exp(-0.5), rel=1e-12)
    assert rd.blob_density(np.array([0.2, 0.0, 0.0])) == pytest.approx(3.0327, abs=1e-4)
    assert rd.blob_density(np.array([10.0, 0.0, 0.0])) < 1e-100


def test_blob_normals_are_radial(f64):
    p = rd.zero_field_params(SMALL)
    mu = np.random.default_rng(1).uniform(-0.8, 0.8, (50, 3))
    n, fb = rd.normals(p, mu, 0.01, SMALL)
    cosine = np.sum(n.value * mu, axis=1) / np.linalg.norm(mu, axis=1)
    assert not fb.any()
    assert cosine.min() > 0.999


def test_constant_density_takes_fallback():
    cfg = rd.FieldConfig(width=8, blocks=1, L=3, blob_scale=0.0)
    n, fb = rd.normals(rd.zero_field_params(cfg), np.array([[0.1, 0.2, 0.3], [0.5, 0.0, 0.0]]), 0.01, cfg)
    assert fb.all()
    np.testing.assert_array_equal(n.value, np.tile(rd.FALLBACK_NORMAL, (2, 1)))


def test_density_gradient_fd(f64):
    p = rd.init_field_params(SMALL, np.random.default_rng(2))
    p = {k: v.astype(np.float64) + 0.05 for k, v in p.items()}
    mu = np.random.default_rng(3).uniform(-0.5, 0.5, (5, 3))
    g = rd.field_eval(p, mu, 0.02, SMALL, with_grad=True).grad_tau.value
    h = 1e-6
    for d in range(3):
        e = np.zeros(3)
        e[d] = h
        num = (rd.field_eval(p, mu + e, 0.02, SMALL).tau.value - rd.field_eval(p, mu - e, 0.02, SMALL).tau.value) / (2 * h)
        np.testing.assert_allclose(g[:, d], num, rtol=1e-4, atol=1e-6)


def test_shade_examples():
    mu = np.zeros((1, 3))
    light = rd.LightSpec(np.array([0.0, 0.0, 2.0]))
    up = np.array([[0.0, 0.0, 1.0]])
    np.testing.assert_allclose(rd.shade(np.ones((1, 3)), up, mu, light, "shaded").value, 1.0, rtol=1e-6)
    rho = np.array([[0.2, 0.4, 0.8]])
    np.testing.assert_allclose(rd.shade(rho, -up, mu, light, "shaded").value, rho * 0.1, rtol=1e-6)
    off = rd.LightSpec(np.array([0.0, 0.0, 2.0]), diffuse=(0.0,) * 3, ambient=(1.0,) * 3)
    np.testing.assert_allclose(rd.shade(rho, up, mu, off, "shaded").value, rho)
    np.testing.assert_allclose(rd.shade(rho, up, mu, light, "textureless").value, 1.0, rtol=1e-6)
    with pytest.raises(SingularityError):
        rd.shade(rho, up, np.array([[0.0, 0.0, 2.0]]), light, "shaded")
    with pytest.raises(ValueError):
        rd.LightSpec(np.zeros(3), diffuse=(1.5, 0, 0))


def test_composite_examples(f64):
    c = rd.composite(np.zeros((1, 3)), np.ones((1, 3, 3)), np.ones((1, 3)), np.array([[0.2, 0.3, 0.4]]))
    np.testing.assert_allclose(c.rgb.value, [[0.2, 0.3, 0.4]])
    assert c.opacity.value[0] == 0.0
    c = rd.composite(np.full((1, 2), np.log(2.0)), np.zeros((1, 2, 3)), np.ones((1, 2)), np.ones((1, 3)))
    np.testing.assert_allclose(c.weights.value, [[0.5, 0.25]], rtol=1e-12)
    assert c.opacity.value[0] == pytest.approx(0.75)
    np.testing.assert_allclose(c.rgb.value, 0.25)            # background weight
    w = rd.compositing_weights(np.array([[1e3, 1.0, 1.0]]), np.ones((1, 3))).value
    assert w[0, 0] == pytest.approx(1.0) and np.all(w[0, 1:] < 1e-300)
    with pytest.raises(ValueError):
        rd.compositing_weights(np.array([[-1.0]]), np.ones((1, 1)))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 6), elements=st.floats(0, 20)), arrays(np.float64, (2, 6), elements=st.floats(0, 1)))
def test_weights_form_a_subprobability(tau, delta):
    with nd.precision(np.float64):
        w = rd.compositing_weights(tau, delta).value
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(-1), 1 - np.exp(-(tau * delta).sum(-1)), atol=1e-12)


@pytest.mark.parametrize("tau_d", [0.1, 1.0, 3.0])
def test_constant_density_transmittance(tau_d, f64):
    near, far = np.array([0.3]), np.array([2.3])
    edges = rd.stratified_edges(near, far, 64, np.random.default_rng(4))
    deltas = np.diff(edges, axis=-1)
    w = rd.compositing_weights(np.full((1, 64), tau_d / 2.0), deltas).value
    assert w.sum() == pytest.approx(1 - np.exp(-tau_d), rel=1e-10)


def test_stratified_edges_cover_interval():
    e = rd.stratified_edges(np.array([0.5, 1.0]), np.array([2.5, 1.5]), 16, np.random.default_rng(5))
    assert np.all(np.diff(e, axis=-1) > 0)
    np.testing.assert_array_equal(e[:, 0], [0.5, 1.0])
    np.testing.assert_array_equal(e[:, -1], [2.5, 1.5])


def test_ray_sphere():
    o = np.array([[0.0, 0.0, 3.0], [0.0, 0.0, 3.0], [0.0, 0.0, 0.0]])
    d = np.array([[0.0, 0.0, -1.0], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    near, far, hit = rd.ray_sphere(o, d, 1.4)
    np.testing.assert_allclose([near[0], far[0]], [1.6, 4.4])
    assert list(hit) == [True, False, True]
    assert near[2] == 0.0 and far[2] == pytest.approx(1.4)


def test_look_at_orthonormal():
    cam = rd.look_at([1.0, -2.0, 0.5], [0, 0, 0], [0, 0, 1], 40.0, 8)
    np.testing.assert_allclose(cam.rotation.T @ cam.rotation, np.eye(3), atol=1e-12)
    _, d = rd.camera_rays(cam)
    centre = d.reshape(8, 8, 3)[3:5, 3:5].mean(axis=(0, 1))
    assert np.dot(centre / np.linalg.norm(centre), -cam.position / np.linalg.norm(cam.position)) > 0.99


def _cam(width=16):
    return rd.look_at([0.0, -1.8, 0.0], [0, 0, 0], [0, 0, 1], 1.0 * width, width)


def test_blob_render_centre_brighter_than_edge():
    cfg = rd.RenderConfig(samples=24, field=SMALL)
    out = rd.render(rd.zero_field_params(SMALL), _cam(), None, "albedo", cfg)
    op = out.opacity.value.reshape(16, 16)
    assert op[7:9, 7:9].min() > op[0].max()
    assert np.all(op <= 1.0)


def test_albedo_equals_shaded_with_ambient_only():
    cfg = rd.RenderConfig(samples=16, field=SMALL)
    p = rd.init_field_params(SMALL, np.random.default_rng(6))
    a = rd.render(p, _cam(8), None, "albedo", cfg).rgb.value
    amb = rd.LightSpec(np.array([0.0, -2.0, 1.0]), diffuse=(0.0,) * 3, ambient=(1.0,) * 3)
    s = rd.render(p, _cam(8), amb, "shaded", cfg).rgb.value
    np.testing.assert_allclose(a, s, atol=1e-6)


def test_render_deterministic_and_textureless_ignores_albedo():
    cfg = rd.RenderConfig(samples=16, field=SMALL)
    p = rd.init_field_params(SMALL, np.random.default_rng(7))
    light = rd.LightSpec(np.array([0.5, -1.5, 1.0]))
    r1 = rd.render(p, _cam(8), light, "shaded", cfg, 10, np.random.default_rng(1)).rgb.value
    r2 = rd.render(p, _cam(8), light, "shaded", cfg, 10, np.random.default_rng(1)).rgb.value
    assert np.array_equal(r1, r2)
    t1 = rd.render(p, _cam(8), light, "textureless", cfg, 10, np.random.default_rng(1)).rgb.value
    q = dict(p, **{"field.albedo.w": np.zeros_like(p["field.albedo.w"]), "field.albedo.b": np.zeros_like(p["field.albedo.b"])})
    t2 = rd.render(q, _cam(8), light, "textureless", cfg, 10, np.random.default_rng(1)).rgb.value
    assert np.array_equal(t1, t2)


def test_misses_show_background():
    cfg = rd.RenderConfig(samples=8, field=SMALL, radius=0.3)
    p = rd.init_field_params(SMALL, np.random.default_rng(8))
    out = rd.render(p, _cam(8), None, "albedo", cfg)
    assert (~out.hit).any()
    _, d = rd.camera_rays(_cam(8))
    bg = rd.background_eval(p, d, SMALL).value
    np.testing.assert_allclose(out.rgb.value.reshape(-1, 3)[~out.hit], bg[~out.hit])
    assert np.all(out.opacity.value[~out.hit] == 0)


def test_blob_normal_image_mirror_symmetric():
    cfg = rd.RenderConfig(samples=16, field=SMALL)
    cam = rd.look_at([1.6, 0.0, 0.0], [0, 0, 0], [0, 0, 1], 12.0, 12)
    img = rd.normal_image(rd.render(rd.zero_field_params(SMALL), cam, None, "albedo", cfg,
                                    rng=None, need_normals=True))
    ulp = np.spacing(np.float32(1.0))
    # screen-right is world +y, screen-up is world +z for this camera
    lr = img[:, ::-1]
    assert np.abs(lr[..., 1] - (1.0 - img[..., 1])).max() <= ulp
    assert np.abs(lr[..., [0, 2]] - img[..., [0, 2]]).max() <= ulp
    ud = img[::-1]
    assert np.abs(ud[..., 2] - (1.0 - img[..., 2])).max() <= ulp


def test_orientation_loss_examples():
    w = np.array([[0.2]])
    n = nd.Tensor(np.array([[[0.0, 0.0, 1.0]]]))
    v = np.array([[0.0, np.sqrt(0.75), 0.5]])
    assert rd.orientation_loss(w, n, v).value == pytest.approx(0.05)
    assert rd.orientation_loss(w, n, -v).value == 0.0
    assert rd.orientation_loss(w, n, v, fallback=np.array([[True]])).value == 0.0


def test_orientation_loss_no_gradient_to_weights(f64):
    v = np.array([[0.0, 0.6, 0.8]])
    n = np.array([[[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]])
    g, out = nd.forward(lambda p: rd.orientation_loss(p["w"], p["n"], v), {"w": np.array([[0.3, 0.4]]), "n": n})
    grads = g.backward(out)
    np.testing.assert_array_equal(grads["w"], 0.0)
    assert np.abs(grads["n"]).sum() > 0


def test_opacity_loss():
    assert rd.opacity_loss(np.zeros((1, 4))).value == pytest.approx(0.1)
    assert rd.opacity_loss(np.array([[0.5, 0.5]])).value == pytest.approx(np.sqrt(1.01))
    vals = [rd.opacity_loss(np.array([[s]])).value for s in np.linspace(0, 1, 20)]
    assert np.all(np.diff(vals) > 0)


def test_lambda_sigma_anneal():
    ipe = rd.IpeConfig()
    assert ipe.lambda_sigma(0) == 5e-2
    assert ipe.lambda_sigma(5000) == 2e-3
    assert ipe.lambda_sigma(2500) == pytest.approx(0.5 * (5e-2 + 2e-3))
    assert ipe.lambda_sigma(10**6) == 2e-3
