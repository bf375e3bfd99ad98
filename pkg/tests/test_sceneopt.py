import numpy as np
import pytest

from scoredistill import ndgrad as nd
from scoredistill import renderer as rd
from scoredistill import sceneopt as so
from scoredistill.diffusion import Conditioning, GaussianMixtureScore, Vocabulary, VocabularyError, schedule_coeffs


@pytest.fixture(scope="module")
def cams():
    r = np.random.default_rng(0)
    return [so.sample_camera(r, 64) for _ in range(10_000)]


def test_camera_ranges(cams):
    e = np.array([c.elevation for c in cams])
    d = np.array([c.distance for c in cams])
    f = np.array([c.camera.focal for c in cams])
    a = np.array([c.azimuth for c in cams])
    assert e.min() >= -10 and e.max() <= 90
    assert d.min() >= 1.0 and d.max() <= 1.5
    assert f.min() >= 0.7 * 64 and f.max() <= 1.35 * 64
    assert f.min() == pytest.approx(44.8, abs=0.1) and f.max() == pytest.approx(86.4, abs=0.1)
    assert a.min() >= 0 and a.max() < 360


def test_camera_pose_orthonormal(cams):
    for c in cams[:200]:
        r = c.pose[:3, :3]
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-5)
        np.testing.assert_allclose(c.pose[:3, 3], c.position)


def test_elevation_mixture_tail():
    r = np.random.default_rng(1)
    e = np.array([so.sample_elevation(r) for _ in range(100_000)])
    assert e.min() >= -10 and e.max() <= 90
    p_angle = 30 / 100
    p_area = (1 - np.sin(np.radians(60))) / (1 - np.sin(np.radians(-10)))
    assert abs(np.mean(e > 60) - 0.5 * (p_angle + p_area)) < 0.01


def test_light_sampling(cams):
    r = np.random.default_rng(2)
    pos = np.array([so.sample_light(c, r) for c in cams])
    norms = np.linalg.norm(pos, axis=1)
    assert norms.min() >= 0.8 and norms.max() <= 1.5
    camdir = np.array([c.position / np.linalg.norm(c.position) for c in cams])
    assert np.mean(np.sum(pos / norms[:, None] * camdir, axis=1)) > 0
    c = cams[0]
    p = so.sample_light(c, r, zero_variance=True)
    np.testing.assert_allclose(p / np.linalg.norm(p), c.position / np.linalg.norm(c.position), atol=1e-12)


def test_spherical_convention():
    np.testing.assert_allclose(so.spherical_position(0, 0, 2.0), [2, 0, 0], atol=1e-12)
    np.testing.assert_allclose(so.spherical_position(90, 30, 1.0), [0, 0, 1], atol=1e-12)


@pytest.mark.parametrize("elev,azim,tag", [(75, 0, "overhead view"), (75, 200, "overhead view"), (30, 10, "front view"),
                                           (30, 180, "back view"), (30, 95, "side view"), (30, 265, "side view"),
                                           (30, 350, "front view"), (60, 180, "back view")])
def test_view_tags(elev, azim, tag):
    cs = so.fixed_camera(elev, azim, width=8)
    cond = so.resolve_view_prompt("sphere", cs)
    assert cond == Conditioning("sphere").with_view(tag)


def test_view_blend_weights():
    for az in np.linspace(0, 359, 37):
        b = so.view_blend(20.0, az)
        assert sum(w for _, w in b) == pytest.approx(1.0)
    assert so.view_blend(20.0, 45.0) == (("front view", 0.5), ("side view", 0.5))
    with pytest.raises(VocabularyError):
        so.resolve_view_prompt("teapot", so.fixed_camera(0, 0, width=8), Vocabulary(("sphere",)))


def test_render_mode_schedule():
    r = np.random.default_rng(3)
    assert all(so.select_render_mode(500, r)[0] == "albedo" for _ in range(2000))
    modes = [so.select_render_mode(1500, r)[0] for _ in range(100_000)]
    shaded_any = np.mean([m != "albedo" for m in modes])
    textureless = np.mean([m == "textureless" for m in modes])
    assert abs(shaded_any - 0.75) < 0.01 and abs(textureless - 0.375) < 0.01
    mode, diffuse, ambient = so.select_render_mode(0, r, so.ShadingConfig(force_mode="textureless"))
    assert mode == "textureless" and diffuse == (0.9,) * 3 and ambient == (0.1,) * 3
    assert so.select_render_mode(5000, r, so.ShadingConfig(allow_shading=False))[0] == "albedo"


def test_lr_schedule_endpoints():
    assert so.lr_schedule(0) == 1e-9
    assert so.lr_schedule(3000) == 1e-4
    assert so.lr_schedule(14999) == 1e-6
    assert so.lr_schedule(1500) == pytest.approx(0.5 * (1e-9 + 1e-4))
    lrs = [so.lr_schedule(s) for s in range(3000, 15000, 500)]
    assert np.all(np.diff(lrs) < 0)


def test_regularizer_anneal_exact():
    cfg = so.TrainConfig()
    expect = {0: 1e-4, 2500: 1e-4 * 0.5 + 1e-2 * 0.5, 5000: 1e-2, 15000: 1e-2}
    for step, v in expect.items():
        assert cfg.orientation_weight(step) == v
    assert cfg.lambda_sigma(0) == 5e-2 and cfg.lambda_sigma(5000) == 2e-3


def test_config_validation():
    with pytest.raises(ValueError):
        so.TrainConfig(views=0)
    with pytest.raises(ValueError):
        so.TrainConfig(lr_peak=1e-10)


def tiny_cfg(**kw):
    render = rd.RenderConfig(samples=8, field=rd.FieldConfig(width=8, blocks=1, L=3, bg_width=8, bg_freqs=2))
    base = dict(iterations=20, resolution=8, render=render, lr_warmup=2, lr_peak=1e-2, lr_end=1e-3,
                shading=so.ShadingConfig(warmup_steps=0))
    base.update(kw)
    return so.TrainConfig(**base)


PRIOR = GaussianMixtureScore.single((8, 8, 3), 0.0, 0.5)


def test_train_step_smoke():
    cfg = tiny_cfg()
    st = so.SceneState.create(cfg)
    before = {k: v.copy() for k, v in st.params.items()}
    m = so.train_step(st, cfg, PRIOR)
    assert st.step == 1
    assert all(np.all(np.isfinite(v)) for v in st.params.values())
    assert any(not np.array_equal(before[k], st.params[k]) for k in before)
    for key in ("sds_proxy", "sds_residual", "orient", "opacity_reg", "opacity_mean", "lr", "wall", "mode"):
        assert key in m


def _render_x(params, cfg, step, seed):
    rng = so.step_rng(seed, step, 0)
    cs = so.sample_camera(rng, cfg.resolution)
    lp = so.sample_light(cs, rng, cfg.light_zero_variance)
    mode, diffuse, ambient = so.select_render_mode(step, rng, cfg.shading)
    out = rd.render(params, cs.camera, rd.LightSpec(lp, diffuse, ambient), mode, cfg.render, step, rng,
                    need_normals=mode != "albedo")
    return 2.0 * out.rgb.value.astype(np.float64) - 1.0


class EpsOracle:
    def __init__(self, x):
        self.x, self.data_shape = x, x.shape

    def predict_eps(self, z, t, cond=None):
        a, s = schedule_coeffs(np.asarray(t, np.float64))
        return (np.asarray(z, np.float64) - np.reshape(a, (-1, 1, 1, 1)) * self.x) / np.reshape(s, (-1, 1, 1, 1))


def test_eps_oracle_leaves_parameters_unpushed():
    cfg = tiny_cfg(opacity_weight=0.0, orient_start=0.0, orient_end=0.0)
    st = so.SceneState.create(cfg)
    oracle = EpsOracle(_render_x(st.params, cfg, 0, cfg.seed))
    g0, m = so.step_gradients(st.params, cfg, oracle, 0, cfg.seed)
    g1, _ = so.step_gradients(st.params, cfg, PRIOR, 0, cfg.seed)
    big = max(np.abs(v).max() for v in g1.values())
    small = max(np.abs(v).max() for v in g0.values())
    assert small < 1e-4 * big


def test_parallel_views_equal_sequential_mean():
    cfg = tiny_cfg(views=4, threads=4)
    st = so.SceneState.create(cfg)
    par, _ = so.step_gradients(st.params, cfg, PRIOR, 3, 11)
    seq = [so.view_gradient(st.params, cfg, PRIOR, 3, so.step_rng(11, 3, v)).grads for v in range(4)]
    for k in par:
        manual = (((seq[0][k] + seq[1][k]) + seq[2][k]) + seq[3][k]) / 4
        assert np.array_equal(par[k], manual)
    one, _ = so.step_gradients(st.params, so.with_overrides(cfg, threads=1), PRIOR, 3, 11)
    assert all(np.array_equal(one[k], par[k]) for k in par)


def test_two_runs_bit_identical():
    cfg = tiny_cfg(iterations=6)
    a = so.train(cfg, PRIOR)
    b = so.train(cfg, PRIOR)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


def test_divergence_raises_with_snapshot():
    class Huge:
        data_shape = (8, 8, 3)

        def predict_eps(self, z, t, cond=None):
            return np.full(np.shape(z), 1e37)

    cfg = tiny_cfg()
    st = so.SceneState.create(cfg)
    with pytest.raises(so.TrainingDiverged) as exc:
        so.train_step(st, cfg, Huge())
    assert exc.value.snapshot["step"] == 0 and exc.value.snapshot["bad_params"]
    assert st.step == 0


def test_central_opacity_fraction():
    cfg = tiny_cfg(resolution=16)
    f = cfg.render.field
    blob_only = rd.zero_field_params(f)
    blob_only["field.density.b"] = np.full_like(blob_only["field.density.b"], -30.0)
    cams = so.eval_cameras(16, 4)
    assert so.central_opacity_fraction(blob_only, cfg, cams) == 1.0
    fog = rd.zero_field_params(f)
    fog["field.density.b"] = np.full_like(fog["field.density.b"], 1.0)
    assert so.central_opacity_fraction(fog, cfg, cams) < 1.0


def test_desk_preset_scales_schedules():
    d = so.TrainConfig.desk()
    assert (d.iterations, d.resolution) == (2000, 32)
    assert d.lr(0) == d.lr_start and d.lr(d.lr_warmup) == d.lr_peak and d.lr(1999) == d.lr_end
    assert d.render.ipe.anneal_steps == 667 and d.shading.warmup_steps == 133
