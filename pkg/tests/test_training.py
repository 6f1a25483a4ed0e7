import numpy as np
import pytest

from vrfno import autodiff as ad
from vrfno.autodiff import Tape, backward, grad_check, tensor
from vrfno.data import default_target, sample_target
from vrfno.nets import Encoder, VelocityField
from vrfno.rng import RngStream
from vrfno.training import (
    Couplings,
    Optimizer,
    TrainConfig,
    TrainingDiverged,
    arbitrary_source,
    draw_time,
    interpolate,
    joint_parameters,
    kl_loss,
    optimizer_update,
    pooled_source,
    reflow_generate_couplings,
    rf_loss,
    rf_train,
    total_loss,
    vcl_loss,
    vrfno_loss_parts,
    vrfno_train,
    vrfno_train_step,
)


def small_cfg(**kw):
    base = dict(
        batch_size=32,
        iterations=50,
        learning_rate=1e-3,
        alpha=1e-3,
        delta_t=0.1,
        data_dim=2,
        seed=0,
        perturbation_scale=0.1,
    )
    base.update(kw)
    return TrainConfig(**base)


def gaussian_sampler(spec=None):
    spec = spec or default_target()

    def sampler(n, rng):
        return sample_target(spec, n, rng)

    return sampler


# ---------------------------------------------------------------------------
# interpolation


def test_interpolate_boundaries_and_midpoint():
    x0 = np.array([[0.0, 0.0]], dtype=np.float32)
    x1 = np.array([[2.0, 2.0]], dtype=np.float32)
    np.testing.assert_allclose(interpolate(x0, x1, 0.0), x0)
    np.testing.assert_allclose(interpolate(x0, x1, 1.0), x1)
    np.testing.assert_allclose(interpolate(x0, x1, 0.5), [[1.0, 1.0]])
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        interpolate(x0, x1, 1.5)


# ---------------------------------------------------------------------------
# losses


def test_rf_loss_zero_for_exact_field_and_norm_for_zero_field():
    c = Couplings(
        x0=np.array([[0.0, 0.0], [1.0, 1.0]]),
        x1=np.array([[2.0, 0.0], [1.0, 3.0]]),
        kind="arbitrary",
    )
    diff = c.x1 - c.x0

    def exact(x, t, h):
        return tensor(diff)

    def zero(x, t, h):
        return tensor(np.zeros_like(diff))

    class Stub:
        def __init__(self, fn):
            self.fn = fn

        def forward(self, x, t, h):
            return self.fn(x.data, t.data, h.data)

    t = np.array([0.3, 0.8])
    assert float(rf_loss(Stub(exact), c, t).data) == pytest.approx(0.0, abs=1e-7)
    expected = np.mean(np.sum(diff**2, axis=1))
    assert float(rf_loss(Stub(zero), c, t).data) == pytest.approx(expected, rel=1e-6)


def test_rf_loss_hand_computed_batch_of_two():
    c = Couplings(
        x0=np.array([[0.5, -1.0], [2.0, 0.0]]),
        x1=np.array([[1.5, 1.0], [0.0, 1.0]]),
        kind="arbitrary",
    )
    vf = VelocityField(dim=2, seed=7, zero_output=False)
    t = np.array([0.25, 0.6], dtype=np.float32)
    got = float(rf_loss(vf, c, t).data)

    # independent recomputation with plain numpy
    xt = t[:, None] * c.x1 + (1 - t[:, None]) * c.x0
    v = vf.predict(xt.astype(np.float32), t.reshape(2, 1), np.zeros((2, 2), np.float32))
    expected = np.mean(np.sum((c.x1 - c.x0 - v) ** 2, axis=1))
    assert got == pytest.approx(expected, rel=1e-5)


def test_rf_loss_rejects_empty_batch():
    with pytest.raises(ValueError, match="empty"):
        rf_loss(
            VelocityField(dim=2),
            Couplings(np.zeros((0, 2)), np.zeros((0, 2)), "arbitrary"),
            [],
        )


def test_vcl_loss_cases():
    vref = np.array([[1.0, 0.0], [0.0, 1.0]], dtype=np.float32)

    class Stub:
        def __init__(self, out):
            self.out = out

        def forward(self, x, t, h):
            return tensor(self.out)

    xt = tensor(np.zeros((2, 2), np.float32))
    t = tensor(np.full((2, 1), 0.5, np.float32))
    h = tensor(np.zeros((2, 2), np.float32))

    exact = vcl_loss(Stub(vref), xt, t, h, tensor(vref))
    assert float(exact.data) == pytest.approx(0.0, abs=1e-8)

    offset = vcl_loss(Stub(vref + [1.0, 0.0]), xt, t, h, tensor(vref))
    assert float(offset.data) == pytest.approx(1.0, rel=1e-6)

    rng = np.random.default_rng(0)
    pred = rng.normal(size=(2, 2)).astype(np.float32)
    got = vcl_loss(Stub(pred), xt, t, h, tensor(vref))
    expected = np.mean(np.sum((vref - pred) ** 2, axis=1))
    assert float(got.data) == pytest.approx(expected, rel=1e-6)


def test_kl_loss_closed_forms():
    def kl(mu, s2):
        return float(
            kl_loss(tensor(np.full((1, 2), mu)), tensor(np.full((1, 2), s2))).data
        )

    assert kl(0.0, 1.0) == pytest.approx(0.0, abs=1e-6)
    assert kl(1.0, 1.0) == pytest.approx(0.5, abs=1e-6)
    assert kl(0.0, np.e) == pytest.approx((np.e - 2) / 2, abs=1e-6)
    with pytest.raises(ValueError):
        kl_loss(tensor([[0.0]]), tensor([[0.0]]))


def test_kl_loss_nonnegative_with_equality_only_at_standard_normal():
    grid = np.linspace(-2, 2, 9)
    for m in grid:
        for s2 in np.exp(np.linspace(-2, 2, 9)):
            val = float(kl_loss(tensor([[m]]), tensor([[s2]])).data)
            assert val > -1e-7
            if abs(m) > 1e-3 or abs(s2 - 1) > 1e-3:
                assert val > 1e-7


def test_total_loss_combination_and_gradient_structure():
    vcl = tensor(2.0, requires_grad=False)
    kll = tensor(4.0)
    assert float(total_loss(vcl, kll, 0.0).data) == pytest.approx(2.0)
    assert float(total_loss(vcl, kll, 0.5).data) == pytest.approx(4.0)

    # theta gradient comes only from the VCL term, phi sees both
    vf = VelocityField(dim=2, seed=2, zero_output=False)
    enc = Encoder(dim=2, seed=3, perturbation_scale=0.0)
    cfg = small_cfg(alpha=0.7)
    rng = RngStream(1)
    x1 = gaussian_sampler()(8, rng)
    eps = rng.normal((8, 2))
    t = draw_time(rng, 8, cfg.delta_t)

    with Tape():
        vcl_t, kll_t, _ = vrfno_loss_parts(vf, enc, x1, eps, t, cfg)
        backward(ad.scale(kll_t, cfg.alpha))
    assert all(p.grad is None or not p.grad.any() for _, p in vf.parameters())
    assert any(p.grad is not None and p.grad.any() for _, p in enc.parameters())


# ---------------------------------------------------------------------------
# optimizer


def test_zero_gradient_leaves_params_unchanged():
    for kind in ("adam", "sgd"):
        vf = VelocityField(dim=2, seed=1, zero_output=False)
        before = [p.data.copy() for _, p in vf.parameters()]
        opt = Optimizer(vf.parameters(), kind=kind)
        opt.step(1e-2)
        for (_, p), b in zip(vf.parameters(), before):
            assert np.array_equal(p.data, b)


def test_sgd_step_is_lr_times_grad():
    vf = VelocityField(dim=2, seed=1, zero_output=False)
    opt = Optimizer(vf.parameters(), kind="sgd")
    g = np.full_like(vf.w1.data, 2.0)
    before = vf.w1.data.copy()
    vf.w1.grad = g.copy()
    opt.step(0.05)
    np.testing.assert_allclose(vf.w1.data, before - 0.05 * 2.0, rtol=1e-6)


def test_adam_first_step_magnitude_close_to_lr():
    vf = VelocityField(dim=2, seed=1, zero_output=False)
    opt = Optimizer(vf.parameters(), kind="adam")
    before = vf.w1.data.copy()
    vf.w1.grad = np.full_like(vf.w1.data, 3.0)
    opt.step(1e-3)
    update = before - vf.w1.data
    np.testing.assert_allclose(update, 1e-3, rtol=1e-4)


def test_optimizer_update_functional_form():
    vf = VelocityField(dim=2, seed=1, zero_output=False)
    opt = Optimizer(vf.parameters(), kind="sgd")
    params = vf.parameters()
    grads = [np.ones_like(p.data) for _, p in params]
    before = [p.data.copy() for _, p in params]
    optimizer_update(opt, params, grads, 0.1)
    for (_, p), b in zip(params, before):
        np.testing.assert_allclose(p.data, b - 0.1, rtol=1e-6)


def test_optimizer_shape_mismatch_rejected():
    vf = VelocityField(dim=2, seed=1)
    opt = Optimizer(vf.parameters())
    vf.w1.grad = np.zeros((1, 1), dtype=np.float32)
    with pytest.raises(ValueError, match="shape"):
        opt.step(1e-3)


# ---------------------------------------------------------------------------
# the joint training step


def test_train_step_with_zero_lr_keeps_params():
    vf = VelocityField(dim=2, seed=4)
    enc = Encoder(dim=2, seed=5, perturbation_scale=0.1)
    cfg = small_cfg(learning_rate=0.0)
    opt = Optimizer(joint_parameters(vf, enc))
    rng = RngStream(2)
    x1 = gaussian_sampler()(16, rng)
    before = [p.data.copy() for _, p in joint_parameters(vf, enc)]
    _, _, tot = vrfno_train_step(vf, enc, x1, rng, cfg, opt)
    assert np.isfinite(tot)
    for (_, p), b in zip(joint_parameters(vf, enc), before):
        assert np.array_equal(p.data, b)


def test_full_loss_gradients_match_finite_differences():
    # HVT held constant, both nets' parameters checked jointly
    vf = VelocityField(dim=2, seed=6, zero_output=False)
    enc = Encoder(dim=2, seed=7, perturbation_scale=0.1)
    cfg = small_cfg(alpha=0.05)
    rng = RngStream(3)
    x1 = gaussian_sampler()(4, rng)
    eps = rng.normal((4, 2))
    tau = enc.draw_perturbation(4, rng)
    t = draw_time(rng, 4, cfg.delta_t)

    with ad.no_grad():
        _, _, _ = vrfno_loss_parts(vf, enc, x1, eps, t, cfg, tau=tau)
        t_prev = np.clip(np.asarray(t, np.float64).reshape(-1, 1) - cfg.delta_t, 0, 1)
        mu, s2 = enc.predict(x1, tau=tau)
        x0 = eps * s2 + mu
        x_prev = x0 + t_prev.astype(np.float32) * (x1 - x0)
        vh = vf.predict(x_prev, t_prev.astype(np.float32), np.zeros_like(x0))

    params = joint_parameters(vf, enc)

    def loss(plist):
        trial_vf = VelocityField(dim=2, seed=0, zero_output=False)
        trial_enc = Encoder(dim=2, seed=0, perturbation_scale=enc.perturbation_scale)
        n_vf = len(trial_vf.parameters())
        for (name, _), p in zip(trial_vf.parameters(), plist[:n_vf]):
            setattr(trial_vf, name, p)
        for (name, _), p in zip(trial_enc.parameters(), plist[n_vf:]):
            setattr(trial_enc, name.replace("enc_", ""), p)
        _, _, tot = vrfno_loss_parts(
            trial_vf, trial_enc, x1, eps, t, cfg, tau=tau, v_history_override=vh
        )
        return tot

    err = grad_check(loss, [p for _, p in params], h=3e-5)
    assert err < 1e-4, f"joint loss grad check failed: {err}"


def test_stopgrad_blocks_history_path():
    # loss that touches theta only through the detached history term
    vf = VelocityField(dim=2, seed=8, zero_output=False)
    rng = RngStream(4)
    x = rng.normal((6, 2))
    t = np.full((6, 1), 0.4, dtype=np.float32)

    def history_only_loss(vf_obj):
        xt = tensor(x)
        tt = tensor(t)
        zeros = tensor(np.zeros_like(x))
        vh = vf_obj.forward(xt, tt, zeros).detach()
        return ad.mean(ad.square(vh))

    with Tape():
        backward(history_only_loss(vf))
    for _, p in vf.parameters():
        assert p.grad is None or not p.grad.any()

    # finite difference of the same quantity is NOT zero: the path is real
    w = vf.w4.data
    h = 1e-3
    base = float(history_only_loss(vf).data)
    w[0, 0] += h
    bumped = float(history_only_loss(vf).data)
    w[0, 0] -= h
    assert abs(bumped - base) > 1e-8


def test_loss_decreases_over_training():
    cfg = small_cfg(iterations=2000, batch_size=128, seed=1)
    losses = []
    vrfno_train(gaussian_sampler(), cfg, log=lambda it, v, k, t: losses.append(t))
    first = np.mean(losses[:100])
    last = np.mean(losses[-100:])
    assert last < first, f"loss did not decrease: {first} -> {last}"


def test_training_deterministic_given_seed():
    cfg = small_cfg(iterations=40, batch_size=64, seed=9)
    runs = []
    for _ in range(2):
        vf, enc, _ = vrfno_train(gaussian_sampler(), cfg)
        runs.append([p.data.copy() for _, p in joint_parameters(vf, enc)])
    for a, b in zip(*runs):
        assert np.array_equal(a, b)


def test_divergence_aborts_with_iteration():
    cfg = small_cfg(iterations=200, learning_rate=1e6, seed=3)
    with pytest.raises(TrainingDiverged) as exc_info:
        vrfno_train(gaussian_sampler(), cfg)
    assert exc_info.value.iteration >= 0


def test_definition_residual_smaller_for_trained_optimized_couplings():
    # trained field + its own optimized couplings vs untrained field +
    # arbitrary couplings: the residual against the chord must shrink
    cfg = small_cfg(iterations=1500, batch_size=128, seed=5)
    vf, enc, _ = vrfno_train(gaussian_sampler(), cfg)
    rng = RngStream(123)
    x1 = gaussian_sampler()(256, rng)
    eps = rng.normal((256, 2))
    mu, s2 = enc.predict(x1, rng=rng)
    x0_opt = eps * s2 + mu

    def residual(field, x0, x1):
        vals = []
        for t in np.linspace(0.1, 1.0, 10):
            xt = (1 - t) * x0 + t * x1
            tcol = np.full((len(x0), 1), t, dtype=np.float32)
            vh = np.zeros_like(x0)
            v = field.predict(xt.astype(np.float32), tcol, vh)
            vals.append(np.linalg.norm(x1 - x0 - v, axis=1).mean())
        return np.mean(vals)

    untrained = VelocityField(dim=2, seed=99)
    trained_res = residual(vf, x0_opt, x1)
    untrained_res = residual(untrained, eps, x1)
    assert trained_res < untrained_res


# ---------------------------------------------------------------------------
# rf / reflow baselines


def test_rf_train_smoke_and_loss_finite():
    cfg = small_cfg(iterations=60, batch_size=64, use_encoder=False, use_hvt=False)
    losses = []
    vf = VelocityField(dim=2, seed=0)
    rf_train(vf, arbitrary_source(gaussian_sampler()), cfg,
             log=lambda it, l, k, t: losses.append(l))
    assert np.isfinite(losses).all()


def test_reflow_couplings_from_stub_fields():
    c = np.array([0.5, -0.25])

    class StubField:
        dim = 2

        def predict(self, x, t, h):
            return np.tile(c, (x.shape[0], 1)).astype(np.float32)

    couplings = reflow_generate_couplings(StubField(), 16, 10, RngStream(6))
    assert couplings.kind == "deterministic"
    np.testing.assert_allclose(couplings.x1, couplings.x0 + c, atol=1e-5)

    single = reflow_generate_couplings(StubField(), 4, 1, RngStream(6))
    np.testing.assert_allclose(single.x1, single.x0 + c, atol=1e-5)


def test_pooled_source_resamples_from_pool():
    pool = Couplings(
        x0=np.arange(10, dtype=np.float32).reshape(5, 2),
        x1=np.arange(10, dtype=np.float32).reshape(5, 2) + 1,
        kind="deterministic",
    )
    src = pooled_source(pool)
    batch = src(8, RngStream(3))
    assert len(batch) == 8 and batch.kind == "deterministic"
    rows = {tuple(r) for r in batch.x0}
    assert rows.issubset({tuple(r) for r in pool.x0})


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(delta_t=1.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(alpha=-0.1).validate()
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop").validate()


def test_draw_time_respects_lower_bound():
    t = draw_time(RngStream(0), 10_000, 0.1)
    assert t.min() >= 0.1 - 1e-6 and t.max() < 1.0
