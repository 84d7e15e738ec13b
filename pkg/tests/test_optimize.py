import numpy as np
import pytest

from flowedit import losses, optimize, warp
from flowedit import tensor as T
from flowedit.guidance import ToyEmbedScorer, ToyTargetScorer


class ReferenceAdam:
    """Straight transcription of the Adam update rule, kept independent of
    the package implementation so the two can be cross-checked."""

    def __init__(self, x, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.x = np.array(x, dtype=np.float64)
        self.lr = lr
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = np.zeros_like(self.x)
        self.v = np.zeros_like(self.x)
        self.t = 0

    def step(self, grad):
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * grad
        self.v = self.b2 * self.v + (1 - self.b2) * grad**2
        m_hat = self.m / (1 - self.b1**self.t)
        v_hat = self.v / (1 - self.b2**self.t)
        self.x -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def test_adam_zero_gradient_keeps_params():
    p = T.Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    adam = optimize.Adam([p], lr=0.1)
    p.grad = None  # never any gradient
    adam.step()
    assert np.array_equal(p.data, np.array([1.0, -2.0], dtype=np.float32))
    assert np.all(adam.m[0] == 0.0) and np.all(adam.v[0] == 0.0)


def test_adam_moments_decay_once_gradients_stop():
    p = T.Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
    adam = optimize.Adam([p], lr=0.01)
    p.grad = np.array([1.0], dtype=np.float32)
    adam.step()
    m_prev = abs(adam.m[0][0])
    p.grad = None
    for _ in range(5):
        adam.step()
        assert abs(adam.m[0][0]) < m_prev
        m_prev = abs(adam.m[0][0])


def test_adam_first_step_hand_computed():
    p = T.Tensor(np.array([0.0], dtype=np.float32), requires_grad=True)
    adam = optimize.Adam([p], lr=0.01)
    p.grad = np.array([1.0], dtype=np.float32)
    adam.step()
    assert np.isclose(p.data[0], -0.01 / (1.0 + 1e-8), atol=1e-9)


def test_adam_matches_reference_trajectory():
    x0 = np.array([1.0, -0.5, 2.0], dtype=np.float32)
    p = T.Tensor(x0.copy(), requires_grad=True)
    adam = optimize.Adam([p], lr=0.01)
    ref = ReferenceAdam(x0, lr=0.01)
    rng = np.random.default_rng(0)
    for _ in range(50):
        g = rng.normal(size=3).astype(np.float32)
        p.grad = g.copy()
        adam.step()
        adam.zero_grad()
        ref.step(g.astype(np.float64))
        assert np.allclose(p.data, ref.x, atol=1e-5)


def test_adam_quadratic_converges():
    p = T.Tensor(np.array([1.0], dtype=np.float32), requires_grad=True)
    adam = optimize.Adam([p], lr=0.01)
    for _ in range(200):
        loss = T.reduce_sum(T.square(p))
        loss.backward()
        adam.step()
        adam.zero_grad()
    assert abs(p.data[0]) < 0.1


def test_adam_lr_schedule_halves():
    p = T.Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    adam = optimize.Adam([p], lr=1e-2, halve_every=1000)
    lrs = []
    for _ in range(2001):
        lrs.append(adam.current_lr())
        adam.step()
    assert lrs[999] == 1e-2
    assert lrs[1000] == 0.5e-2
    assert lrs[1999] == 0.5e-2
    assert lrs[2000] == 0.25e-2


# -- iterative editing loops ---------------------------------------------------

def blurred_noise_image(h, w, seed=0):
    rng = np.random.default_rng(seed)
    img = rng.random(size=(h, w, 3)).astype(np.float32)
    with T.no_grad():
        img = T.gaussian_blur(T.Tensor(img), 9, sigma=3.0).data
    img -= img.min()
    img /= img.max()
    return (0.1 + 0.8 * img).astype(np.float32)


def translated_target(img, dx):
    shift = np.zeros(img.shape[:2] + (2,), np.float32)
    shift[..., 0] = dx
    with T.no_grad():
        return warp.apply_spatial_flow(img, shift).data


def recovery_configs(target):
    explicit = optimize.EditConfig(
        guidance=ToyTargetScorer(target),
        mode="explicit",
        iterations=500,
        lr=0.05,
        halve_every=0,
        weights=losses.LossWeights(clip=1.0, sm=0.01, reg=0.0, color=0.0, id=0.0),
        blur_kernel=5,
        seed=0,
        color_edit=False,
    )
    inr_cfg = optimize.EditConfig(
        guidance=ToyTargetScorer(target),
        mode="inr",
        iterations=500,
        lr=0.05,
        halve_every=0,
        weights=losses.LossWeights(clip=1.0, sm=0.01, reg=1e-4, color=0.0, id=0.0),
        blur_kernel=0,
        seed=0,
        color_edit=False,
    )
    return explicit, inr_cfg


def test_zero_iterations_is_identity():
    img = blurred_noise_image(16, 16)
    cfg, _ = recovery_configs(img)
    cfg.iterations = 0
    res = optimize.run_iterative_explicit(img, "p", cfg)
    assert np.array_equal(res.edited, img)
    assert np.all(res.flow == 0.0)
    assert np.all(res.cflow == 0.0)
    assert res.trace == []


def test_explicit_recovers_known_translation():
    img = blurred_noise_image(64, 64)
    target = translated_target(img, 2.0)
    cfg, _ = recovery_configs(target)
    res = optimize.run_iterative_explicit(img, "shift", cfg)
    interior = res.flow[4:-4, 4:-4]
    assert abs(interior[..., 0].mean() - 2.0) < 0.5
    assert abs(interior[..., 1]).mean() < 0.5
    assert len(res.trace) == cfg.iterations
    assert min(t["total"] for t in res.trace) <= res.trace[0]["total"]


def test_inr_recovers_known_translation():
    img = blurred_noise_image(64, 64)
    target = translated_target(img, 2.0)
    _, cfg = recovery_configs(target)
    res = optimize.run_iterative_inr(img, "shift", cfg)
    interior = res.flow[4:-4, 4:-4]
    assert abs(interior[..., 0].mean() - 2.0) < 1.0
    assert abs(interior[..., 1]).mean() < 1.0
    assert res.spatial_field is not None
    assert res.color_field is not None or not cfg.color_edit


def test_modes_share_step_zero_loss():
    img = blurred_noise_image(32, 32)
    scorer = ToyEmbedScorer(seed=2)
    base = dict(iterations=1, lr=1e-2, halve_every=0, seed=1)
    cfg_e = optimize.EditConfig(
        guidance=scorer, mode="explicit", blur_kernel=5,
        weights=losses.LossWeights(clip=10, sm=10, reg=0.0, color=20, id=0.1), **base,
    )
    cfg_i = optimize.EditConfig(
        guidance=scorer, mode="inr", blur_kernel=0,
        weights=losses.LossWeights(clip=10, sm=10, reg=0.1, color=20, id=0.1), **base,
    )
    res_e = optimize.run_iterative_explicit(img, "p", cfg_e)
    res_i = optimize.run_iterative_inr(img, "p", cfg_i)
    # both start from the identity edit, so the step-0 guidance/color/id terms agree
    for key in ("clip", "sm", "color", "id"):
        assert np.isclose(res_e.trace[0][key], res_i.trace[0][key], atol=1e-7), key


def test_alpha_zero_output_equals_input():
    img = blurred_noise_image(24, 24)
    cfg = optimize.EditConfig(
        guidance=ToyEmbedScorer(seed=0),
        mode="explicit",
        iterations=3,
        lr=0.05,
        weights=losses.LossWeights(clip=1.0, sm=0.1, reg=0.0, color=0.0, id=0.0),
        blur_kernel=3,
        alpha=0.0,
        seed=0,
    )
    res = optimize.run_iterative_explicit(img, "p", cfg)
    assert np.array_equal(res.edited, img)
    assert np.all(res.flow == 0.0)


def test_explicit_determinism_bit_identical():
    img = blurred_noise_image(24, 24, seed=3)
    cfg_kwargs = dict(
        mode="explicit", iterations=20, lr=0.02, halve_every=10,
        weights=losses.LossWeights(clip=10, sm=10, reg=0.0, color=20, id=0.1),
        blur_kernel=5, seed=7,
    )
    a = optimize.run_iterative_explicit(
        img, "p", optimize.EditConfig(guidance=ToyEmbedScorer(seed=1), **cfg_kwargs)
    )
    b = optimize.run_iterative_explicit(
        img, "p", optimize.EditConfig(guidance=ToyEmbedScorer(seed=1), **cfg_kwargs)
    )
    assert np.array_equal(a.edited, b.edited)
    assert np.array_equal(a.flow, b.flow)
    assert np.array_equal(a.cflow, b.cflow)
    assert a.trace == b.trace


def test_inr_determinism_bit_identical():
    img = blurred_noise_image(24, 24, seed=4)
    cfg_kwargs = dict(
        mode="inr", iterations=20, lr=0.02, halve_every=0,
        weights=losses.LossWeights(clip=10, sm=10, reg=0.1, color=20, id=0.1),
        blur_kernel=0, seed=7,
    )
    a = optimize.run_iterative_inr(
        img, "p", optimize.EditConfig(guidance=ToyEmbedScorer(seed=1), **cfg_kwargs)
    )
    b = optimize.run_iterative_inr(
        img, "p", optimize.EditConfig(guidance=ToyEmbedScorer(seed=1), **cfg_kwargs)
    )
    assert np.array_equal(a.edited, b.edited)
    assert np.array_equal(a.flow, b.flow)
    assert np.array_equal(a.spatial_field.theta, b.spatial_field.theta)


def test_config_validation_rejects_inconsistent_settings():
    scorer = ToyEmbedScorer()
    with pytest.raises(optimize.ConfigError, match="odd blur"):
        optimize.EditConfig(
            guidance=scorer, mode="explicit", blur_kernel=0,
            weights=losses.LossWeights(reg=0.0),
        ).validate()
    with pytest.raises(optimize.ConfigError, match="reg weight 0"):
        optimize.EditConfig(
            guidance=scorer, mode="explicit", blur_kernel=51,
            weights=losses.LossWeights(reg=0.5),
        ).validate()
    with pytest.raises(optimize.ConfigError, match="blur kernel 0"):
        optimize.EditConfig(
            guidance=scorer, mode="inr", blur_kernel=3,
            weights=losses.LossWeights(reg=0.5),
        ).validate()
    with pytest.raises(optimize.ConfigError, match="reg weight > 0"):
        optimize.EditConfig(
            guidance=scorer, mode="inr", blur_kernel=0,
            weights=losses.LossWeights(reg=0.0),
        ).validate()
    with pytest.raises(optimize.ConfigError, match="mode"):
        optimize.EditConfig(guidance=scorer, mode="both").validate()


def test_trace_csv_round_trip(tmp_path):
    img = blurred_noise_image(16, 16)
    cfg = optimize.EditConfig(
        guidance=ToyEmbedScorer(seed=1), mode="inr", iterations=5, lr=0.01,
        weights=losses.LossWeights(clip=10, sm=10, reg=0.1, color=20, id=0.1),
        blur_kernel=0, seed=0,
    )
    res = optimize.run_iterative_inr(img, "p", cfg)
    path = tmp_path / "trace.csv"
    optimize.write_trace_csv(path, res.trace)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "step,total,clip,sm,reg,color,id,lr"
    assert len(lines) == 6
