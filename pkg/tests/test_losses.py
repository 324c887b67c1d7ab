import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from latentmotion.errors import ConfigError
from latentmotion.losses import (
    LossWeights,
    RunningStats,
    angle_from_distance,
    endpoint_distance,
    gap_from_angle,
    gradient_angle_penalty,
    gradient_penalty,
    interpolate_grad_norms,
    total_critic_loss,
    total_generator_loss,
    wgan_losses,
)
from latentmotion.model import Generator, NoiseInputs

from test_model import randomize_bn, tiny

QP = math.pi / 4


def test_wgan_equal_scores():
    c, g = wgan_losses(torch.tensor([1.0]), torch.tensor([1.0]))
    assert c.item() == 0.0 and g.item() == -1.0


def test_wgan_arithmetic():
    c, _ = wgan_losses(torch.tensor([2.0, 4.0]), torch.tensor([1.0, 1.0]))
    assert c.item() == -2.0


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8),
       st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_wgan_identity(real, fake):
    r, f = torch.tensor(real, dtype=torch.float64), torch.tensor(fake, dtype=torch.float64)
    c, g = wgan_losses(r, f)
    assert torch.isclose(c, -g - r.mean(), atol=1e-9)


def test_wgan_empty():
    with pytest.raises(ConfigError):
        wgan_losses(torch.tensor([]), torch.tensor([1.0]))


def _linear_critic(a):
    return lambda x: x.flatten(1) @ a


def test_gp_unit_linear_critic():
    a = torch.randn(3 * 2 * 5, dtype=torch.float64)
    a /= a.norm()
    real, fake = torch.randn(4, 3, 2, 5, dtype=torch.float64), torch.randn(4, 3, 2, 5, dtype=torch.float64)
    assert gradient_penalty(_linear_critic(a), real, fake).item() == pytest.approx(0.0, abs=1e-12)


def test_gp_double_linear_critic():
    a = torch.randn(30, dtype=torch.float64)
    a /= a.norm()
    real, fake = torch.randn(4, 3, 2, 5, dtype=torch.float64), torch.randn(4, 3, 2, 5, dtype=torch.float64)
    assert gradient_penalty(_linear_critic(2 * a), real, fake).item() == pytest.approx(1.0, abs=1e-12)


def test_gp_shape_mismatch():
    with pytest.raises(ConfigError):
        gradient_penalty(lambda x: x.sum((1, 2, 3)), torch.zeros(2, 3, 2, 2), torch.zeros(2, 4, 2, 2))


def _mlp_critic():
    torch.manual_seed(5)
    net = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(12, 7), torch.nn.Tanh(),
                              torch.nn.Linear(7, 1)).double()
    return lambda x: net(x).squeeze(-1), net


def test_gp_matches_finite_differences():
    critic, _ = _mlp_critic()
    real = torch.randn(3, 3, 2, 2, dtype=torch.float64)
    fake = torch.randn(3, 3, 2, 2, dtype=torch.float64)
    u = torch.tensor([0.2, 0.5, 0.9], dtype=torch.float64)
    norms = interpolate_grad_norms(critic, real, fake, u=u)
    x_hat = u.view(3, 1, 1, 1) * real + (1 - u.view(3, 1, 1, 1)) * fake
    h = 1e-3
    fd = torch.zeros(3, 12, dtype=torch.float64)
    with torch.no_grad():
        for k in range(12):
            e = torch.zeros(12, dtype=torch.float64)
            e[k] = h
            e = e.view(1, 3, 2, 2)
            fd[:, k] = (critic(x_hat + e) - critic(x_hat - e)) / (2 * h)
    fd_norms = fd.norm(dim=1)
    assert ((norms - fd_norms).abs() / fd_norms).max() <= 1e-4
    pen = gradient_penalty(critic, real, fake, u=u)
    assert pen.item() == pytest.approx(((fd_norms - 1) ** 2).mean().item(), rel=1e-4)


def test_gp_is_differentiable_wrt_critic_params():
    critic, net = _mlp_critic()
    real, fake = torch.randn(4, 3, 2, 2, dtype=torch.float64), torch.randn(4, 3, 2, 2, dtype=torch.float64)
    pen = gradient_penalty(critic, real, fake)
    weights = [net[1].weight, net[3].weight]
    grads = torch.autograd.grad(pen, weights)
    assert all(g.abs().sum() > 0 for g in grads)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_gp_nonnegative(seed):
    critic, _ = _mlp_critic()
    g = torch.Generator().manual_seed(seed)
    real = torch.randn(3, 3, 2, 2, generator=g, dtype=torch.float64)
    fake = torch.randn(3, 3, 2, 2, generator=g, dtype=torch.float64)
    assert gradient_penalty(critic, real, fake, generator=g).item() >= 0


def test_gap_values():
    assert gap_from_angle(torch.tensor(QP)).item() == 0.0
    assert gap_from_angle(torch.tensor(0.0, dtype=torch.float64)).item() == pytest.approx(QP ** 2)
    assert QP ** 2 == pytest.approx(0.61685, abs=1e-5)
    assert torch.count_nonzero(gap_from_angle(torch.tensor([0.8, 1.0, 1.5]))) == 0


@settings(max_examples=50, deadline=None)
@given(st.floats(0, math.pi / 2))
def test_gap_nonnegative(phi):
    v = gap_from_angle(torch.tensor(phi, dtype=torch.float64)).item()
    assert v >= 0
    if phi > QP:
        assert v == 0.0


def test_gap_smooth_at_quarter_pi():
    for phi0 in (QP - 1e-9, QP, QP + 1e-9):
        phi = torch.tensor(phi0, dtype=torch.float64, requires_grad=True)
        (g,) = torch.autograd.grad(gap_from_angle(phi), phi)
        assert abs(g.item()) < 1e-8


def _tiny_generator(seed=7):
    torch.manual_seed(seed)
    g = Generator(tiny()).double().eval()
    randomize_bn(g, seed)
    return g


def _stats(seed=0):
    st_ = RunningStats(4)
    gen = torch.Generator().manual_seed(seed)
    st_.mean = 0.1 * torch.randn(4, generator=gen)
    st_.var = torch.rand(4, generator=gen) + 0.5
    return st_


def test_gap_zero_when_step_noise_ignored():
    g = _tiny_generator()
    with torch.no_grad():
        g.cells[0].weight_ih.zero_()
    noise = NoiseInputs.sample(g.cfg, 5, 4, dtype=torch.float64).requires_grad_()
    loss, phi = gradient_angle_penalty(g, noise, _stats())
    assert phi.abs().max().item() <= 1e-6
    assert loss.item() == pytest.approx(QP ** 2, abs=1e-6)


def test_gap_returns_batch_mean_of_per_sample_losses():
    g = _tiny_generator()
    noise = NoiseInputs.sample(g.cfg, 6, 5, torch.Generator().manual_seed(2), dtype=torch.float64)
    loss, phi = gradient_angle_penalty(g, noise.requires_grad_(), _stats())
    assert loss.item() == pytest.approx(gap_from_angle(phi).mean().item(), rel=1e-12)


def test_gap_requires_grad_noise():
    g = _tiny_generator()
    with pytest.raises(ConfigError):
        gradient_angle_penalty(g, NoiseInputs.sample(g.cfg, 2, 4, dtype=torch.float64), _stats())


def test_gap_gradient_norms_match_finite_differences():
    g = _tiny_generator()
    stats = _stats()
    i = torch.randn(1, 4, dtype=torch.float64)
    s = torch.randn(1, 3, 4, dtype=torch.float64)
    noise = NoiseInputs(i.clone(), s.clone()).requires_grad_()
    d = endpoint_distance(g.rollout_intermediate(noise), stats)
    _, n_s, n_i = angle_from_distance(d, noise, create_graph=False)

    def dist(iv, sv):
        with torch.no_grad():
            return endpoint_distance(g.rollout_intermediate(NoiseInputs(iv, sv)), stats).item()

    h = 1e-3
    fd_i = torch.zeros(4, dtype=torch.float64)
    for k in range(4):
        e = torch.zeros_like(i)
        e[0, k] = h
        fd_i[k] = (dist(i + e, s) - dist(i - e, s)) / (2 * h)
    fd_s = torch.zeros(12, dtype=torch.float64)
    for k in range(12):
        e = torch.zeros(12, dtype=torch.float64)
        e[k] = h
        e = e.view(1, 3, 4)
        fd_s[k] = (dist(i, s + e) - dist(i, s - e)) / (2 * h)
    assert abs(n_i.item() - fd_i.norm().item()) / fd_i.norm().item() <= 1e-4
    assert abs(n_s.item() - fd_s.norm().item()) / fd_s.norm().item() <= 1e-4


def test_gap_distance_invariant_to_batch_order():
    g = _tiny_generator()
    stats = _stats()
    noise = NoiseInputs.sample(g.cfg, 6, 5, torch.Generator().manual_seed(3), dtype=torch.float64)
    perm = torch.randperm(6)
    with torch.no_grad():
        d = endpoint_distance(g.rollout_intermediate(noise), stats)
        dp = endpoint_distance(g.rollout_intermediate(NoiseInputs(noise.identity[perm], noise.steps[perm])), stats)
    assert torch.equal(d[perm], dp)


def test_gap_second_order_gradient():
    g = _tiny_generator()
    stats = _stats()
    noise = NoiseInputs.sample(g.cfg, 3, 4, torch.Generator().manual_seed(9), dtype=torch.float64)
    params = [p for name, p in g.named_parameters() if name.startswith(("hallucinator", "cells"))]

    def loss_value():
        n = NoiseInputs(noise.identity.clone(), noise.steps.clone()).requires_grad_()
        return 100 * gradient_angle_penalty(g, n, stats)[0]

    loss = loss_value()
    assert 0 < loss.item()
    grads = torch.autograd.grad(loss, params)
    assert all(torch.isfinite(gr).all() for gr in grads)
    p, gr = params[3], grads[3]
    idx = int(gr.abs().flatten().argmax())
    h = 1e-5
    flat = p.data.view(-1)
    flat[idx] += h
    up = loss_value().item()
    flat[idx] -= 2 * h
    down = loss_value().item()
    flat[idx] += h
    fd = (up - down) / (2 * h)
    assert abs(fd - gr.flatten()[idx].item()) <= 1e-3 * abs(fd)


def test_running_stats_identity_before_update():
    st_ = RunningStats(3)
    x = torch.tensor([1.0, -2.0, 0.5])
    assert torch.allclose(st_.normalize(x), x / math.sqrt(1 + 1e-6))


def test_running_stats_constant_stream_drives_to_zero():
    st_ = RunningStats(3)
    v = torch.tensor([[3.0, -1.0, 10.0]])
    first = st_.normalize(v).norm().item()
    for _ in range(3000):
        st_.update(v)
    # f32 residue in the mean is amplified by 1/sqrt(eps)
    assert torch.allclose(st_.mean, v[0], rtol=1e-5)
    assert st_.normalize(v).norm().item() < 1e-2 * first
    assert (st_.var >= 0).all()


def test_running_stats_update_cadence():
    st_ = RunningStats(2, momentum=0.99)
    st_.update(torch.tensor([[1.0, 3.0], [3.0, 5.0]]))
    assert torch.allclose(st_.mean, torch.tensor([0.02, 0.04]))
    assert torch.allclose(st_.var, torch.tensor([0.99 + 0.01, 0.99 + 0.01]))
    assert st_.count == 1


def test_update_stats_flag():
    g = _tiny_generator()
    stats = RunningStats(4)
    noise = NoiseInputs.sample(g.cfg, 4, 4, dtype=torch.float64).requires_grad_()
    gradient_angle_penalty(g, noise, stats, update_stats=False)
    assert stats.count == 0
    gradient_angle_penalty(g, noise, stats, update_stats=True)
    assert stats.count == 1


def test_loss_weights_defaults_and_validation():
    w = LossWeights()
    assert (w.lambda_gp, w.lambda_gap) == (50.0, 100.0)
    with pytest.raises(ConfigError):
        LossWeights(lambda_gp=-1)
    with pytest.raises(ConfigError):
        LossWeights(lambda_gap=float("nan"))


def test_totals():
    zero = LossWeights(0, 0)
    assert total_critic_loss(torch.tensor(-2.0), torch.tensor(7.0), zero).item() == -2.0
    assert total_generator_loss(torch.tensor(1.5), torch.tensor(7.0), zero).item() == 1.5
    w = LossWeights()
    assert total_critic_loss(torch.tensor(-2.0, dtype=torch.float64), torch.tensor(0.1, dtype=torch.float64),
                             w).item() == pytest.approx(3.0)
    gap0 = gap_from_angle(torch.tensor(0.0, dtype=torch.float64))
    assert total_generator_loss(torch.tensor(0.0, dtype=torch.float64), gap0, w).item() == \
        pytest.approx(61.685, abs=1e-3)
