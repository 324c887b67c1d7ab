"""WGAN-GP objective plus the gradient angle penalty (GAP).

GAP measures how much the end-to-start displacement of the intermediate
trajectory depends on the per-step noise compared to the identity noise::

    d   = || (l_{t-1} - l_0 - mean) / sqrt(var + eps) ||
    phi = arctan(||dd/ds|| / ||dd/di||)
    gap = min(0, phi - pi/4) ** 2

and is zero once the step noise carries at least as much gradient as ``i``.
"""

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Tuple

import torch

from .errors import ConfigError, NumericError
from .model import Generator, NoiseInputs

QUARTER_PI = math.pi / 4
EPS_DIV = 1e-12


@dataclass
class LossWeights:
    lambda_gp: float = 50.0
    lambda_gap: float = 100.0

    def __post_init__(self):
        for name in ("lambda_gp", "lambda_gap"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) \
                    or not math.isfinite(value) or value < 0:
                raise ConfigError(f"loss.{name} must be a finite non-negative number, got {value!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class RunningStats:
    """Per-component exponential moving mean/variance used to standardise ``l_{t-1} - l_0``."""

    def __init__(self, size: int, momentum: float = 0.99, eps: float = 1e-6):
        if not 0 < momentum < 1:
            raise ConfigError(f"momentum must lie in (0, 1), got {momentum}")
        self.momentum = momentum
        self.eps = eps
        self.mean = torch.zeros(size)
        self.var = torch.ones(size)
        self.count = 0

    @torch.no_grad()
    def update(self, x: torch.Tensor):
        x = x.detach().reshape(-1, self.mean.numel()).to(self.mean.dtype)
        m = self.momentum
        self.mean.mul_(m).add_((1 - m) * x.mean(0))
        self.var.mul_(m).add_((1 - m) * x.var(0, unbiased=False)).clamp_(min=0)
        self.count += 1

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        mean = self.mean.to(x.dtype)
        var = self.var.to(x.dtype)
        return (x - mean) / torch.sqrt(var + self.eps)

    def state_dict(self) -> dict:
        return {"mean": self.mean.clone(), "var": self.var.clone(), "count": self.count}

    def load_state_dict(self, state: dict):
        self.mean = torch.as_tensor(state["mean"], dtype=torch.float32).clone()
        self.var = torch.as_tensor(state["var"], dtype=torch.float32).clone()
        self.count = int(state["count"])


def wgan_losses(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(critic_loss, generator_loss)``."""
    real_scores = torch.as_tensor(real_scores)
    fake_scores = torch.as_tensor(fake_scores)
    if real_scores.numel() == 0 or fake_scores.numel() == 0:
        raise ConfigError("score batches must be non-empty")
    return fake_scores.mean() - real_scores.mean(), -fake_scores.mean()


def interpolate_grad_norms(critic: Callable, real: torch.Tensor, fake: torch.Tensor,
                           u: Optional[torch.Tensor] = None,
                           generator: Optional[torch.Generator] = None,
                           create_graph: bool = True) -> torch.Tensor:
    """Per-sample ``||grad critic(x_hat)||`` at random interpolates of real and fake."""
    if real.shape != fake.shape:
        raise ConfigError(f"real {tuple(real.shape)} and fake {tuple(fake.shape)} shapes differ")
    b = real.shape[0]
    if u is None:
        u = torch.rand(b, generator=generator, dtype=real.dtype)
    u = u.view(b, *([1] * (real.dim() - 1)))
    x_hat = (u * real.detach() + (1 - u) * fake.detach()).requires_grad_(True)
    scores = critic(x_hat)
    (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=create_graph)
    return grad.flatten(1).norm(dim=1)


def gradient_penalty(critic: Callable, real: torch.Tensor, fake: torch.Tensor,
                     u: Optional[torch.Tensor] = None,
                     generator: Optional[torch.Generator] = None) -> torch.Tensor:
    norms = interpolate_grad_norms(critic, real, fake, u=u, generator=generator)
    return ((norms - 1) ** 2).mean()


def endpoint_distance(l: torch.Tensor, stats: RunningStats, update_stats: bool = False) -> torch.Tensor:
    """Per-sample standardised distance between the last and first intermediate codes."""
    delta = l[:, -1] - l[:, 0]
    if update_stats:
        stats.update(delta)
    return stats.normalize(delta).norm(dim=-1)


def angle_from_distance(d: torch.Tensor, noise: NoiseInputs, create_graph: bool = True,
                        retain_graph: Optional[bool] = None):
    """Per-sample ``(phi, ||dd/ds||, ||dd/di||)`` by differentiating ``d`` w.r.t. the noise."""
    g_i, g_s = torch.autograd.grad(
        d.sum(), (noise.identity, noise.steps), create_graph=create_graph,
        retain_graph=retain_graph, allow_unused=True,
    )
    if g_i is None:
        g_i = torch.zeros_like(noise.identity)
    if g_s is None:
        g_s = torch.zeros_like(noise.steps)
    n_s = _safe_norm(g_s.flatten(1))
    n_i = _safe_norm(g_i.flatten(1))
    phi = torch.atan(n_s / (n_i + EPS_DIV))
    if not torch.isfinite(phi).all():
        raise NumericError("non-finite gradient in gradient angle penalty")
    return phi, n_s, n_i


def _safe_norm(x: torch.Tensor) -> torch.Tensor:
    # the plain norm has an undefined derivative at 0; give it 0 there
    sq = x.pow(2).sum(dim=-1)
    nonzero = sq > 0
    return torch.where(nonzero, torch.sqrt(torch.where(nonzero, sq, torch.ones_like(sq))),
                       torch.zeros_like(sq))


def gap_from_angle(phi: torch.Tensor) -> torch.Tensor:
    return torch.clamp(phi - QUARTER_PI, max=0).pow(2)


def gradient_angle_penalty(generator: Generator, noise: NoiseInputs, stats: RunningStats,
                           update_stats: bool = False,
                           l: Optional[torch.Tensor] = None) -> Tuple[torch.Tensor, torch.Tensor]:
    """Returns ``(mean GAP over the batch, per-sample phi)``.

    ``noise`` tensors must require grad. Pass ``l`` to reuse intermediate codes
    from an existing rollout of the same noise. The loss keeps the graph, so
    backpropagating it reaches generator parameters through second derivatives.
    """
    if not (noise.identity.requires_grad and noise.steps.requires_grad):
        raise ConfigError("noise tensors must require grad for the gradient angle penalty")
    if l is None:
        l = generator.rollout_intermediate(noise)
    d = endpoint_distance(l, stats, update_stats=update_stats)
    phi, _, _ = angle_from_distance(d, noise)
    return gap_from_angle(phi).mean(), phi


def total_critic_loss(critic_wgan: torch.Tensor, gp: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    return critic_wgan + weights.lambda_gp * gp


def total_generator_loss(generator_wgan: torch.Tensor, gap: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    return generator_wgan + weights.lambda_gap * gap
