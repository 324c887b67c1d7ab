"""Recurrent latent-sequence generator and temporal convolutional critic.

The generator turns an identity noise vector ``i`` and per-step noise ``s``
into a sequence of W+-style codes::

    i --H--> (h0, h1, h2), h3 := i
    l_0     = P(0,   h)          # one warm-up step on a zero input
    l_{k+1} = P(s_k, h)          # for k < t - 1
    w_k     = T(l_k)

Everything works on batches: ``i`` is ``(B, noise_dim)``, ``s`` is
``(B, t - 1, noise_dim)`` and codes are ``(B, t, layers, dim)``.
"""

import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
PIXEL_NORM_EPS = 1e-8


@dataclass
class ModelConfig:
    layers: int = 18
    dim: int = 512
    noise_dim: int = 32
    hidden_dim: int = 32
    num_gru_cells: int = 4
    train_window_t: int = 25
    leaky_slope: float = 0.2

    def __post_init__(self):
        for name in ("layers", "dim", "noise_dim", "hidden_dim", "num_gru_cells", "train_window_t"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"model.{name} must be a positive integer, got {value!r}")
        if self.num_gru_cells < 2:
            raise ConfigError("model.num_gru_cells must be >= 2")
        if self.noise_dim != self.hidden_dim:
            raise ConfigError(
                f"model.noise_dim ({self.noise_dim}) must equal model.hidden_dim "
                f"({self.hidden_dim}): the last GRU cell is initialised with i"
            )
        if self.train_window_t < 2:
            raise ConfigError("model.train_window_t must be >= 2")
        if not 0 < self.leaky_slope < 1:
            raise ConfigError(f"model.leaky_slope must lie in (0, 1), got {self.leaky_slope}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class NoiseInputs:
    identity: torch.Tensor  # (B, noise_dim)
    steps: torch.Tensor  # (B, t - 1, noise_dim)

    @property
    def t(self) -> int:
        return self.steps.shape[1] + 1

    @classmethod
    def sample(cls, cfg: ModelConfig, batch: int, t: int,
               generator: Optional[torch.Generator] = None, dtype=torch.float32):
        if t < 2:
            raise ConfigError(f"rollout length t must be >= 2, got {t}")
        i = torch.randn(batch, cfg.noise_dim, generator=generator, dtype=dtype)
        s = torch.randn(batch, t - 1, cfg.noise_dim, generator=generator, dtype=dtype)
        return cls(i, s)

    def requires_grad_(self):
        self.identity.requires_grad_(True)
        self.steps.requires_grad_(True)
        return self


@dataclass
class GeneratorState:
    hidden: List[torch.Tensor]  # num_gru_cells tensors of shape (B, hidden_dim)


def _init_linear(layer: nn.Linear):
    bound = 1.0 / math.sqrt(layer.in_features)
    nn.init.uniform_(layer.weight, -bound, bound)
    nn.init.uniform_(layer.bias, -bound, bound)


def mlp(widths: List[int], slope: float) -> nn.Sequential:
    """Stack of ``Linear + LeakyReLU`` blocks, one per consecutive width pair."""
    mods = []
    for a, b in zip(widths[:-1], widths[1:]):
        lin = nn.Linear(a, b)
        _init_linear(lin)
        mods += [lin, nn.LeakyReLU(slope)]
    return nn.Sequential(*mods)


def pixel_norm(x: torch.Tensor) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + PIXEL_NORM_EPS)


class LayerHeads(nn.Module):
    """``layers`` independent ``Linear(dim, dim)`` maps applied to one shared input."""

    def __init__(self, layers: int, dim: int):
        super().__init__()
        bound = 1.0 / math.sqrt(dim)
        self.weight = nn.Parameter(torch.empty(layers, dim, dim).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(layers, dim).uniform_(-bound, bound))

    def forward(self, v):
        # v: (N, dim) -> (N, layers, dim)
        return torch.einsum("ni,lio->nlo", v, self.weight) + self.bias


class LatentMapper(nn.Module):
    """Maps intermediate codes ``(N, hidden_dim)`` to W+ codes ``(N, layers, dim)``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.in_norm = nn.BatchNorm1d(cfg.hidden_dim, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.trunk = mlp([cfg.hidden_dim] + [cfg.dim] * 4, cfg.leaky_slope)
        self.mid_norm = nn.BatchNorm1d(cfg.dim, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.heads = LayerHeads(cfg.layers, cfg.dim)
        # one BN over layers*dim channels == independent BN per head
        self.out_norm = nn.BatchNorm1d(cfg.layers * cfg.dim, eps=BN_EPS, momentum=BN_MOMENTUM)

    def forward(self, l):
        if l.shape[-1] != self.cfg.hidden_dim:
            raise ConfigError(
                f"intermediate code has length {l.shape[-1]}, expected {self.cfg.hidden_dim}"
            )
        x = pixel_norm(self.in_norm(l))
        v = self.mid_norm(self.trunk(x))
        w = F.leaky_relu(self.heads(v), self.cfg.leaky_slope)
        w = self.out_norm(w.flatten(1))
        return w.view(-1, self.cfg.layers, self.cfg.dim)


class Generator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        width = (cfg.num_gru_cells - 1) * cfg.hidden_dim
        self.hallucinator = mlp([cfg.noise_dim] + [width] * 4, cfg.leaky_slope)
        self.hallucinator_norm = nn.BatchNorm1d(width, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.cells = nn.ModuleList(
            [nn.GRUCell(cfg.noise_dim, cfg.hidden_dim)]
            + [nn.GRUCell(cfg.hidden_dim, cfg.hidden_dim) for _ in range(cfg.num_gru_cells - 1)]
        )
        self.mapper = LatentMapper(cfg)
        # fixed affine map to data coordinates; identity unless set_output_stats is called
        self.register_buffer("out_shift", torch.zeros(cfg.layers, cfg.dim))
        self.register_buffer("out_scale", torch.ones(cfg.layers, cfg.dim))

    def set_output_stats(self, mean, std, floor: float = 1e-6):
        mean = torch.as_tensor(mean, dtype=self.out_shift.dtype)
        std = torch.as_tensor(std, dtype=self.out_scale.dtype)
        if mean.shape != self.out_shift.shape or std.shape != self.out_scale.shape:
            raise ConfigError(f"output stats must have shape {tuple(self.out_shift.shape)}")
        with torch.no_grad():
            self.out_shift.copy_(mean)
            self.out_scale.copy_(std.clamp(min=floor))

    def hallucinate(self, i: torch.Tensor) -> GeneratorState:
        """Initial GRU memory: MLP output for all cells but the last, ``i`` for the last."""
        if i.shape[-1] != self.cfg.noise_dim:
            raise ConfigError(f"identity noise has length {i.shape[-1]}, expected {self.cfg.noise_dim}")
        if i.dim() == 1:
            i = i.unsqueeze(0)
        m = self.hallucinator_norm(self.hallucinator(i))
        hidden = list(m.split(self.cfg.hidden_dim, dim=-1)) + [i]
        return GeneratorState(hidden)

    def step(self, x: torch.Tensor, state: GeneratorState) -> Tuple[GeneratorState, torch.Tensor]:
        hidden = []
        for cell, h in zip(self.cells, state.hidden):
            x = cell(x, h)
            hidden.append(x)
        return GeneratorState(hidden), x

    def rollout_intermediate(self, noise: NoiseInputs, t: Optional[int] = None) -> torch.Tensor:
        """Intermediate codes ``(B, t, hidden_dim)``; ``l_0`` depends on ``i`` only."""
        i, s = noise.identity, noise.steps
        if s.dim() == 2:
            s = s.unsqueeze(0)
        t = noise.t if t is None else t
        if t < 2:
            raise ConfigError(f"rollout length t must be >= 2, got {t}")
        if s.shape[1] != t - 1:
            raise ConfigError(f"step noise has {s.shape[1]} columns, rollout t={t} needs {t - 1}")
        if s.shape[-1] != self.cfg.noise_dim:
            raise ConfigError(f"step noise has width {s.shape[-1]}, expected {self.cfg.noise_dim}")
        state = self.hallucinate(i)
        state, l0 = self.step(torch.zeros_like(s[:, 0]), state)
        out = [l0]
        for k in range(t - 1):
            state, lk = self.step(s[:, k], state)
            out.append(lk)
        return torch.stack(out, dim=1)

    def map_latent(self, l: torch.Tensor) -> torch.Tensor:
        """``(..., hidden_dim)`` -> ``(..., layers, dim)``; batch norms pool over all leading axes."""
        lead = l.shape[:-1]
        w = self.mapper(l.reshape(-1, l.shape[-1])) * self.out_scale + self.out_shift
        return w.view(*lead, self.cfg.layers, self.cfg.dim)

    def rollout(self, noise: NoiseInputs, t: Optional[int] = None) -> Tuple[torch.Tensor, torch.Tensor]:
        l = self.rollout_intermediate(noise, t)
        if self.training:
            return l, self.map_latent(l)
        # frame by frame, so a frame's code does not depend on the rollout length
        return l, torch.stack([self.map_latent(l[:, k]) for k in range(l.shape[1])], dim=1)

    def forward(self, noise: NoiseInputs) -> torch.Tensor:
        return self.rollout(noise)[1]


class Critic(nn.Module):
    """Per-frame feature MLP followed by a strided 1-D convolution stack.

    No normalisation layers anywhere, so the gradient penalty applies per
    sample. The output is an unbounded scalar per sequence.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.window = cfg.train_window_t
        slope = cfg.leaky_slope
        self.features = nn.Sequential(
            mlp([cfg.layers * cfg.dim, cfg.dim, cfg.dim], slope),
            mlp([cfg.dim, cfg.dim, cfg.dim, cfg.dim, cfg.hidden_dim], slope),
        )
        convs = []
        ch, extent = cfg.hidden_dim, self.window
        while extent > 4:
            convs += [nn.Conv1d(ch, 2 * ch, 4, stride=2, padding=1), nn.LeakyReLU(slope)]
            ch, extent = 2 * ch, (extent - 2) // 2 + 1
        convs.append(nn.Conv1d(ch, 1, extent))
        self.head = nn.Sequential(*convs)
        for m in self.head:
            if isinstance(m, nn.Conv1d):
                nn.init.normal_(m.weight, 0.0, 0.02)
                nn.init.zeros_(m.bias)

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        # w: (B, t, layers, dim) -> (B,)
        if w.dim() == 3:
            w = w.unsqueeze(0)
        if w.shape[1] != self.window:
            raise ConfigError(f"critic expects sequences of {self.window} codes, got {w.shape[1]}")
        if w.shape[2:] != (self.cfg.layers, self.cfg.dim):
            raise ConfigError(
                f"critic expects codes of shape {(self.cfg.layers, self.cfg.dim)}, got {tuple(w.shape[2:])}"
            )
        e = self.features(w.flatten(2))  # (B, t, hidden)
        return self.head(e.transpose(1, 2)).view(-1)


def critic_score(critic: Critic, sequence: torch.Tensor) -> torch.Tensor:
    return critic(sequence)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
