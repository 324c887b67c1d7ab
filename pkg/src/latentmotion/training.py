"""Adversarial training loop, EMA of generator weights, checkpoints and sampling."""

import base64
import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
import torch

from .archive import read_archive, write_archive
from .dataio import LatentDataset, LatentSequence, WindowSampler
from .errors import ConfigError, FormatError, NumericError
from .losses import (
    LossWeights,
    RunningStats,
    angle_from_distance,
    endpoint_distance,
    gap_from_angle,
    interpolate_grad_norms,
    total_critic_loss,
    total_generator_loss,
    wgan_losses,
)
from .model import Critic, Generator, ModelConfig, NoiseInputs

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
REPORT = "report.jsonl"


@dataclass
class TrainConfig:
    epochs: int = 350
    batch_size: int = 16
    critic_steps_per_gen_step: int = 5
    learning_rate_gen: float = 1e-4
    learning_rate_critic: float = 1e-4
    adam_beta1: float = 0.0
    adam_beta2: float = 0.9
    ema_momentum: float = 0.995
    gap_stats_momentum: float = 0.99
    seed: int = 0
    deterministic: bool = True
    checkpoint_every: int = 10  # epochs; the final epoch is always saved
    standardize_outputs: bool = True

    def __post_init__(self):
        for name in ("epochs", "batch_size", "critic_steps_per_gen_step", "checkpoint_every"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigError(f"train.{name} must be a positive integer, got {value!r}")
        if self.batch_size < 2:
            raise ConfigError("train.batch_size must be at least 2 (batch norm needs a batch)")
        for name in ("learning_rate_gen", "learning_rate_critic"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not value > 0 or not math.isfinite(value):
                raise ConfigError(f"train.{name} must be positive, got {value!r}")
        for name in ("adam_beta1", "adam_beta2"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not 0 <= value < 1:
                raise ConfigError(f"train.{name} must lie in [0, 1), got {value!r}")
        for name in ("ema_momentum", "gap_stats_momentum"):
            value = getattr(self, name)
            if not isinstance(value, (int, float)) or not 0 < value < 1:
                raise ConfigError(f"train.{name} must lie in (0, 1), got {value!r}")
        if isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError(f"train.seed must be an integer, got {self.seed!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    records: List[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoints: List[Path] = field(default_factory=list)
    epochs_completed: int = 0

    def series(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.records])


class EMA:
    """Exponential moving average of a module's parameters.

    Batch-norm statistics of the raw model do not describe the averaged
    weights, so buffers are not averaged; call ``export`` to get a copy with
    recalibrated statistics.
    """

    def __init__(self, model: torch.nn.Module, momentum: float = 0.995):
        self.momentum = momentum
        self.model = copy.deepcopy(model)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def update(self, model: torch.nn.Module):
        m = self.momentum
        for ema_p, p in zip(self.model.parameters(), model.parameters()):
            ema_p.mul_(m).add_(p.detach(), alpha=1 - m)

    def export(self, **kwargs) -> torch.nn.Module:
        model = copy.deepcopy(self.model)
        recalibrate_batchnorm(model, **kwargs)
        return model


@torch.no_grad()
def recalibrate_batchnorm(generator: Generator, batches: int = 16, batch_size: int = 64,
                          t: Optional[int] = None, seed: int = 0):
    """Re-estimates every batch-norm running statistic as a plain average over seeded noise."""
    norms = [m for m in generator.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    saved = [m.momentum for m in norms]
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    generator.train()
    rng = torch.Generator().manual_seed(seed)
    dtype = next(generator.parameters()).dtype
    t = t or generator.cfg.train_window_t
    for _ in range(batches):
        generator(NoiseInputs.sample(generator.cfg, batch_size, t, rng, dtype=dtype))
    for m, mom in zip(norms, saved):
        m.momentum = mom
    generator.eval()


def _module_tensors(prefix: str, module: torch.nn.Module) -> Dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def _load_module(module: torch.nn.Module, prefix: str, tensors: Dict[str, np.ndarray]):
    state = {}
    for key, ref in module.state_dict().items():
        name = f"{prefix}.{key}"
        if name not in tensors:
            raise FormatError(f"checkpoint lacks tensor {name!r}")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise FormatError(f"tensor {name!r} has shape {arr.shape}, expected {tuple(ref.shape)}")
        state[key] = torch.from_numpy(np.array(arr)).to(ref.dtype)
    module.load_state_dict(state)


def _optimizer_tensors(prefix: str, opt: torch.optim.Optimizer) -> Dict[str, np.ndarray]:
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, value in st.items():
            out[f"{prefix}.{idx}.{key}"] = torch.as_tensor(value).cpu().numpy()
    return out


def _load_optimizer(opt: torch.optim.Optimizer, prefix: str, tensors: Dict[str, np.ndarray]):
    sd = opt.state_dict()
    state: Dict[int, dict] = {}
    for name, arr in tensors.items():
        if not name.startswith(prefix + "."):
            continue
        idx, key = name[len(prefix) + 1:].split(".", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(arr, dtype=np.float32))
    opt.load_state_dict({"state": state, "param_groups": sd["param_groups"]})


class Trainer:
    """Holds networks, optimisers and RNG so a run can be checkpointed and resumed exactly."""

    def __init__(self, dataset: LatentDataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
                 weights: Optional[LossWeights] = None, run_dir=None):
        if (dataset.layers, dataset.dim) != (model_cfg.layers, model_cfg.dim):
            raise ConfigError(
                f"dataset codes are {(dataset.layers, dataset.dim)}, model expects "
                f"{(model_cfg.layers, model_cfg.dim)}"
            )
        self.dataset = dataset
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.weights = weights or LossWeights()
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.sampler = WindowSampler(dataset, model_cfg.train_window_t, seed=train_cfg.seed)
        if train_cfg.deterministic:
            torch.use_deterministic_algorithms(True)

        torch.manual_seed(train_cfg.seed)
        self.generator = Generator(model_cfg)
        if train_cfg.standardize_outputs:
            frames = torch.from_numpy(dataset.frames.astype(np.float64))
            std = frames.std(dim=0) if len(dataset) > 1 else torch.ones_like(frames[0])
            self.generator.set_output_stats(frames.mean(dim=0), std)
        self.critic = Critic(model_cfg)
        self.ema = EMA(self.generator, train_cfg.ema_momentum)
        betas = (train_cfg.adam_beta1, train_cfg.adam_beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=train_cfg.learning_rate_gen, betas=betas,
                                      foreach=True)
        self.opt_c = torch.optim.Adam(self.critic.parameters(), lr=train_cfg.learning_rate_critic, betas=betas,
                                      foreach=True)
        self.gap_stats = RunningStats(model_cfg.hidden_dim, momentum=train_cfg.gap_stats_momentum)
        self.rng = torch.Generator().manual_seed(train_cfg.seed + 1)

        self.epoch = 0
        self.gen_step = 0
        self.critic_step = 0
        self.records: List[dict] = []
        self._last_critic: dict = {}

    # -- single updates ---------------------------------------------------

    def train_critic_step(self, real: torch.Tensor) -> dict:
        g, c = self.generator, self.critic
        g.train()
        # full batch even for a short final window batch, so batch norm sees >1 sample
        noise = NoiseInputs.sample(self.model_cfg, max(len(real), self.cfg.batch_size),
                                   self.model_cfg.train_window_t, self.rng)
        with torch.no_grad():
            fake = g(noise)[:len(real)]
        # one pass over both halves; the critic has no batch statistics
        scores = c(torch.cat([real, fake]))
        critic_wgan, _ = wgan_losses(scores[:len(real)], scores[len(real):])
        norms = interpolate_grad_norms(c, real, fake, generator=self.rng)
        gp = ((norms - 1) ** 2).mean()
        loss = total_critic_loss(critic_wgan, gp, self.weights)
        if not torch.isfinite(loss):
            raise NumericError(f"non-finite critic loss at critic step {self.critic_step}")
        self.opt_c.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_c.step()
        self.critic_step += 1
        self._last_critic = {
            "critic_loss": loss.item(),
            "critic_wgan": critic_wgan.item(),
            "gp": gp.item(),
            "grad_norm": norms.mean().item(),
        }
        return self._last_critic

    def train_generator_step(self) -> dict:
        g, c = self.generator, self.critic
        g.train()
        c.requires_grad_(False)
        try:
            noise = NoiseInputs.sample(self.model_cfg, self.cfg.batch_size,
                                       self.model_cfg.train_window_t, self.rng).requires_grad_()
            l, w = g.rollout(noise)
            _, gen_wgan = wgan_losses(torch.zeros(1), c(w))
            d = endpoint_distance(l, self.gap_stats, update_stats=True)
            use_gap = self.weights.lambda_gap > 0
            phi, _, _ = angle_from_distance(d, noise, create_graph=use_gap, retain_graph=True)
            gap = gap_from_angle(phi).mean()
            loss = total_generator_loss(gen_wgan, gap, self.weights) if use_gap else gen_wgan
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite generator loss at generator step {self.gen_step}")
            self.opt_g.zero_grad(set_to_none=True)
            loss.backward()
            self.opt_g.step()
        finally:
            c.requires_grad_(True)
        self.ema.update(g)
        self.gen_step += 1
        return {
            "generator_loss": loss.item(),
            "generator_wgan": gen_wgan.item(),
            "gap": gap.item(),
            "phi": phi.mean().item(),
        }

    # -- epochs -----------------------------------------------------------

    def run_epoch(self):
        n_critic = self.cfg.critic_steps_per_gen_step
        for batch in self.sampler.batches(self.epoch, self.cfg.batch_size):
            self.train_critic_step(torch.from_numpy(batch))
            if self.critic_step % n_critic == 0:
                rec = {"step": self.gen_step + 1, "epoch": self.epoch}
                rec.update(self.train_generator_step())
                rec.update(self._last_critic)
                self.records.append(rec)
                if self.run_dir is not None:
                    with open(self.run_dir / REPORT, "a") as fh:
                        fh.write(json.dumps(rec) + "\n")
        self.epoch += 1

    def train(self) -> TrainReport:
        start = time.perf_counter()
        report = TrainReport(records=self.records)
        if self.run_dir is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            if self.epoch == 0:
                (self.run_dir / REPORT).write_text("")
        while self.epoch < self.cfg.epochs:
            try:
                self.run_epoch()
            except NumericError as exc:
                if self.run_dir is not None:
                    diag = {"error": str(exc), "epoch": self.epoch, "step": self.gen_step,
                            "critic_step": self.critic_step, "last_critic": self._last_critic}
                    with open(self.run_dir / REPORT, "a") as fh:
                        fh.write(json.dumps(diag) + "\n")
                raise
            log.info("epoch %d/%d done (generator step %d)", self.epoch, self.cfg.epochs, self.gen_step)
            last = self.epoch == self.cfg.epochs
            if self.run_dir is not None and (last or self.epoch % self.cfg.checkpoint_every == 0):
                report.checkpoints.append(self.save_checkpoint())
        report.wall_clock = time.perf_counter() - start
        report.epochs_completed = self.epoch
        return report

    def ema_generator(self) -> Generator:
        """EMA weights with recalibrated batch-norm statistics, in inference mode."""
        return self.ema.export(seed=self.cfg.seed)

    # -- persistence ------------------------------------------------------

    def _header(self, ema: bool) -> dict:
        return {
            "format_version": CHECKPOINT_VERSION,
            "model_config": self.model_cfg.to_dict(),
            "training_step": self.gen_step,
            "ema": ema,
        }

    def save_checkpoint(self) -> Path:
        out = self.run_dir / f"step_{self.gen_step}"
        header = self._header(ema=False)
        header.update({
            "epoch": self.epoch,
            "critic_step": self.critic_step,
            "train_config": self.cfg.to_dict(),
            "loss_weights": self.weights.to_dict(),
            "gap_stats_count": self.gap_stats.count,
            "rng_state": base64.b64encode(self.rng.get_state().numpy().tobytes()).decode(),
        })
        tensors = {}
        tensors.update(_module_tensors("generator", self.generator))
        tensors.update(_module_tensors("critic", self.critic))
        tensors.update(_module_tensors("ema", self.ema.model))
        tensors.update(_optimizer_tensors("opt_g", self.opt_g))
        tensors.update(_optimizer_tensors("opt_c", self.opt_c))
        tensors["gap_stats.mean"] = self.gap_stats.mean.numpy()
        tensors["gap_stats.var"] = self.gap_stats.var.numpy()
        write_archive(out / "raw.ckpt", header, tensors)
        write_archive(out / "ema.ckpt", self._header(ema=True), _module_tensors("generator", self.ema_generator()))
        return out

    def load_checkpoint(self, path):
        header, tensors = read_archive(path)
        if header.get("format_version") != CHECKPOINT_VERSION or header.get("ema", True):
            raise FormatError(f"{path} is not a raw training checkpoint")
        if header["model_config"] != self.model_cfg.to_dict():
            raise ConfigError("checkpoint model_config differs from the run's model config")
        _load_module(self.generator, "generator", tensors)
        _load_module(self.critic, "critic", tensors)
        _load_module(self.ema.model, "ema", tensors)
        _load_optimizer(self.opt_g, "opt_g", tensors)
        _load_optimizer(self.opt_c, "opt_c", tensors)
        self.gap_stats.load_state_dict({
            "mean": tensors["gap_stats.mean"], "var": tensors["gap_stats.var"],
            "count": header["gap_stats_count"],
        })
        state = np.frombuffer(base64.b64decode(header["rng_state"]), dtype=np.uint8)
        self.rng.set_state(torch.from_numpy(state.copy()))
        self.epoch = header["epoch"]
        self.gen_step = header["training_step"]
        self.critic_step = header["critic_step"]
        self.records[:] = [r for r in self.records if r.get("step", 0) <= self.gen_step]

    def resume(self) -> bool:
        """Loads the latest checkpoint in ``run_dir``; returns False if none exists."""
        latest = latest_checkpoint(self.run_dir)
        if latest is None:
            return False
        report = self.run_dir / REPORT
        if report.exists():
            self.records[:] = [json.loads(line) for line in report.read_text().splitlines() if line.strip()]
        self.load_checkpoint(latest / "raw.ckpt")
        # drop records written after the checkpoint, including failure diagnostics
        self.records[:] = [r for r in self.records if "error" not in r]
        report.write_text("".join(json.dumps(r) + "\n" for r in self.records))
        return True


def latest_checkpoint(run_dir) -> Optional[Path]:
    if run_dir is None or not Path(run_dir).is_dir():
        return None
    steps = []
    for p in Path(run_dir).glob("step_*"):
        if (p / "raw.ckpt").is_file() and p.name[5:].isdigit():
            steps.append((int(p.name[5:]), p))
    return max(steps)[1] if steps else None


def train(dataset: LatentDataset, model_cfg: ModelConfig, train_cfg: TrainConfig,
          weights: Optional[LossWeights] = None, run_dir=None, resume: bool = False) -> TrainReport:
    trainer = Trainer(dataset, model_cfg, train_cfg, weights, run_dir)
    if resume:
        trainer.resume()
    return trainer.train()


def load_generator(path, use_ema: bool = True) -> Generator:
    """Generator in inference mode from a checkpoint file, step directory or run directory."""
    path = Path(path)
    if path.is_dir():
        if not (path / "raw.ckpt").exists():
            latest = latest_checkpoint(path)
            if latest is None:
                raise FormatError(f"no checkpoints under {path}")
            path = latest
        path = path / ("ema.ckpt" if use_ema else "raw.ckpt")
    header, tensors = read_archive(path)
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"unknown checkpoint format_version {header.get('format_version')!r}")
    try:
        cfg = ModelConfig(**header["model_config"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"checkpoint header lacks a valid model_config: {exc}") from exc
    gen = Generator(cfg)
    prefix = "ema" if (not header["ema"] and use_ema and "ema.cells.0.weight_ih" in tensors) else "generator"
    _load_module(gen, prefix, tensors)
    if prefix == "ema":
        recalibrate_batchnorm(gen, seed=header.get("train_config", {}).get("seed", 0))
    gen.eval()
    return gen


@torch.no_grad()
def generate(generator: Generator, count: int, t: int, seed: int = 0, batch_size: int = 256) -> np.ndarray:
    """``count`` sequences of ``t`` codes as a float32 array ``(count, t, layers, dim)``.

    Noise is drawn up front, so the result does not depend on ``batch_size``.
    """
    if t < 2:
        raise ConfigError(f"sample length t must be >= 2, got {t}")
    if count < 1:
        raise ConfigError(f"sample count must be positive, got {count}")
    was_training = generator.training
    generator.eval()
    cfg = generator.cfg
    rng = torch.Generator().manual_seed(seed)
    noise = NoiseInputs.sample(cfg, count, t, rng)
    dtype = next(generator.parameters()).dtype
    out = np.empty((count, t, cfg.layers, cfg.dim), dtype=np.float32)
    for b in range(0, count, batch_size):
        chunk = NoiseInputs(noise.identity[b:b + batch_size].to(dtype), noise.steps[b:b + batch_size].to(dtype))
        out[b:b + batch_size] = generator(chunk).float().numpy()
    generator.train(was_training)
    if not np.isfinite(out).all():
        raise NumericError("generator produced non-finite codes")
    return out


def sample(checkpoint, t: int, count: int, seed: int = 0, use_ema: bool = True,
           fps: float = 25.0) -> List[LatentSequence]:
    codes = generate(load_generator(checkpoint, use_ema=use_ema), count, t, seed)
    return [LatentSequence(c, fps=fps, meta={"seed": seed, "index": k}) for k, c in enumerate(codes)]
