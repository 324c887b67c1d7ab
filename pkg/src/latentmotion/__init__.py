"""Latent-space video generation: a recurrent Wasserstein GAN over W+ code sequences."""

__version__ = "0.1.0"

from .dataio import LatentDataset, LatentSequence, SyntheticSpec, generate_synthetic, load_dataset, save_dataset
from .losses import LossWeights, RunningStats, gradient_angle_penalty, gradient_penalty, wgan_losses
from .metrics import eval_acd, eval_fid, eval_fvd, frechet_distance, GaussianStats
from .model import Critic, Generator, ModelConfig, NoiseInputs
from .training import TrainConfig, Trainer, sample, train
from .transfer import MotionBasis, apply_offset, compute_offset, fit_motion_basis, project
