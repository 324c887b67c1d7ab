"""Fréchet distances over pluggable features, and average content distance."""

import json
import re
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Optional, Union

import numpy as np
import torch
from scipy.spatial.distance import pdist

from .dataio import LatentDataset, LatentSequence
from .errors import ConfigError, NumericError
from .training import generate

RIDGE = 1e-6
FID_FRAMES = 8000
FVD_VIDEOS = 2048
FVD_CLIP = 25
ACD_SAMPLES = 128
ACD_LENGTH = 400


@dataclass
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @classmethod
    def fit(cls, features: np.ndarray) -> "GaussianStats":
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or len(x) < 2:
            raise ConfigError(f"need at least 2 feature vectors of shape (n, F), got {x.shape}")
        cov = np.cov(x, rowvar=False, ddof=1).reshape(x.shape[1], x.shape[1])
        return cls(x.mean(0), (cov + cov.T) / 2, len(x))

    def is_degenerate(self, tol: float = 1e-10) -> bool:
        scale = max(np.trace(self.cov) / len(self.cov), 1.0)
        return bool(np.linalg.eigvalsh(self.cov).min() <= tol * scale)

    def with_ridge(self, ridge: float = RIDGE) -> "GaussianStats":
        return GaussianStats(self.mean, self.cov + ridge * np.eye(len(self.cov)), self.count)


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((a + a.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """``||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))``, clamped at 0.

    ``Tr (S_a S_b)^(1/2)`` is evaluated as ``Tr (A S_b A)^(1/2)`` with
    ``A = S_a^(1/2)``: the same eigenvalues, but symmetric, so ``eigh`` applies.
    """
    if a.mean.shape != b.mean.shape:
        raise ConfigError(f"feature sizes differ: {a.mean.shape} vs {b.mean.shape}")
    for arr in (a.mean, a.cov, b.mean, b.cov):
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite Gaussian statistics")
    root_a = _psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_sqrt = np.sqrt(np.clip(vals, 0, None)).sum()
    diff = a.mean - b.mean
    d = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2 * tr_sqrt
    return float(max(d, 0.0))


# -- feature extractors ----------------------------------------------------

class IdentityFlatten:
    name = "identity-flatten"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64).reshape(len(x), -1)


class RandomProjection:
    """Seeded Gaussian projection of the flattened input to ``k`` dimensions."""

    def __init__(self, k: int, seed: int = 0):
        self.k = k
        self.seed = seed
        self.name = f"random-projection-{k}"
        self._mats: Dict[int, np.ndarray] = {}

    def __call__(self, x: np.ndarray) -> np.ndarray:
        flat = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        n_in = flat.shape[1]
        if n_in not in self._mats:
            rng = np.random.default_rng([self.seed, n_in])
            self._mats[n_in] = rng.standard_normal((n_in, self.k)) / np.sqrt(n_in)
        return flat @ self._mats[n_in]


class TemporalMean:
    """Clip ``(n, t, ...)`` -> per-clip time average of the inner frame features."""

    name = "temporal-mean"

    def __init__(self, inner: Optional[Callable] = None):
        self.inner = inner or IdentityFlatten()

    def __call__(self, clips: np.ndarray) -> np.ndarray:
        clips = np.asarray(clips)
        n, t = clips.shape[:2]
        feats = self.inner(clips.reshape(n * t, *clips.shape[2:]))
        return feats.reshape(n, t, -1).mean(axis=1)


EXTRACTORS: Dict[str, Callable[[], Callable]] = {
    "identity-flatten": IdentityFlatten,
    "temporal-mean": TemporalMean,
}


def get_extractor(name: Union[str, Callable]) -> Callable:
    if callable(name):
        return name
    m = re.fullmatch(r"random-projection-(\d+)", name)
    if m:
        return RandomProjection(int(m.group(1)))
    try:
        return EXTRACTORS[name]()
    except KeyError:
        raise ConfigError(f"unknown feature extractor {name!r}") from None


def register_extractor(name: str, factory: Callable[[], Callable]):
    EXTRACTORS[name] = factory


def _extractor_name(ex) -> str:
    return getattr(ex, "name", type(ex).__name__)


# -- protocols ---------------------------------------------------------------

@dataclass
class MetricReport:
    metric: str
    value: float
    n: int
    seed: int
    extractor: str
    ridge_applied: bool
    clip_len: Optional[int] = None
    length: Optional[int] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _frechet_report(metric, real_feats, fake_feats, n, seed, extractor, **extra) -> MetricReport:
    a, b = GaussianStats.fit(real_feats), GaussianStats.fit(fake_feats)
    ridge = a.is_degenerate() or b.is_degenerate()
    if ridge:
        a, b = a.with_ridge(), b.with_ridge()
    return MetricReport(metric, frechet_distance(a, b), n, seed, _extractor_name(extractor), ridge, **extra)


def _as_codes(fake, count: int, t: int, seed: int) -> np.ndarray:
    """Generated sequences ``(m, t', layers, dim)`` from an array, sequence list or generator."""
    if isinstance(fake, torch.nn.Module):
        return generate(fake, count, t, seed)
    if isinstance(fake, LatentDataset):
        return fake.frames[None]
    if isinstance(fake, (list, tuple)):
        return np.stack([s.codes if isinstance(s, LatentSequence) else np.asarray(s) for s in fake])
    codes = np.asarray(fake)
    return codes[None] if codes.ndim == 3 else codes


def _clips(seqs: np.ndarray, n: int, clip_len: int, rng: np.random.Generator) -> np.ndarray:
    m, t = seqs.shape[:2]
    if t < clip_len:
        raise ConfigError(f"sequences of length {t} are shorter than clip_len {clip_len}")
    which = rng.integers(0, m, size=n)
    start = rng.integers(0, t - clip_len + 1, size=n)
    return seqs[which[:, None], start[:, None] + np.arange(clip_len)]


def eval_fid(real: LatentDataset, fake, extractor="identity-flatten", n_frames: int = FID_FRAMES,
             seed: int = 0, gen_length: Optional[int] = None) -> MetricReport:
    """Frame-level Fréchet distance on ``n_frames`` frames drawn with replacement per side.

    When ``fake`` is a generator, ``ceil(n_frames / gen_length)`` sequences of
    ``gen_length`` (default: its training window) are generated with ``seed``.
    """
    ex = get_extractor(extractor)
    if isinstance(fake, torch.nn.Module):
        gen_length = gen_length or fake.cfg.train_window_t
    gen_length = gen_length or 2
    seqs = _as_codes(fake, -(-n_frames // gen_length), gen_length, seed)
    fake_frames = seqs.reshape(-1, *seqs.shape[2:])
    # each side draws from its own identically seeded stream
    real_pick = real.frames[np.random.default_rng(seed).integers(0, len(real), size=n_frames)]
    fake_pick = fake_frames[np.random.default_rng(seed).integers(0, len(fake_frames), size=n_frames)]
    return _frechet_report("fid", ex(real_pick), ex(fake_pick), n_frames, seed, ex)


def eval_fvd(real: LatentDataset, fake, extractor="random-projection-32", n_videos: int = FVD_VIDEOS,
             clip_len: int = FVD_CLIP, seed: int = 0, gen_length: Optional[int] = None) -> MetricReport:
    """Clip-level Fréchet distance on ``n_videos`` clips of ``clip_len`` codes per side."""
    ex = get_extractor(extractor)
    seqs = _as_codes(fake, n_videos, gen_length or clip_len, seed)
    real_clips = _clips(real.frames[None], n_videos, clip_len, np.random.default_rng(seed))
    fake_clips = _clips(seqs, n_videos, clip_len, np.random.default_rng(seed))
    return _frechet_report("fvd", ex(real_clips), ex(fake_clips), n_videos, seed, ex, clip_len=clip_len)


def average_content_distance(features: np.ndarray) -> float:
    """Mean pairwise L2 distance between the rows of ``(t, F)`` features."""
    if len(features) < 2:
        raise ConfigError("each sequence needs at least 2 frames")
    return float(pdist(features, "euclidean").mean())


def eval_acd(samples, id_extractor="identity-flatten", n_samples: int = ACD_SAMPLES,
             length: int = ACD_LENGTH, seed: int = 0) -> MetricReport:
    """Average content distance over videos: a list of sequences, or a generator to sample from."""
    ex = get_extractor(id_extractor)
    if isinstance(samples, (list, tuple)):
        seqs = [s.codes if isinstance(s, LatentSequence) else np.asarray(s) for s in samples]
    else:
        seqs = list(_as_codes(samples, n_samples, length, seed))
    if len(seqs) == 0:
        raise ConfigError("eval_acd needs at least one sample")
    values = [average_content_distance(ex(seq)) for seq in seqs]
    lengths = {len(s) for s in seqs}
    return MetricReport("acd", float(np.mean(values)), len(seqs), seed, _extractor_name(ex),
                        False, length=lengths.pop() if len(lengths) == 1 else None)
