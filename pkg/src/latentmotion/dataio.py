"""Latent datasets, window sampling, synthetic trajectories and decoder adapters."""

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterator, Optional, Protocol

import numpy as np

from .errors import ConfigError, FormatError

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
PAYLOAD = "latents.bin"


@dataclass
class LatentDataset:
    """Frames of shape ``(N, layers, dim)`` in temporal order."""

    frames: np.ndarray
    fps: float = 25.0
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 3 or len(self.frames) < 1:
            raise ConfigError(f"frames must be (N>=1, layers, dim), got {self.frames.shape}")
        if not self.fps > 0:
            raise ConfigError(f"fps must be positive, got {self.fps}")
        if not np.isfinite(self.frames).all():
            raise ConfigError("frames contain non-finite values")

    def __len__(self):
        return len(self.frames)

    @property
    def layers(self) -> int:
        return self.frames.shape[1]

    @property
    def dim(self) -> int:
        return self.frames.shape[2]


@dataclass
class LatentSequence:
    """One trajectory of codes ``(t, layers, dim)`` plus frame-rate metadata."""

    codes: np.ndarray
    fps: float = 25.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.codes = np.asarray(self.codes)
        if self.codes.ndim != 3:
            raise ConfigError(f"sequence must be (t, layers, dim), got {self.codes.shape}")

    def __len__(self):
        return len(self.codes)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return replace(self, codes=self.codes[idx], meta=dict(self.meta))
        return self.codes[idx]


def payload_bytes(num_frames: int, layers: int, dim: int) -> int:
    return num_frames * layers * dim * 4


def save_dataset(dataset: LatentDataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, layers, dim = dataset.frames.shape
    manifest = {
        "format_version": FORMAT_VERSION,
        "num_frames": n,
        "layers": layers,
        "dim": dim,
        "fps": dataset.fps,
        "source_id": dataset.source_id,
        "dtype": "f32",
        "byte_order": "little",
    }
    (path / PAYLOAD).write_bytes(dataset.frames.astype("<f4").tobytes(order="C"))
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_dataset(path) -> LatentDataset:
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"missing {MANIFEST} in {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable {MANIFEST}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unknown format_version {manifest.get('format_version')!r}")
    if manifest.get("dtype", "f32") != "f32" or manifest.get("byte_order", "little") != "little":
        raise FormatError("only little-endian f32 payloads are supported")
    try:
        n, layers, dim = (int(manifest[k]) for k in ("num_frames", "layers", "dim"))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed manifest: {exc}") from exc
    payload = path / PAYLOAD
    if not payload.is_file():
        raise FormatError(f"missing {PAYLOAD} in {path}")
    expected = payload_bytes(n, layers, dim)
    actual = payload.stat().st_size
    if actual != expected:
        raise FormatError(
            f"{PAYLOAD} size mismatch: expected {expected} bytes, found {actual}"
        )
    frames = np.fromfile(payload, dtype="<f4").reshape(n, layers, dim)
    return LatentDataset(
        frames.astype(np.float32, copy=False),
        fps=float(manifest.get("fps", 25.0)),
        source_id=manifest.get("source_id", ""),
    )


class WindowSampler:
    """Contiguous ``t``-frame windows, one shuffled pass over all starts per epoch.

    The order of epoch ``e`` depends only on ``(seed, e)``, so a run can be
    resumed at any epoch boundary.
    """

    def __init__(self, dataset: LatentDataset, t: int, seed: int = 0):
        if t < 1:
            raise ConfigError(f"window length must be positive, got {t}")
        if len(dataset) < t:
            raise ConfigError(f"dataset has {len(dataset)} frames, shorter than window t={t}")
        self.dataset = dataset
        self.t = t
        self.seed = seed

    def __len__(self):
        return len(self.dataset) - self.t + 1

    def starts(self, epoch: int) -> np.ndarray:
        rng = np.random.default_rng([self.seed, epoch])
        return rng.permutation(len(self))

    def epoch(self, epoch: int) -> Iterator[np.ndarray]:
        for s in self.starts(epoch):
            yield self.dataset.frames[s:s + self.t]

    def batches(self, epoch: int, batch_size: int) -> Iterator[np.ndarray]:
        starts = self.starts(epoch)
        offsets = np.arange(self.t)
        for b in range(0, len(starts), batch_size):
            idx = starts[b:b + batch_size, None] + offsets
            yield self.dataset.frames[idx]

    def __iter__(self):
        epoch = 0
        while True:
            yield from self.epoch(epoch)
            epoch += 1


def window_sampler(dataset: LatentDataset, t: int, seed: int = 0) -> WindowSampler:
    return WindowSampler(dataset, t, seed)


@dataclass
class SyntheticSpec:
    num_frames: int = 2000
    layers: int = 4
    dim: int = 16
    latent_dim_motion: int = 8
    num_sinusoids: int = 4
    noise_scale: float = 0.05
    seed: int = 0
    fps: float = 25.0
    # If set, one motif of this many frames is generated and tiled.
    motif_frames: Optional[int] = None

    def validate(self):
        for name in ("num_frames", "layers", "dim", "latent_dim_motion", "num_sinusoids"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if not (self.noise_scale >= 0 and math.isfinite(self.noise_scale)):
            raise ConfigError(f"noise_scale must be >= 0, got {self.noise_scale}")
        if self.motif_frames is not None and self.motif_frames < 1:
            raise ConfigError(f"motif_frames must be positive, got {self.motif_frames}")
        if not self.fps > 0:
            raise ConfigError(f"fps must be positive, got {self.fps}")


def _motion(spec: SyntheticSpec, rng: np.random.Generator, n: int) -> np.ndarray:
    r, m = spec.latent_dim_motion, spec.num_sinusoids
    amp = rng.uniform(0.5, 1.5, size=(r, m)) / np.sqrt(m)
    # cycles per frame: periods between ~12 and ~200 frames
    freq = rng.uniform(0.005, 0.08, size=(r, m))
    phase = rng.uniform(0, 2 * np.pi, size=(r, m))
    k = np.arange(n)[:, None, None]
    z = (amp * np.sin(2 * np.pi * freq * k + phase)).sum(axis=-1)
    return z + spec.noise_scale * rng.standard_normal((n, r))


def generate_synthetic(spec: SyntheticSpec) -> LatentDataset:
    """Low-rank sinusoidal motion embedded affinely into ``layers x dim`` codes."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    r = spec.latent_dim_motion
    size = spec.layers * spec.dim
    embed = rng.standard_normal((r, size)) / np.sqrt(r)
    offset = rng.standard_normal(size)
    if spec.motif_frames is None:
        z = _motion(spec, rng, spec.num_frames)
    else:
        motif = _motion(spec, rng, spec.motif_frames)
        reps = -(-spec.num_frames // spec.motif_frames)
        z = np.tile(motif, (reps, 1))[:spec.num_frames]
    frames = (z @ embed + offset).reshape(spec.num_frames, spec.layers, spec.dim)
    return LatentDataset(frames, fps=spec.fps, source_id=f"synthetic-seed{spec.seed}")


class DecoderAdapter(Protocol):
    """Renders one latent code to an ``H x W x 3`` uint8 image."""

    resolution: int

    def decode(self, code: np.ndarray) -> np.ndarray: ...


class EmbedderAdapter(Protocol):
    """Inverts one ``H x W x 3`` image to a latent code (e.g. a pSp-style encoder)."""

    def embed(self, image: np.ndarray) -> np.ndarray: ...


class NullDecoder:
    """False-color visualisation of the code matrix, nearest-neighbour upscaled."""

    def __init__(self, resolution: int = 256):
        if resolution < 1:
            raise ConfigError(f"resolution must be positive, got {resolution}")
        self.resolution = resolution

    def decode(self, code: np.ndarray) -> np.ndarray:
        code = np.asarray(code, dtype=np.float64)
        if code.ndim != 2:
            raise ConfigError(f"code must be (layers, dim), got {code.shape}")
        rows = np.arange(self.resolution) * code.shape[0] // self.resolution
        cols = np.arange(self.resolution) * code.shape[1] // self.resolution
        v = np.tanh(code[np.ix_(rows, cols)])
        rgb = np.stack([(1 + v) / 2, 1 - np.abs(v), (1 - v) / 2], axis=-1)
        return np.round(rgb * 255).astype(np.uint8)


DECODERS: Dict[str, Callable[..., DecoderAdapter]] = {"null": NullDecoder}


def register_decoder(name: str, factory: Callable[..., DecoderAdapter]):
    DECODERS[name] = factory


def get_decoder(name: str, **kwargs) -> DecoderAdapter:
    try:
        factory = DECODERS[name]
    except KeyError:
        raise ConfigError(f"unknown decoder {name!r}; registered: {sorted(DECODERS)}") from None
    return factory(**kwargs)


class DecodeError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"decoder failed at frame {index}: {cause}")
        self.index = index


def decode_sequence(adapter: DecoderAdapter, seq) -> Iterator[np.ndarray]:
    codes = seq.codes if isinstance(seq, LatentSequence) else seq
    for k, code in enumerate(codes):
        try:
            frame = adapter.decode(code)
        except Exception as exc:
            raise DecodeError(k, exc) from exc
        yield frame
