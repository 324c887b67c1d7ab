"""Offset trick: move a generated trajectory onto a new identity.

A PCA of the training frames spans the motion states of the training actor.
A new code ``w_new`` is projected onto that affine subspace; the residual
``delta = w_new - proj(w_new)`` is the identity offset added to every frame.
"""

from dataclasses import dataclass, replace
from typing import Union

import numpy as np
from sklearn.utils.extmath import randomized_svd

from .archive import read_archive, write_archive
from .dataio import LatentDataset, LatentSequence
from .errors import ConfigError, FormatError

DEFAULT_COMPONENTS = 32
EXACT_SVD_MAX_FRAMES = 20000
BASIS_VERSION = 1


@dataclass
class MotionBasis:
    mean: np.ndarray  # (layers * dim,)
    directions: np.ndarray  # (k, layers * dim), orthonormal rows
    explained_variance: np.ndarray  # (k,), descending
    layers: int
    dim: int

    @property
    def k(self) -> int:
        return len(self.directions)

    def _flat(self, code: np.ndarray) -> np.ndarray:
        code = np.asarray(code, dtype=np.float64)
        if code.shape[-2:] != (self.layers, self.dim):
            raise ConfigError(
                f"code shape {code.shape[-2:]} does not match basis shape {(self.layers, self.dim)}"
            )
        return code.reshape(*code.shape[:-2], self.layers * self.dim)

    def coordinates(self, code: np.ndarray) -> np.ndarray:
        return (self._flat(code) - self.mean) @ self.directions.T

    def project(self, code: np.ndarray) -> np.ndarray:
        flat = self.mean + self.coordinates(code) @ self.directions
        return flat.reshape(np.shape(code))

    def save(self, path):
        header = {"format_version": BASIS_VERSION, "k": self.k, "layers": self.layers, "dim": self.dim}
        write_archive(path, header, {
            "mean": self.mean, "directions": self.directions,
            "explained_variance": self.explained_variance,
        })

    @classmethod
    def load(cls, path) -> "MotionBasis":
        header, t = read_archive(path)
        if header.get("format_version") != BASIS_VERSION:
            raise FormatError(f"unknown basis format_version {header.get('format_version')!r}")
        try:
            k, layers, dim = header["k"], header["layers"], header["dim"]
            mean = t["mean"].astype(np.float64)
            dirs = t["directions"].astype(np.float64)
            var = t["explained_variance"].astype(np.float64)
        except KeyError as exc:
            raise FormatError(f"basis file lacks {exc}") from exc
        if mean.shape != (layers * dim,) or dirs.shape != (k, layers * dim) or var.shape != (k,):
            raise FormatError("basis tensors disagree with the header dimensions")
        # float32 storage loses orthonormality at ~1e-7; restore it
        q, r = np.linalg.qr(dirs.T)
        q *= np.sign(np.diag(r))
        return cls(mean, q.T, var, layers, dim)


def _fix_signs(directions: np.ndarray) -> np.ndarray:
    idx = np.abs(directions).argmax(axis=1)
    signs = np.sign(directions[np.arange(len(directions)), idx])
    signs[signs == 0] = 1
    return directions * signs[:, None]


def fit_motion_basis(frames: Union[LatentDataset, np.ndarray], k: int = DEFAULT_COMPONENTS,
                     seed: int = 0) -> MotionBasis:
    """Top-``k`` principal directions of the centred, flattened frames."""
    if isinstance(frames, LatentDataset):
        frames = frames.frames
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3:
        raise ConfigError(f"frames must be (N, layers, dim), got {frames.shape}")
    n, layers, dim = frames.shape
    if k < 1 or k > layers * dim:
        raise ConfigError(f"k must lie in [1, {layers * dim}], got {k}")
    if n < k + 1:
        raise ConfigError(f"need at least k+1={k + 1} frames for {k} components, got {n}")
    x = frames.reshape(n, layers * dim)
    mean = x.mean(axis=0)
    xc = x - mean
    if n <= EXACT_SVD_MAX_FRAMES:
        _, s, vt = np.linalg.svd(xc, full_matrices=False)
        s, vt = s[:k], vt[:k]
    else:
        _, s, vt = randomized_svd(xc, k, n_oversamples=10, random_state=seed)
    return MotionBasis(mean, _fix_signs(vt), s ** 2 / (n - 1), layers, dim)


def project(basis: MotionBasis, w_new: np.ndarray) -> np.ndarray:
    return basis.project(w_new)


def compute_offset(basis: MotionBasis, w_new: np.ndarray) -> np.ndarray:
    w_new = np.asarray(w_new, dtype=np.float64)
    return w_new - basis.project(w_new)


def apply_offset(traj: Union[LatentSequence, np.ndarray], delta: np.ndarray):
    """Shift every frame by ``delta``; a LatentSequence keeps its metadata.

    ``delta`` is rounded to float32 and the sum is taken in float64. Two
    24-bit mantissas then add without rounding (unless their magnitudes are
    more than 2**29 apart), so frame differences and ``+delta, -delta``
    round trips are exact.
    """
    codes = traj.codes if isinstance(traj, LatentSequence) else np.asarray(traj)
    delta = np.asarray(delta)
    if codes.shape[-2:] != delta.shape:
        raise ConfigError(f"trajectory frames {codes.shape[-2:]} and offset {delta.shape} differ in shape")
    shifted = codes.astype(np.float64) + delta.astype(np.float32).astype(np.float64)
    if isinstance(traj, LatentSequence):
        return replace(traj, codes=shifted, meta=dict(traj.meta))
    return shifted
