import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from latentmotion.dataio import LatentDataset, LatentSequence, SyntheticSpec, generate_synthetic
from latentmotion.errors import ConfigError, FormatError
from latentmotion.transfer import (
    MotionBasis,
    apply_offset,
    compute_offset,
    fit_motion_basis,
    project,
)


def plane_frames(n=200, layers=3, dim=4, seed=0):
    rng = np.random.default_rng(seed)
    size = layers * dim
    c = rng.standard_normal(size) * 3
    q, _ = np.linalg.qr(rng.standard_normal((size, 2)))
    coeffs = rng.standard_normal((n, 2)) * [4.0, 1.5]
    return (c + coeffs @ q.T).reshape(n, layers, dim), c, q


@pytest.fixture(scope="module")
def basis():
    ds = generate_synthetic(SyntheticSpec(num_frames=400, layers=3, dim=6, latent_dim_motion=5, seed=4))
    return fit_motion_basis(ds, k=5)


def gram_schmidt_residual(vectors, x):
    # classical orthogonalisation of the raw direction set, then residual
    q = []
    for v in vectors:
        u = v.copy()
        for e in q:
            u -= (e @ u) * e
        q.append(u / np.linalg.norm(u))
    r = x.copy()
    for e in q:
        r -= (e @ r) * e
    return r


def test_plane_recovered():
    frames, c, q = plane_frames()
    b = fit_motion_basis(frames, k=2)
    flat = frames.reshape(len(frames), -1)
    assert np.abs(b.project(frames) - frames).max() <= 1e-5
    # the mean lies on the plane and the span matches
    off = b.mean - c
    assert np.linalg.norm(off - q @ (q.T @ off)) <= 1e-8
    assert np.allclose(np.abs(np.linalg.svd(b.directions @ q)[1]), 1.0, atol=1e-8)
    assert np.allclose(b.mean, flat.mean(0))


def test_identical_frames_zero_variance():
    frames = np.ones((10, 2, 3))
    b = fit_motion_basis(frames, k=3)
    assert np.all(b.explained_variance == 0)
    assert np.allclose(b.directions @ b.directions.T, np.eye(3), atol=1e-6)


def test_default_k_full_size():
    frames = np.random.default_rng(0).standard_normal((40, 18, 512)).astype(np.float32)
    b = fit_motion_basis(frames)
    assert b.directions.shape == (32, 9216)
    assert b.mean.shape == (9216,)


def test_basis_invariants(basis):
    g = basis.directions @ basis.directions.T
    assert np.abs(g - np.eye(basis.k)).max() <= 1e-6
    assert np.all(np.diff(basis.explained_variance) <= 0)
    assert np.all(basis.explained_variance >= 0)


def test_explained_variance_matches_covariance(basis):
    ds = generate_synthetic(SyntheticSpec(num_frames=400, layers=3, dim=6, latent_dim_motion=5, seed=4))
    x = ds.frames.reshape(400, -1).astype(np.float64)
    top = np.sort(np.linalg.eigvalsh(np.cov(x, rowvar=False)))[::-1][:5]
    np.testing.assert_allclose(basis.explained_variance, top, rtol=1e-8)


def test_sign_convention(basis):
    idx = np.abs(basis.directions).argmax(axis=1)
    assert np.all(basis.directions[np.arange(basis.k), idx] > 0)


def test_too_few_frames():
    with pytest.raises(ConfigError):
        fit_motion_basis(np.zeros((3, 2, 2)), k=3)
    with pytest.raises(ConfigError):
        fit_motion_basis(np.zeros((30, 2, 2)), k=5)


def test_randomized_path_agrees_with_exact(monkeypatch):
    import latentmotion.transfer as tr
    frames = generate_synthetic(SyntheticSpec(num_frames=600, layers=2, dim=8, latent_dim_motion=4,
                                              noise_scale=0.01, seed=3)).frames
    exact = fit_motion_basis(frames, k=4)
    monkeypatch.setattr(tr, "EXACT_SVD_MAX_FRAMES", 10)
    approx = fit_motion_basis(frames, k=4, seed=0)
    assert np.abs(np.abs(np.diag(exact.directions @ approx.directions.T)) - 1).max() <= 1e-6
    again = fit_motion_basis(frames, k=4, seed=0)
    assert approx.directions.tobytes() == again.directions.tobytes()


def test_project_in_subspace_is_identity(basis):
    w = (basis.mean + 2.0 * basis.directions[0] - 0.7 * basis.directions[3]).reshape(3, 6)
    assert np.abs(project(basis, w) - w).max() <= 1e-6
    assert np.abs(compute_offset(basis, w)).max() <= 1e-6


def test_project_drops_orthogonal_part(basis):
    u = np.random.default_rng(1).standard_normal(basis.mean.shape)
    u -= basis.directions.T @ (basis.directions @ u)
    w = (basis.mean + 5 * basis.directions[0] + 3 * u).reshape(3, 6)
    np.testing.assert_allclose(project(basis, w).ravel(), basis.mean + 5 * basis.directions[0], atol=1e-6)


def test_offset_matches_gram_schmidt(basis):
    rng = np.random.default_rng(2)
    w = rng.standard_normal((3, 6)) * 2
    delta = compute_offset(basis, w)
    oracle = gram_schmidt_residual(list(basis.directions), w.ravel() - basis.mean)
    assert np.abs(delta.ravel() - oracle).max() <= 1e-6


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_projection_properties(basis, seed):
    w = np.random.default_rng(seed).standard_normal((3, 6)) * 4
    p = project(basis, w)
    assert np.abs(project(basis, p) - p).max() <= 1e-6
    delta = compute_offset(basis, w)
    assert np.abs(basis.directions @ delta.ravel()).max() <= 1e-6
    assert np.linalg.norm(delta) <= np.linalg.norm(w.ravel() - basis.mean) + 1e-9


def test_dimension_mismatch(basis):
    with pytest.raises(ConfigError):
        project(basis, np.zeros((4, 6)))
    with pytest.raises(ConfigError):
        apply_offset(np.zeros((5, 3, 6)), np.zeros((3, 5)))


def test_apply_zero_offset():
    traj = np.random.default_rng(0).standard_normal((7, 3, 6)).astype(np.float32)
    out = apply_offset(traj, np.zeros((3, 6)))
    assert np.array_equal(out, traj)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(1e-3, 1e3))
def test_offset_preserves_motion_and_inverts(seed, scale):
    rng = np.random.default_rng(seed)
    traj = rng.standard_normal((12, 3, 6)).astype(np.float32)
    delta = (rng.standard_normal((3, 6)) * scale).astype(np.float32)
    out = apply_offset(traj, delta)
    assert np.array_equal(np.diff(out, axis=0), np.diff(traj.astype(np.float64), axis=0))
    back = apply_offset(out, -delta)
    assert back.tobytes() == traj.astype(np.float64).tobytes()


def test_offset_commutes_with_subsetting():
    rng = np.random.default_rng(5)
    traj, delta = rng.standard_normal((20, 2, 3)), rng.standard_normal((2, 3))
    assert np.array_equal(apply_offset(traj, delta)[4:11], apply_offset(traj[4:11], delta))


def test_apply_offset_keeps_sequence_metadata():
    seq = LatentSequence(np.zeros((5, 2, 3)), fps=30.0, meta={"who": "x"})
    out = apply_offset(seq, np.ones((2, 3)))
    assert isinstance(out, LatentSequence)
    assert len(out) == 5 and out.fps == 30.0 and out.meta == {"who": "x"}
    assert np.all(out.codes == 1)


def test_basis_permutation_invariance():
    frames = generate_synthetic(SyntheticSpec(num_frames=300, layers=2, dim=5, latent_dim_motion=4, seed=8)).frames
    a = fit_motion_basis(frames, k=4)
    b = fit_motion_basis(frames[np.random.default_rng(0).permutation(300)], k=4)
    np.testing.assert_allclose(np.abs(a.directions), np.abs(b.directions), atol=1e-8)
    np.testing.assert_allclose(a.directions, b.directions, atol=1e-8)


def test_basis_save_load(tmp_path, basis):
    basis.save(tmp_path / "b.pca")
    back = MotionBasis.load(tmp_path / "b.pca")
    assert back.k == basis.k and (back.layers, back.dim) == (3, 6)
    assert np.abs(back.directions @ back.directions.T - np.eye(back.k)).max() <= 1e-12
    np.testing.assert_allclose(back.directions, basis.directions, atol=1e-6)


def test_basis_load_corrupt(tmp_path):
    p = tmp_path / "bad.pca"
    p.write_bytes(b"not an archive")
    with pytest.raises(FormatError):
        MotionBasis.load(p)


def test_dataset_input_accepted():
    ds = LatentDataset(np.random.default_rng(0).standard_normal((30, 2, 2)))
    assert fit_motion_basis(ds, k=3).k == 3
