import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from distill_lab.prior import epsilon_oracle
from distill_lab.renderer import (GRID, make_poses, prior_from_scene, read_grid_csv, render, scene_library, vjp,
                                  write_grid_csv)


@pytest.fixture(scope="module")
def poses():
    return make_poses()


def dense_reference(grid, k, K=8, D=16, half_width=math.sqrt(2.0)):
    """Loop-by-loop splat, written without the vectorized tables."""
    G = grid.shape[0]
    out = [0.0] * D
    phi = 2 * math.pi * k / K
    width = 2 * half_width / D
    for r in range(G):
        for c in range(G):
            x = -1 + (c + 0.5) * 2 / G
            y = -1 + (r + 0.5) * 2 / G
            u = math.cos(phi) * x + math.sin(phi) * y
            # bin j has centre -half_width + (j + 0.5) * width
            p = (u + half_width) / width - 0.5
            if p <= 0:
                out[0] += grid[r, c]
            elif p >= D - 1:
                out[D - 1] += grid[r, c]
            else:
                j = int(math.floor(p))
                f = p - j
                out[j] += (1 - f) * grid[r, c]
                out[j + 1] += f * grid[r, c]
    return np.array(out)


def test_identity_examples():
    np.testing.assert_array_equal(render(np.array([1.0, 2.0])), [1.0, 2.0])
    u = np.array([0.3, -4.0])
    np.testing.assert_array_equal(vjp(None, u), u)


@pytest.mark.parametrize("v", [1.0, 0.37])
def test_uniform_grid_mass(poses, v):
    theta = np.full(GRID * GRID, v)
    for k in range(poses.K):
        x = render(theta, k, poses)
        assert abs(x.sum() - v * GRID * GRID) <= 1e-9
        assert x.mean() == pytest.approx(v * GRID * GRID / poses.D, rel=1e-12)


def test_column_sums_are_one(poses):
    np.testing.assert_allclose(poses.matrices.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(poses.matrices >= 0)


def test_disk_matches_dense_reference(poses):
    disk = scene_library("disk")
    for k in range(poses.K):
        np.testing.assert_allclose(render(disk.ravel(), k, poses), dense_reference(disk, k), rtol=1e-12, atol=1e-12)


def test_random_grids_match_dense_reference(poses, rng):
    for k in (1, 3, 6):
        g = rng.random((GRID, GRID))
        np.testing.assert_allclose(render(g.ravel(), k, poses), dense_reference(g, k), rtol=1e-12, atol=1e-12)


def test_adjoint_identity(poses, rng):
    for k in range(poses.K):
        th, u = rng.standard_normal(GRID * GRID), rng.standard_normal(poses.D)
        assert abs(render(th, k, poses) @ u - th @ vjp(k, u, poses)) <= 1e-10


def test_vjp_matches_finite_differences(poses, rng):
    th, u = rng.standard_normal(GRID * GRID), rng.standard_normal(poses.D)
    k = 3
    h = 1e-6
    fd = np.empty_like(th)
    for i in range(th.size):
        e = np.zeros_like(th)
        e[i] = h
        fd[i] = (render(th + e, k, poses) @ u - render(th - e, k, poses) @ u) / (2 * h)
    g = vjp(k, u, poses)
    assert np.linalg.norm(fd - g) <= 1e-6 * np.linalg.norm(g)


def test_rotational_consistency(poses):
    disk = scene_library("disk").ravel()
    for k in range(poses.K // 4 * 3):
        np.testing.assert_allclose(render(disk, k, poses), render(disk, k + poses.K // 4, poses), atol=1e-12)


def test_pose_and_dimension_errors(poses):
    with pytest.raises(IndexError):
        render(np.zeros(64), 8, poses)
    with pytest.raises(IndexError):
        render(np.zeros(64), -1, poses)
    with pytest.raises(ValueError):
        vjp(0, np.zeros(15), poses)
    with pytest.raises(ValueError):
        make_poses(D=1)


def test_pose_set_is_immutable(poses):
    with pytest.raises(ValueError):
        poses.matrices[0, 0, 0] = 1.0


def test_scene_library_properties():
    disk = scene_library("disk")
    np.testing.assert_array_equal(disk, np.rot90(disk))
    cross = scene_library("cross")
    expected = np.array([2, 2, 2, 8, 8, 2, 2, 2], dtype=float)
    np.testing.assert_array_equal(cross.sum(axis=1), expected)
    np.testing.assert_array_equal(cross.sum(axis=0), expected)
    assert np.linalg.norm(scene_library("two-blobs") - disk) >= 0.5
    for name in ("disk", "cross", "two-blobs"):
        g = scene_library(name)
        assert g.shape == (GRID, GRID) and g.min() >= 0 and g.max() <= 1
    with pytest.raises(KeyError):
        scene_library("torus")


def test_prior_from_scene(poses, sched, rng):
    stars = {"y": scene_library("disk").ravel(), "y2": scene_library("cross").ravel()}
    priors = prior_from_scene(stars, poses, 0.0)
    assert len(priors) == poses.K
    for k, p in enumerate(priors):
        means, sdevs, _ = p.arrays("y")
        assert np.array_equal(means[0], render(stars["y"], k, poses))
        assert np.all(sdevs == 0)
        pooled, _, logw = p.arrays(None)
        assert len(pooled) == 2
        np.testing.assert_allclose(np.exp(logw), [0.5, 0.5])
    # at the solution the noisy point decodes exactly to its own noise
    k, t = 2, 500
    x = render(stars["y"], k, poses)
    e = rng.standard_normal(poses.D)
    z = sched.sqrt_ab[t] * x + sched.sqrt_bb[t] * e
    np.testing.assert_allclose(epsilon_oracle(z, t, "y", priors[k], sched), e, rtol=1e-12, atol=1e-12)
    with pytest.raises(ValueError):
        prior_from_scene(stars, poses, -0.1)


@given(st.lists(st.floats(-1e6, 1e6), min_size=9, max_size=9))
@settings(max_examples=30, deadline=None)
def test_grid_csv_roundtrip(tmp_path_factory, vals):
    path = tmp_path_factory.mktemp("g") / "grid.csv"
    g = np.array(vals).reshape(3, 3)
    write_grid_csv(path, g)
    np.testing.assert_array_equal(read_grid_csv(path), g)


def test_grid_csv_rejects_ragged(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("1,2\n3,4\n5,6\n")
    with pytest.raises(ValueError):
        read_grid_csv(p)
