"""Differentiable linear generators: identity and multi-pose grid projection."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .prior import ConditionalPrior, MixtureComponent

GRID = 8

# Explicit cell lists (row, col) for the G = 8 scene library; unlisted cells are 0.
_DISK = [(r, c) for r in range(GRID) for c in range(GRID)
         if (r - 3.5) ** 2 + (c - 3.5) ** 2 <= 2.5 ** 2 + 0.5]
_CROSS = [(r, c) for r in range(GRID) for c in range(GRID) if r in (3, 4) or c in (3, 4)]
_TWO_BLOBS = [(r, c) for r in (1, 2) for c in (1, 2)] + [(r, c) for r in (5, 6) for c in (5, 6)]

SCENES = {"disk": _DISK, "cross": _CROSS, "two-blobs": _TWO_BLOBS}


def scene_library(name: str) -> np.ndarray:
    """A G x G ground-truth grid with 1.0 on the named cell list."""
    if name not in SCENES:
        raise KeyError(f"unknown scene {name!r}; expected one of {sorted(SCENES)}")
    grid = np.zeros((GRID, GRID))
    for r, c in SCENES[name]:
        grid[r, c] = 1.0
    return grid


@dataclass(frozen=True)
class PoseSet:
    """K linear projections of a G x G grid onto D detector bins.

    Pose k rotates the cell centres (on [-1, 1]^2) by ``2 pi k / K`` and splats
    each cell's value onto the two nearest of D bins spanning ``[-half_width,
    half_width]`` by linear interpolation. Cells beyond the outer bin centres go
    entirely to the edge bin, so every column of every matrix sums to 1.
    """

    G: int
    K: int
    D: int
    half_width: float
    matrices: np.ndarray  # (K, D, G * G)

    @property
    def n_params(self) -> int:
        return self.G * self.G


def make_poses(G: int = GRID, K: int = 8, D: int = 16, half_width: float = np.sqrt(2.0)) -> PoseSet:
    if G < 1 or K < 1 or D < 2:
        raise ValueError(f"invalid pose set G={G}, K={K}, D={D}")
    centres = -1.0 + (np.arange(G) + 0.5) * (2.0 / G)
    ys, xs = np.meshgrid(centres, centres, indexing="ij")  # row index -> y, col index -> x
    xs, ys = xs.ravel(), ys.ravel()
    h = 2.0 * half_width / D
    cols = np.arange(G * G)
    mats = np.zeros((K, D, G * G))
    for k in range(K):
        phi = 2.0 * np.pi * k / K
        u = np.cos(phi) * xs + np.sin(phi) * ys
        pos = (u + half_width) / h - 0.5
        lo = np.floor(pos).astype(int)
        frac = pos - lo
        below, above = lo < 0, lo >= D - 1
        lo = np.clip(lo, 0, D - 2)
        frac = np.where(below, 0.0, np.where(above, 1.0, frac))
        np.add.at(mats[k], (lo, cols), 1.0 - frac)
        np.add.at(mats[k], (lo + 1, cols), frac)
    mats.setflags(write=False)
    return PoseSet(G, K, D, float(half_width), mats)


def _check_pose(pose, poses):
    if pose is None:
        return None
    if poses is None or not 0 <= int(pose) < poses.K:
        raise IndexError(f"pose {pose} out of range")
    return int(pose)


def render(theta, pose=None, poses: PoseSet | None = None) -> np.ndarray:
    """``theta`` itself for the identity renderer (``pose=None``), else ``A_pose @ theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    pose = _check_pose(pose, poses)
    if pose is None:
        return theta.copy()
    return poses.matrices[pose] @ theta.reshape(-1)


def vjp(pose, cotangent, poses: PoseSet | None = None) -> np.ndarray:
    """Pull a data-space cotangent back to parameters (``A_pose^T u``)."""
    cotangent = np.asarray(cotangent, dtype=np.float64)
    pose = _check_pose(pose, poses)
    if pose is None:
        return cotangent.copy()
    if cotangent.shape[-1] != poses.D:
        raise ValueError(f"cotangent has dimension {cotangent.shape[-1]}, expected {poses.D}")
    return cotangent @ poses.matrices[pose]


def prior_from_scene(theta_star: dict, poses: PoseSet, sdev: float = 0.0,
                     condition_weights: dict | None = None) -> list:
    """One :class:`ConditionalPrior` per pose with a single component at ``A_pose theta*_y``."""
    if sdev < 0:
        raise ValueError(f"sdev must be >= 0, got {sdev}")
    priors = []
    for k in range(poses.K):
        comps = {label: [MixtureComponent(tuple(render(np.ravel(th), k, poses)), sdev)]
                 for label, th in theta_star.items()}
        priors.append(ConditionalPrior(comps, condition_weights or {}))
    return priors


def write_grid_csv(path, grid) -> None:
    grid = np.asarray(grid, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in grid:
            writer.writerow([repr(float(v)) for v in row])


def read_grid_csv(path) -> np.ndarray:
    rows = [list(map(float, row)) for row in csv.reader(Path(path).read_text().splitlines()) if row]
    grid = np.array(rows)
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
        raise ValueError(f"{path}: expected a square grid, got shape {grid.shape}")
    return grid
