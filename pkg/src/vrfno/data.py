"""Synthetic 2D target distributions and coupling constructors."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .training import Couplings

KINDS = ("gaussian", "gaussian_mixture", "two_moons", "checkerboard")


@dataclass
class DistributionSpec:
    kind: str = "gaussian"
    dim: int = 2
    means: list = field(default_factory=lambda: [[5.0, 5.0]])
    variances: list = field(default_factory=lambda: [[1.0, 1.0]])  # diagonal
    weights: list = field(default_factory=lambda: [1.0])
    scale: float = 1.0  # moons noise / checkerboard extent

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distribution kind {self.kind!r}; one of {KINDS}")
        if self.kind in ("gaussian", "gaussian_mixture"):
            means = np.asarray(self.means, dtype=np.float64)
            variances = np.asarray(self.variances, dtype=np.float64)
            weights = np.asarray(self.weights, dtype=np.float64)
            if means.ndim != 2 or means.shape[1] != self.dim:
                raise ValueError(f"means must be (k, {self.dim}), got {means.shape}")
            if variances.shape != means.shape:
                raise ValueError(
                    f"variances shape {variances.shape} must match means {means.shape}"
                )
            if np.any(variances <= 0):
                raise ValueError("variances must be positive")
            if weights.shape != (means.shape[0],):
                raise ValueError("one weight per component required")
            if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
                raise ValueError("weights must be nonnegative and sum to 1")
        elif self.dim != 2:
            raise ValueError(f"{self.kind} targets are 2D only")
        return self


def default_target(dim=2):
    return DistributionSpec(
        kind="gaussian",
        dim=dim,
        means=[[5.0] * dim],
        variances=[[1.0] * dim],
        weights=[1.0],
    )


def sample_target(spec, n, rng):
    """n i.i.d. draws from the spec; float32, deterministic per rng stream."""
    if n < 1:
        raise ValueError("n must be >= 1")
    spec.validate()
    if spec.kind in ("gaussian", "gaussian_mixture"):
        means = np.asarray(spec.means, dtype=np.float64)
        stds = np.sqrt(np.asarray(spec.variances, dtype=np.float64))
        weights = np.asarray(spec.weights, dtype=np.float64)
        if len(weights) == 1:
            idx = np.zeros(n, dtype=np.int64)
        else:
            # map uniform component draws through the weight CDF
            u = rng.uniform((n,), dtype=np.float64)
            idx = np.searchsorted(np.cumsum(weights), u, side="right")
            idx = np.minimum(idx, len(weights) - 1)
        eps = rng.normal((n, spec.dim), dtype=np.float64)
        pts = means[idx] + stds[idx] * eps
        return pts.astype(np.float32)
    if spec.kind == "two_moons":
        theta = np.pi * rng.uniform((n,), dtype=np.float64)
        lower = rng.integers(0, 2, size=n).astype(bool)
        x = np.where(lower, 1.0 - np.cos(theta), np.cos(theta))
        y = np.where(lower, 0.5 - np.sin(theta), np.sin(theta))
        pts = np.stack([x, y], axis=1)
        pts += 0.1 * spec.scale * rng.normal((n, 2), dtype=np.float64)
        return pts.astype(np.float32)
    if spec.kind == "checkerboard":
        # 4x4 grid of cells of side `scale` over [-2*scale, 2*scale);
        # the 8 cells with even index parity are permitted
        cell = spec.scale
        permitted = _checker_cells()
        k = rng.integers(0, len(permitted), size=n)
        corner = permitted[k].astype(np.float64)
        uv = rng.uniform((n, 2), dtype=np.float64)
        pts = (corner + uv) * cell - 2.0 * cell
        return pts.astype(np.float32)
    raise ValueError(f"unknown distribution kind {spec.kind!r}")


def _checker_cells():
    return np.array(
        [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0],
        dtype=np.int64,
    )


def in_checkerboard_cell(points, scale=1.0):
    """Membership test for the checkerboard generator's permitted cells."""
    pts = np.asarray(points, dtype=np.float64)
    idx = np.floor(pts / scale + 2.0).astype(int)
    inside = np.all((idx >= 0) & (idx < 4), axis=1)
    return inside & ((idx[:, 0] + idx[:, 1]) % 2 == 0)


def make_arbitrary_couplings(targets, rng):
    """Pair each target with an independent standard-normal noise draw."""
    targets = np.asarray(targets, dtype=np.float32)
    if targets.ndim != 2 or targets.shape[0] < 1:
        raise ValueError(f"targets must be (n, dim) with n >= 1, got {targets.shape}")
    x0 = rng.normal(targets.shape)
    return Couplings(x0=x0, x1=targets, kind="arbitrary")


def load_points_csv(path):
    """Read a 2-column numeric CSV (no header required) as float32 points."""
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row[:2]]
            except ValueError:
                if lineno == 1:
                    continue  # tolerate a header line
                raise ValueError(f"{path}: non-numeric row {lineno}: {row!r}") from None
            if len(vals) != 2:
                raise ValueError(f"{path}: row {lineno} has fewer than two columns")
            rows.append(vals)
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float32)
