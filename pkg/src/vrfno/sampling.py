"""ODE samplers: plain Euler and the history-chaining variant.

Integration runs on a uniform grid t = 0, 1/N, ..., 1 with float64 state
accumulation (field evaluations stay float32).  The history-chaining
sampler feeds each step's predicted velocity back as the next step's
history input; the first step always sees zero history.  The recorded
velocity at t = 1 duplicates the last prediction so every grid point has
one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .nets import Encoder, VelocityField


@dataclass
class Trajectory:
    """One sample's path: times (N+1,), states (N+1, d), velocities (N+1, d)."""

    times: np.ndarray
    states: np.ndarray
    velocities: np.ndarray

    @property
    def steps(self):
        return len(self.times) - 1

    def chord(self):
        return self.states[-1] - self.states[0]


@dataclass
class SampleConfig:
    steps: int = 100
    count: int = 512
    mode: str = "reparameterized"  # or "gaussian"
    seed: int = 0

    def validate(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.count < 1:
            raise ValueError(f"count must be >= 1, got {self.count}")
        if self.mode not in ("gaussian", "reparameterized"):
            raise ValueError(
                f"mode must be gaussian or reparameterized, got {self.mode!r}"
            )
        return self


def _field_fn(vf):
    """Accept a VelocityField or any callable (x, t, v_history) -> velocity."""
    if isinstance(vf, VelocityField):
        return vf.predict
    if callable(vf):
        return vf
    raise TypeError(f"not a velocity field: {vf!r}")


def integrate(vf, x0, steps, chain_history=True):
    """Euler integration from t=0 to t=1; returns (states, velocities).

    states: (steps+1, n, d) float64; velocities: (steps+1, n, d).
    With `chain_history=False` the history input is pinned to zero
    (the plain Euler solver); otherwise each prediction becomes the next
    step's history.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    fn = _field_fn(vf)
    x = np.asarray(x0, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"x0 must be (n, dim), got shape {x.shape}")
    n, dim = x.shape
    dt = 1.0 / steps
    states = np.empty((steps + 1, n, dim), dtype=np.float64)
    velocities = np.empty((steps + 1, n, dim), dtype=np.float64)
    states[0] = x
    v_history = np.zeros((n, dim), dtype=np.float32)
    for i in range(steps):
        t_col = np.full((n, 1), i * dt, dtype=np.float32)
        v = np.asarray(fn(x.astype(np.float32), t_col, v_history), dtype=np.float64)
        if not np.isfinite(v).all() or not np.isfinite(x).all():
            raise FloatingPointError(f"non-finite state at step {i} (t={i * dt:g})")
        velocities[i] = v
        x = x + dt * v
        states[i + 1] = x
        if chain_history:
            v_history = v.astype(np.float32)
    velocities[steps] = velocities[steps - 1]
    return states, velocities


def _split(states, velocities, steps):
    times = np.arange(steps + 1, dtype=np.float64) / steps
    return [
        Trajectory(times=times, states=states[:, j], velocities=velocities[:, j])
        for j in range(states.shape[1])
    ]


def euler_sample(vf, x0, steps):
    """Plain Euler trajectories (zero history input at every step)."""
    states, velocities = integrate(vf, x0, steps, chain_history=False)
    return _split(states, velocities, steps)


def prepare_noise(enc, x1_ref, count, dim, mode, rng):
    """Initial states for sampling: raw Gaussian or encoder-adapted noise."""
    eps = rng.normal((count, dim))
    if mode == "gaussian":
        return eps
    if enc is None:
        raise ValueError("reparameterized mode requires encoder parameters")
    if x1_ref is None:
        raise ValueError("reparameterized mode requires a dataset reference batch")
    x1_ref = np.asarray(x1_ref, dtype=np.float32)
    mu, sigma2 = enc.predict(x1_ref, rng=rng)
    return eps * sigma2 + mu


def vrfno_sample(vf, enc, x1_ref, cfg, rng):
    """History-chaining sampler; returns a list of Trajectory objects.

    In reparameterized mode each sample's noise is adapted by the encoder
    against a dataset row from `x1_ref`.
    """
    cfg.validate()
    dim = vf.dim
    if cfg.mode == "reparameterized":
        if x1_ref is None:
            raise ValueError("reparameterized mode requires x1_ref")
        x1_ref = np.asarray(x1_ref, dtype=np.float32)
        if x1_ref.shape[0] != cfg.count:
            raise ValueError(
                f"x1_ref has {x1_ref.shape[0]} rows for count={cfg.count}"
            )
    x0 = prepare_noise(enc, x1_ref, cfg.count, dim, cfg.mode, rng)
    states, velocities = integrate(vf, x0, cfg.steps, chain_history=True)
    return _split(states, velocities, cfg.steps)


def batch_sample(vf, enc, dataset, cfg, rng, keep_trajectories=False):
    """Sample `cfg.count` points, pairing each with a random dataset row in
    reparameterized mode; returns (endpoints, trajectories-or-None)."""
    cfg.validate()
    if cfg.mode == "reparameterized":
        dataset = np.asarray(dataset, dtype=np.float32)
        if dataset.ndim != 2 or dataset.shape[0] == 0:
            raise ValueError("reparameterized mode requires a nonempty dataset")
        rows = rng.integers(0, dataset.shape[0], size=cfg.count)
        x1_ref = dataset[rows]
    else:
        x1_ref = None
    x0 = prepare_noise(enc, x1_ref, cfg.count, vf.dim, cfg.mode, rng)
    states, velocities = integrate(vf, x0, cfg.steps, chain_history=True)
    endpoints = states[-1].astype(np.float32)
    trajectories = _split(states, velocities, cfg.steps) if keep_trajectories else None
    return endpoints, trajectories


# ---------------------------------------------------------------------------
# CSV export / import


def trajectory_header(dim):
    return (
        ["sample_id", "step", "t"]
        + [f"x{i}" for i in range(dim)]
        + [f"v{i}" for i in range(dim)]
    )


def write_trajectories_csv(path, trajectories):
    if not trajectories:
        raise ValueError("no trajectories to write")
    dim = trajectories[0].states.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(trajectory_header(dim))
        for sid, traj in enumerate(trajectories):
            for k, t in enumerate(traj.times):
                row = [sid, k, f"{t:.10g}"]
                row += [f"{v:.8g}" for v in traj.states[k]]
                row += [f"{v:.8g}" for v in traj.velocities[k]]
                writer.writerow(row)


def read_trajectories_csv(path):
    """Parse a trajectory CSV back into Trajectory objects."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty trajectory file") from None
        if len(header) < 5 or header[:3] != ["sample_id", "step", "t"]:
            raise ValueError(f"{path}: unexpected header {header!r}")
        dim = (len(header) - 3) // 2
        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                sid = int(row[0])
                step = int(row[1])
                vals = [float(c) for c in row[2:]]
            except (ValueError, IndexError):
                raise ValueError(f"{path}: malformed row {lineno}") from None
            if len(vals) != 1 + 2 * dim:
                raise ValueError(f"{path}: malformed row {lineno}")
            rows.setdefault(sid, []).append((step, vals))
    if not rows:
        raise ValueError(f"{path}: no trajectory rows")
    trajectories = []
    for sid in sorted(rows):
        entries = sorted(rows[sid])
        times = np.array([v[0] for _, v in entries])
        states = np.array([v[1 : 1 + dim] for _, v in entries])
        velocities = np.array([v[1 + dim :] for _, v in entries])
        trajectories.append(Trajectory(times=times, states=states, velocities=velocities))
    return trajectories


def write_endpoints_csv(path, endpoints):
    endpoints = np.asarray(endpoints)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id"] + [f"x{i}" for i in range(endpoints.shape[1])])
        for sid, row in enumerate(endpoints):
            writer.writerow([sid] + [f"{v:.8g}" for v in row])
