"""Finite-difference data generators.

Two solvers regenerate the benchmark datasets with randomized parameters:

* shallow water: forward Euler on the conservative flux form
      dh/dt = -d(hu)/dx - d(hv)/dy
      du/dt = -g dh/dx - b u
      dv/dt = -g dh/dy - b v
  with centered differences and periodic boundaries, started from a
  cylindrical bump of water at rest;

* FitzHugh-Nagumo diffusion-reaction:
      du/dt = alpha_u lap(u) + (u - u^3 - c - v)
      dv/dt = alpha_v lap(v) + (u - v)
  with a 5-point Laplacian and no-flux (replicated-edge) boundaries on
  [-1,1]^2, started from smooth random noise in [-1,1].

States advance in float64 and are snapshotted to float32 sequences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import backend
from .data import FieldSequence

# reference grid for the published shallow-water parameter ranges
_SWE_REFERENCE_GRID = 128

SWE_PARAM_RANGES = {
    "bump_x": (54.0, 74.0),
    "bump_y": (54.0, 74.0),
    "bump_height": (0.05, 0.20),
    "bump_radius": (8.94, 12.65),
    "friction": (0.02, 2.00),
    "snapshot_interval": (60, 100),
}

STATE_LIMIT = 1e3  # instability tripwire


class ParameterError(ValueError):
    """Solver parameters outside their valid domain."""


class InstabilityError(RuntimeError):
    """Solver state went non-finite or beyond the magnitude tripwire."""


@dataclass
class SweParams:
    """Shallow-water run configuration.

    Bump center/radius are expressed in reference (128-grid) units and
    scaled by n_grid/128 at initialization, so sampled values stay inside
    the published ranges at any resolution.
    """

    n_grid: int = 128
    dt: float = 1e-4
    dx: float = 1e-2
    gravity: float = 1.0
    friction: float = 0.5
    bump_x: float = 64.0
    bump_y: float = 64.0
    bump_height: float = 0.1
    bump_radius: float = 10.0
    snapshot_interval: int = 80
    frames: int = 200
    seed: int = 0
    base_height: float = 1.0

    @classmethod
    def sample(cls, rng, n_grid=128, frames=200, seed=0, **overrides):
        """Draw the randomized parameters uniformly from their ranges."""
        r = SWE_PARAM_RANGES
        p = cls(
            n_grid=n_grid,
            frames=frames,
            seed=seed,
            friction=float(rng.uniform(*r["friction"])),
            bump_x=float(rng.uniform(*r["bump_x"])),
            bump_y=float(rng.uniform(*r["bump_y"])),
            bump_height=float(rng.uniform(*r["bump_height"])),
            bump_radius=float(rng.uniform(*r["bump_radius"])),
            snapshot_interval=int(rng.integers(r["snapshot_interval"][0], r["snapshot_interval"][1] + 1)),
        )
        for k, v in overrides.items():
            setattr(p, k, v)
        return p

    def validate(self, strict=False):
        if self.dt <= 0 or self.dx <= 0 or self.gravity <= 0:
            raise ParameterError("dt, dx and gravity must be positive")
        if self.n_grid < 4 or self.frames < 1 or self.snapshot_interval < 1:
            raise ParameterError("grid, frames and snapshot_interval must be positive")
        if strict:
            for name, (lo, hi) in SWE_PARAM_RANGES.items():
                val = getattr(self, name)
                if not (lo <= val <= hi):
                    raise ParameterError(f"{name}={val} outside allowed range [{lo}, {hi}]")


@dataclass
class DrParams:
    """Diffusion-reaction run configuration on [-1,1]^2, t in (0, t_end]."""

    n_grid: int = 128
    t_end: float = 5.0
    steps: int = 100  # stored frames
    alpha_u: float = 1e-3
    alpha_v: float = 5e-3
    c: float = 5e-3
    seed: int = 0

    def validate(self, strict=False):
        if self.alpha_u <= 0 or self.alpha_v <= 0:
            raise ParameterError("diffusion coefficients must be positive")
        if self.t_end <= 0 or self.steps < 1 or self.n_grid < 4:
            raise ParameterError("t_end, steps and grid must be positive")

    @property
    def dx(self):
        return 2.0 / self.n_grid


def _check_state(step_index, *fields):
    for f in fields:
        m = float(np.max(np.abs(f)))
        if not m < STATE_LIMIT:  # also catches NaN
            raise InstabilityError(
                f"solver state magnitude {m} exceeds {STATE_LIMIT} at step {step_index}"
            )


def swe_init(params: SweParams):
    """Water at rest with a cylinder bump: returns (h, u, v) float64 fields."""
    params.validate()
    n = params.n_grid
    s = n / _SWE_REFERENCE_GRID
    cx, cy, r = params.bump_x * s, params.bump_y * s, params.bump_radius * s
    if cx < -r or cx > n - 1 + r or cy < -r or cy > n - 1 + r:
        raise ParameterError(f"bump disk at ({cx:.1f}, {cy:.1f}) does not intersect the grid")
    h = np.full((n, n), params.base_height, dtype=np.float64)
    if r > 0:
        ii, jj = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
        inside = (ii - cx) ** 2 + (jj - cy) ** 2 <= r * r
        h[inside] += params.bump_height
    return h, np.zeros((n, n)), np.zeros((n, n))


def swe_step(state, params: SweParams, step_index=0):
    """One explicit Euler step; raises InstabilityError on blow-up."""
    h, u, v = state
    out = backend.swe_step(h, u, v, params.gravity, params.friction, params.dt, params.dx)
    _check_state(step_index, *out)
    return out


def dr_step(state, params: DrParams, dt, step_index=0, include_reaction=True):
    u, v = state
    out = backend.dr_step(u, v, params.alpha_u, params.alpha_v, params.c, dt,
                          params.dx, include_reaction)
    _check_state(step_index, *out)
    return out


def dr_init(params: DrParams):
    """Smooth random noise in [-1,1]: coarse uniform grid, bilinear upsample."""
    rng = np.random.default_rng(params.seed)
    n = params.n_grid
    coarse = max(4, n // 8)

    def smooth_field():
        base = rng.uniform(-1.0, 1.0, size=(coarse, coarse))
        xs = np.linspace(0, coarse - 1, n)
        i0 = np.clip(xs.astype(int), 0, coarse - 2)
        t = xs - i0
        rows = base[i0] * (1 - t)[:, None] + base[i0 + 1] * t[:, None]
        cols = rows[:, i0] * (1 - t)[None, :] + rows[:, i0 + 1] * t[None, :]
        return cols

    return smooth_field(), smooth_field()


def _dr_substeps(params: DrParams):
    dt_frame = params.t_end / params.steps
    a = max(params.alpha_u, params.alpha_v)
    dt_stable = 0.5 * params.dx ** 2 / (4.0 * a)
    sub = max(1, int(math.ceil(dt_frame / dt_stable)))
    return sub, dt_frame / sub


def simulate_sequence(kind, params) -> FieldSequence:
    """Run a solver and sample snapshots at fixed intervals.

    The first snapshot is taken after one full interval (the raw initial
    condition is not stored). SWE channels are [h, u, v]; DR channels
    are [u, v].
    """
    if kind == "swe":
        params.validate()
        state = swe_init(params)
        frames = np.empty((params.frames, 3, params.n_grid, params.n_grid), dtype=np.float32)
        step = 0
        for f in range(params.frames):
            for _ in range(params.snapshot_interval):
                step += 1
                state = swe_step(state, params, step)
            frames[f] = np.stack(state).astype(np.float32)
    elif kind == "dr":
        params.validate()
        state = dr_init(params)
        sub, dt = _dr_substeps(params)
        frames = np.empty((params.steps, 2, params.n_grid, params.n_grid), dtype=np.float32)
        step = 0
        for f in range(params.steps):
            for _ in range(sub):
                step += 1
                state = dr_step(state, params, dt, step)
            frames[f] = np.stack(state).astype(np.float32)
    else:
        raise ParameterError(f"unknown dataset kind {kind!r}")
    return FieldSequence(data=frames, kind=kind, params=asdict(params))
