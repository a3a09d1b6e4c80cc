"""Implicit-explicit time stepping on the probability simplex.

One step:

1. explicit right-hand side from cross-diffusion, reaction and the learned
   residual, all evaluated at the current state;
2. implicit self-diffusion, approximated by a fixed number of weighted-Jacobi
   sweeps started from the right-hand side;
3. any intervention events falling inside the step;
4. projection of every pixel back onto the simplex.

Cross-diffusion is lagged (explicit) so that the implicit solve stays a
per-class linear problem.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import value
from .field import DomainError, SimplexField, write_adtf
from .operators import (InterventionEvent, InterventionSchedule, PdeParams, TreatmentContext,
                        cross_diffusion_all, intervention_all, reaction_all, self_diffusion_all)

CHECKPOINT_AFTER = 50
CHECKPOINT_STRIDE = 5


class StabilityError(RuntimeError):
    def __init__(self, stage: str, step: int | None = None):
        self.stage = stage
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite values after the {stage} stage{where}")


@dataclass(frozen=True)
class SolverConfig:
    dt: float = 0.1
    horizon: float = 1.0
    jacobi_iters: int = 2
    relaxation: float = 0.9
    residual_check: float | None = None
    snapshot_stride: int | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise DomainError("dt must be positive")
        if self.horizon < 0:
            raise DomainError("horizon must be non-negative")
        if not 1 <= self.jacobi_iters <= 64:
            raise DomainError("jacobi_iters must lie in [1, 64]")
        if not 0 < self.relaxation <= 1:
            raise DomainError("relaxation must lie in (0, 1]")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))

    def stride_for(self, grid_size: int) -> int:
        if self.snapshot_stride is not None:
            return max(1, self.snapshot_stride)
        return 1 if grid_size <= 64 * 64 else 5

    @classmethod
    def with_steps(cls, dt: float, n_steps: int, **kw) -> "SolverConfig":
        return cls(dt=dt, horizon=dt * n_steps, **kw)

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha1(blob.encode()).hexdigest()[:16]


def helmholtz_solve_jacobi(rhs, D, dt: float, m: int, omega: float, h: float = 1.0):
    """m weighted-Jacobi sweeps for (I - dt div(D grad)) u = rhs, starting at u = rhs.

    ``D`` broadcasts against ``rhs`` (scalar, per-class planes or a full field).
    """
    u = rhs
    for _ in range(m):
        u = ad.jacobi_sweep(u, rhs, D, dt, omega, h)
    return u


def _check(x, stage, step):
    if not np.all(np.isfinite(value(x))):
        raise StabilityError(stage, step)


def step_arrays(p, params: PdeParams, channels, cfg: SolverConfig, residual: Callable | None = None,
                events=(), h: float = 1.0, step: int | None = None):
    """One IMEX step on a (..., K, H, W) array or tensor.  Returns the projected state."""
    explicit = ad.add(cross_diffusion_all(p, params.cross, h), reaction_all(p, params, channels))
    if residual is not None:
        explicit = ad.add(explicit, residual(p, channels))
    rhs = ad.add(p, ad.mul(cfg.dt, explicit))
    _check(rhs, "explicit", step)
    u = helmholtz_solve_jacobi(rhs, params.diff_planes(), cfg.dt, cfg.jacobi_iters, cfg.relaxation, h)
    _check(u, "implicit", step)
    for ev in events:
        frac = ev.kill_fraction(np.shape(value(p))[-2:])
        u = intervention_all(u, frac, ev.target_class % np.shape(value(p))[-3])
    _check(u, "intervention", step)
    return ad.project_simplex(u)


def imex_step(p: SimplexField, params: PdeParams, ctx: TreatmentContext,
              schedule: InterventionSchedule | None, config: SolverConfig,
              residual: Callable | None = None, t: float = 0.0) -> SimplexField:
    events = schedule.between(t, t + config.dt) if schedule is not None else []
    out = step_arrays(p.values, params, ctx.array(), config, residual, events, p.grid.spacing)
    return SimplexField(p.grid, out)


@dataclass
class Trajectory:
    states: list
    times: list
    events: list = field(default_factory=list)  # (time applied, step index, event)
    config: SolverConfig | None = None

    @property
    def final(self) -> SimplexField:
        return self.states[-1]

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = []
        for i, s in enumerate(self.states):
            name = f"state_{i:04d}.adtf"
            write_adtf(directory / name, s)
            names.append(name)
        manifest = {
            "format": "trajectory", "version": 1,
            "snapshots": names, "times": self.times,
            "events": [{"time": float(ev.time), "applied_at": float(ta), "step": int(k), "kind": ev.kind,
                        "magnitude": ev.magnitude, "target_class": ev.target_class}
                       for ta, k, ev in self.events],
            "config": asdict(self.config) if self.config else None,
            "config_hash": self.config.hash() if self.config else None,
        }
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))


def rollout(p0: SimplexField, params: PdeParams, ctx: TreatmentContext,
            schedule: InterventionSchedule | None, config: SolverConfig,
            residual: Callable | None = None, t0: float = 0.0) -> Trajectory:
    """Apply ``imex_step`` ``config.n_steps`` times, recording snapshots at the configured stride.

    An event fires in the first step whose interval (t, t + dt] contains its
    time; events exactly at ``t0`` fire in the first step.
    """
    stride = config.stride_for(p0.grid.size)
    schedule = schedule or InterventionSchedule()
    states, times, log = [p0], [t0], []
    p = p0.values
    t = t0
    n = config.n_steps
    for k in range(n):
        t_next = t0 + (k + 1) * config.dt
        events = schedule.between(t, t_next, include_start=(k == 0))
        p = step_arrays(p, params, ctx.array(), config, residual, events, p0.grid.spacing, step=k)
        log.extend((t_next, k, ev) for ev in events)
        t = t_next
        if (k + 1) % stride == 0 or k == n - 1:
            states.append(SimplexField(p0.grid, p))
            times.append(t)
    return Trajectory(states, times, log, config)


def _tensor_inputs(params: PdeParams, residual):
    """Tracked leaves referenced by params and residual, with a rebuild function."""
    slots = [("p", name) for name in ("diff", "cross", "growth_rate", "carrying_capacity", "kill_rates")
             if isinstance(getattr(params, name), ad.Tensor)]
    if residual is not None and hasattr(residual, "tensor_fields"):
        slots += [("r", name) for name in residual.tensor_fields()]
    vals = [getattr(params if kind == "p" else residual, name) for kind, name in slots]

    def rebuild(new_vals):
        pkw = {name: v for (kind, name), v in zip(slots, new_vals) if kind == "p"}
        rkw = {name: v for (kind, name), v in zip(slots, new_vals) if kind == "r"}
        new_params = params.with_values(**pkw) if pkw else params
        new_res = residual.with_values(**rkw) if rkw else residual
        return new_params, new_res

    return vals, rebuild


def simulate(p0, params: PdeParams, channels, config: SolverConfig, residual: Callable | None = None,
             h: float = 1.0, n_steps: int | None = None, checkpoint: bool | None = None):
    """Batched rollout on raw arrays or tensors; returns the final state only.

    With tracked inputs and more than 50 steps, steps are grouped into
    segments of 5 whose interiors are recomputed during backward.
    """
    n = config.n_steps if n_steps is None else n_steps
    p = p0
    if checkpoint is None:
        checkpoint = n > CHECKPOINT_AFTER
    if not checkpoint or not ad.tracked(p0, *_tensor_inputs(params, residual)[0]):
        for k in range(n):
            p = step_arrays(p, params, channels, config, residual, (), h, step=k)
        return p

    leaves, rebuild = _tensor_inputs(params, residual)
    k = 0
    while k < n:
        seg = min(CHECKPOINT_STRIDE, n - k)
        start = k

        def segment(state, *vals, _seg=seg, _start=start):
            prm, res = rebuild(vals)
            for j in range(_seg):
                state = step_arrays(state, prm, channels, config, res, (), h, step=_start + j)
            return state

        p = ad.checkpoint(segment, p, *leaves)
        k += seg
    return p


def explicit_euler_rollout(p0, params: PdeParams, channels, dt: float, n_steps: int, h: float = 1.0,
                           project: bool = False):
    """Fully explicit forward Euler on the same right-hand side (no implicit solve).

    Without projection this is the classical scheme whose diffusion part is
    only stable for dt * D / h^2 <= 1/4.
    """
    p = np.asarray(p0, dtype=np.float64)
    for _ in range(n_steps):
        rhs = (self_diffusion_all(p, params, h) + cross_diffusion_all(p, params.cross, h)
               + reaction_all(p, params, channels))
        p = p + dt * rhs
        if project:
            p = value(ad.project_simplex(p))
    return p
