"""Spatial operators, reaction terms and interventions of the cross-diffusion model.

Functions taking a :class:`SimplexField` are the public, single-field API and
return plain arrays.  The ``*_all`` kernels operate on class-major arrays of
shape ``(..., K, H, W)`` -- raw numpy or tracked tensors -- and are what the
time stepper and the training loop use.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import value
from .field import ClassMask, DomainError, Grid2D, SimplexField, read_adtf_array, write_adtf_array

TREATMENT_CHANNELS = ("surgery", "radiotherapy", "chemotherapy")
KAPPA_MIN = 1e-3


@dataclass(frozen=True)
class PdeParams:
    """Physics parameters.  Array-valued entries may be tracked tensors during training.

    diff: per-class diffusivity, shape (K,) or (K, H, W).
    cross: (K, K) cross-diffusion strengths; the diagonal is ignored.
    growth_rate, carrying_capacity: scalar or (H, W).
    kill_rates: one rate per treatment channel.
    """

    diff: object
    cross: object
    growth_rate: object = 0.0
    carrying_capacity: object = 1.0
    growth_clamp: float = 2.0
    kill_rates: object = (0.0, 0.0, 0.0)
    tumor_class: int = -1

    def __post_init__(self):
        d = np.asarray(value(self.diff), dtype=np.float64)
        K = d.shape[0] if d.ndim else 0
        if d.ndim not in (1, 3) or K < 2:
            raise DomainError(f"diff must have shape (K,) or (K, H, W) with K >= 2, got {d.shape}")
        chi = np.asarray(value(self.cross), dtype=np.float64)
        if chi.shape != (K, K):
            raise DomainError(f"cross must be ({K}, {K}), got {chi.shape}")
        if np.any(d < 0) or not np.all(np.isfinite(d)):
            raise DomainError("diffusivities must be finite and non-negative")
        if not np.all(np.isfinite(chi)):
            raise DomainError("cross-diffusion strengths must be finite")
        kappa = np.asarray(value(self.carrying_capacity), dtype=np.float64)
        if np.any(kappa <= 0):
            raise DomainError("carrying capacity must be positive")
        if np.any(kappa <= KAPPA_MIN) or np.any(kappa > 1):
            raise DomainError(f"carrying capacity must lie in ({KAPPA_MIN}, 1]")
        if not self.growth_clamp >= 0:
            raise DomainError("growth clamp k_max must be non-negative")
        alpha = np.asarray(value(self.growth_rate), dtype=np.float64)
        if np.any(alpha < 0) or np.any(alpha > self.growth_clamp) or not np.all(np.isfinite(alpha)):
            raise DomainError("growth rate must lie in [0, k_max]")
        beta = np.asarray(value(self.kill_rates), dtype=np.float64)
        if beta.ndim != 1 or not np.all(np.isfinite(beta)) or np.any(beta < 0):
            raise DomainError("kill rates must be a finite non-negative vector")
        tumor = self.tumor_class if self.tumor_class >= 0 else K + self.tumor_class
        if not 0 <= tumor < K:
            raise DomainError(f"tumor class {self.tumor_class} out of range")
        object.__setattr__(self, "tumor_class", tumor)

    @property
    def num_classes(self) -> int:
        return np.shape(value(self.diff))[0]

    def diff_planes(self):
        """Diffusivity shaped to broadcast against (..., K, H, W)."""
        d = self.diff
        if np.ndim(value(d)) == 1:
            return ad.reshape(d, (-1, 1, 1))
        return d

    def with_values(self, **kw) -> "PdeParams":
        return replace(self, **kw)

    @classmethod
    def default(cls, num_classes: int, tumor_class: int = -1, diff=0.05, cross=0.0, growth_rate=1.0,
                carrying_capacity=1.0, growth_clamp=2.0, kill_rates=(0.0, 0.0, 0.0)) -> "PdeParams":
        K = num_classes
        chi = np.full((K, K), float(cross))
        np.fill_diagonal(chi, 0.0)
        return cls(np.full(K, float(diff)), chi, growth_rate, carrying_capacity, growth_clamp,
                   np.asarray(kill_rates, dtype=np.float64), tumor_class)


@dataclass(frozen=True)
class TreatmentContext:
    channels: tuple = (0.0, 0.0, 0.0)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float64)
        if ch.ndim != 1:
            raise DomainError("treatment channels must be a vector")
        if np.any(ch < 0) or np.any(ch > 1) or not np.all(np.isfinite(ch)):
            raise DomainError("treatment channel values must lie in [0, 1]")
        object.__setattr__(self, "channels", tuple(float(c) for c in ch))

    def array(self) -> np.ndarray:
        return np.asarray(self.channels, dtype=np.float64)

    def to_json(self) -> dict:
        return {"channels": list(self.channels), "names": list(TREATMENT_CHANNELS[:len(self.channels)]),
                "metadata": self.metadata}

    @classmethod
    def from_json(cls, doc: dict) -> "TreatmentContext":
        return cls(tuple(doc["channels"]), dict(doc.get("metadata", {})))


@dataclass(frozen=True)
class InterventionEvent:
    time: float
    kind: str  # "resection" | "dose"
    magnitude: float = 1.0
    target_class: int = -1
    region: np.ndarray | None = None  # boolean (H, W); None means the whole domain

    def __post_init__(self):
        if self.kind not in ("resection", "dose"):
            raise DomainError(f"unknown intervention kind {self.kind!r}")
        if not np.isfinite(self.magnitude) or self.magnitude < 0:
            raise DomainError("intervention magnitude must be finite and non-negative")
        if self.kind == "dose" and self.magnitude > 1:
            raise DomainError("dose magnitude is a kill fraction and must lie in [0, 1]")
        if self.region is not None:
            object.__setattr__(self, "region", np.asarray(self.region, dtype=bool))

    def kill_fraction(self, shape) -> np.ndarray:
        frac = 1.0 if self.kind == "resection" else float(self.magnitude)
        if self.region is None:
            return np.full(shape, frac)
        if self.region.shape != tuple(shape):
            raise DomainError(f"event region {self.region.shape} does not match grid {tuple(shape)}")
        return np.where(self.region, frac, 0.0)


@dataclass(frozen=True)
class InterventionSchedule:
    events: tuple = ()

    def __post_init__(self):
        times = [e.time for e in self.events]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise DomainError("event times must be strictly increasing")
        object.__setattr__(self, "events", tuple(self.events))

    def between(self, t0: float, t1: float, include_start: bool = False) -> list[InterventionEvent]:
        """Events with t0 < t_e <= t1 (t0 <= t_e when ``include_start``)."""
        lo = (lambda t: t >= t0) if include_start else (lambda t: t > t0)
        return [e for e in self.events if lo(e.time) and e.time <= t1 + 1e-12]


# -- differential operators -----------------------------------------------------


def laplacian(f, grid: Grid2D):
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-2:] != grid.shape:
        raise DomainError(f"field shape {f.shape} does not match grid {grid.shape}")
    return ad.laplacian(f, grid.spacing)


def diffusion_flux_div(f, D, h=1.0):
    """div(D grad f) with arithmetic face averages of a spatially varying D."""
    fx = ad.mul(ad.avg_x(D), ad.grad_x(f, h))
    fy = ad.mul(ad.avg_y(D), ad.grad_y(f, h))
    return ad.face_div(fx, fy, h)


def self_diffusion_all(p, params: PdeParams, h=1.0):
    D = params.diff_planes()
    if np.ndim(value(params.diff)) == 1:
        return ad.mul(D, ad.laplacian(p, h))
    return diffusion_flux_div(p, D, h)


def self_diffusion(p: SimplexField, params: PdeParams, k: int) -> np.ndarray:
    return value(self_diffusion_all(p.values, params, p.grid.spacing))[k]


def _offdiag(chi):
    K = np.shape(value(chi))[0]
    return ad.mul(chi, 1.0 - np.eye(K))


def cross_diffusion_all(p, chi, h=1.0):
    """-div( sum_j chi_kj * p_k * grad p_j ) for every class k, via face fluxes."""
    chi = _offdiag(chi)
    fx = ad.mul(ad.avg_x(p), ad.classmix(chi, ad.grad_x(p, h)))
    fy = ad.mul(ad.avg_y(p), ad.classmix(chi, ad.grad_y(p, h)))
    return ad.neg(ad.face_div(fx, fy, h))


def cross_diffusion(p: SimplexField, params: PdeParams, k: int) -> np.ndarray:
    return value(cross_diffusion_all(p.values, params.cross, p.grid.spacing))[k]


def reaction_all(p, params: PdeParams, channels):
    """Logistic tumour growth minus continuous therapy kill; zero for other classes."""
    K = np.shape(value(p))[-3]
    T = params.tumor_class
    pT = ad.getitem(p, (Ellipsis, T, slice(None), slice(None)))
    alpha = ad.clamp(params.growth_rate, 0.0, params.growth_clamp)
    growth = ad.mul(ad.mul(alpha, pT), ad.sub(1.0, ad.div(pT, params.carrying_capacity)))
    ch = np.asarray(channels, dtype=np.float64)
    kill = ad.sum_(ad.mul(params.kill_rates, ch), axis=-1)
    kill = ad.reshape(kill, np.shape(value(kill)) + (1, 1))
    rT = ad.sub(growth, ad.mul(kill, pT))
    return ad.embed(rT, T, K, axis=-3)


def reaction(p: SimplexField, params: PdeParams, ctx: TreatmentContext, t: float = 0.0) -> np.ndarray:
    """Per-class reaction field (K, H, W).  ``t`` is accepted for interface symmetry; the terms are autonomous."""
    return value(reaction_all(p.values, params, ctx.array()))


# -- interventions -------------------------------------------------------------


def _intervention_forward(pv, frac, T):
    K = pv.shape[-3]
    pT = pv[..., T, :, :]
    removed = frac * pT
    others = np.delete(np.arange(K), T)
    s = pv[..., others, :, :].sum(axis=-3)
    has = s > 0
    s_safe = np.where(has, s, 1.0)
    scale = 1.0 + removed / s_safe
    out = np.empty_like(pv)
    out[..., T, :, :] = pT - removed
    for j in others:
        out[..., j, :, :] = np.where(has, pv[..., j, :, :] * scale, removed / (K - 1))
    return out, s_safe, has, others


def intervention_all(p, frac, T: int):
    """Remove ``frac`` of class T per pixel and hand it to the other classes proportionally.

    Pixels where every other class is empty receive the removed mass uniformly.
    """
    pv = value(p)
    out, s, has, others = _intervention_forward(pv, frac, T)
    K = pv.shape[-3]

    def vjp(g):
        pT = pv[..., T, :, :]
        go = g[..., others, :, :]
        po = pv[..., others, :, :]
        dot = (go * po).sum(axis=-3)
        gin = np.empty_like(pv)
        gin[..., T, :, :] = (1.0 - frac) * g[..., T, :, :] + np.where(has, frac / s * dot, frac / (K - 1) * go.sum(axis=-3))
        aps = frac * pT / s
        for i, j in enumerate(others):
            gin[..., j, :, :] = np.where(has, g[..., j, :, :] * (1.0 + aps) - aps / s * dot, g[..., j, :, :])
        return (gin,)

    return ad.record("intervention", out, (p,), vjp, active=has)


def apply_intervention(p: SimplexField, event: InterventionEvent) -> SimplexField:
    frac = event.kill_fraction(p.grid.shape)
    T = event.target_class % p.num_classes
    out = intervention_all(p.values, frac, T)
    return SimplexField(p.grid, out)


# -- JSON documents --------------------------------------------------------------
# params.json:
#   {"format": "pde-params", "version": 1, "num_classes": K, "tumor_class": T,
#    "growth_clamp": k_max, "kill_rates": [...], "cross": [[...]],
#    "diff" | "growth_rate" | "carrying_capacity": number, list, or {"field": "<file>.adtf"}}
# schedule.json:
#   {"events": [{"time": t, "kind": "resection"|"dose", "magnitude": m,
#                "target_class": k, "region": null | {"box": [r0, r1, c0, c1]}
#                                          | {"field": "<mask>.adtf"}}]}


def _dump_leaf(x, directory: Path, name: str):
    arr = np.asarray(value(x), dtype=np.float64)
    if arr.ndim >= 2:
        planes = arr if arr.ndim == 3 else arr[None]
        write_adtf_array(directory / f"{name}.adtf", planes)
        return {"field": f"{name}.adtf"}
    return arr.tolist() if arr.ndim else float(arr)


def _load_leaf(doc, directory: Path, squeeze: bool):
    if isinstance(doc, dict):
        arr = read_adtf_array(directory / doc["field"])
        return arr[0] if squeeze and arr.shape[0] == 1 else arr
    return np.asarray(doc, dtype=np.float64) if isinstance(doc, list) else float(doc)


def save_params(params: PdeParams, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = path.parent
    doc = {
        "format": "pde-params", "version": 1,
        "num_classes": params.num_classes,
        "tumor_class": params.tumor_class,
        "growth_clamp": params.growth_clamp,
        "kill_rates": np.asarray(value(params.kill_rates)).tolist(),
        "cross": np.asarray(value(params.cross)).tolist(),
        "diff": _dump_leaf(params.diff, d, "diff"),
        "growth_rate": _dump_leaf(params.growth_rate, d, "growth_rate"),
        "carrying_capacity": _dump_leaf(params.carrying_capacity, d, "carrying_capacity"),
    }
    path.write_text(json.dumps(doc, indent=1))


def load_params(path) -> PdeParams:
    path = Path(path)
    doc = json.loads(path.read_text())
    d = path.parent
    diff = _load_leaf(doc["diff"], d, squeeze=False)
    return PdeParams(
        diff=np.asarray(diff, dtype=np.float64),
        cross=np.asarray(doc["cross"], dtype=np.float64),
        growth_rate=_load_leaf(doc["growth_rate"], d, squeeze=True),
        carrying_capacity=_load_leaf(doc["carrying_capacity"], d, squeeze=True),
        growth_clamp=float(doc["growth_clamp"]),
        kill_rates=np.asarray(doc["kill_rates"], dtype=np.float64),
        tumor_class=int(doc["tumor_class"]),
    )


def schedule_to_json(schedule: InterventionSchedule, directory) -> dict:
    directory = Path(directory)
    events = []
    for i, e in enumerate(schedule.events):
        region = None
        if e.region is not None:
            name = f"region_{i:03d}.adtf"
            write_adtf_array(directory / name, e.region[None].astype(np.float64))
            region = {"field": name}
        events.append({"time": e.time, "kind": e.kind, "magnitude": e.magnitude,
                       "target_class": e.target_class, "region": region})
    return {"events": events}


def schedule_from_json(doc: dict, directory=".", grid: Grid2D | None = None) -> InterventionSchedule:
    directory = Path(directory)
    events = []
    for ev in doc.get("events", []):
        region = ev.get("region")
        mask = None
        if isinstance(region, dict) and "field" in region:
            mask = read_adtf_array(directory / region["field"])[0] > 0.5
        elif isinstance(region, dict) and "box" in region:
            if grid is None:
                raise DomainError("box regions need the grid size")
            r0, r1, c0, c1 = region["box"]
            mask = np.zeros(grid.shape, dtype=bool)
            mask[r0:r1, c0:c1] = True
        events.append(InterventionEvent(float(ev["time"]), ev["kind"], float(ev.get("magnitude", 1.0)),
                                        int(ev.get("target_class", -1)), mask))
    return InterventionSchedule(tuple(events))


def region_from_mask(mask: ClassMask) -> np.ndarray:
    return np.asarray(mask.bits, dtype=bool)
