"""Seeded generators for the two synthetic benchmarks and the on-disk dataset layout.

Every sample draws from its own Philox stream keyed by ``(seed, index,
generator tag)`` through numpy's ``SeedSequence``.  Philox4x64-10 is a
counter-based generator with fixed round constants, so a given key yields
the same numbers on every platform.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .field import AdtfError, DomainError, Grid2D, SimplexField, quantize, read_adtf, write_adtf
from .operators import TREATMENT_CHANNELS, TreatmentContext

VORONOI_TAG = 0x566F72  # "Vor"
VESSEL_TAG = 0x566573   # "Ves"
DATASET_VERSION = 1

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(cfg) -> str:
    doc = asdict(cfg) if hasattr(cfg, "__dataclass_fields__") else cfg
    return f"{fnv1a64(canonical_json(doc).encode('utf-8')):016x}"


def sample_rng(seed: int, index: int, tag: int) -> np.random.Generator:
    if seed < 0 or index < 0:
        raise DomainError("seed and index must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index), tag])))


@dataclass(frozen=True)
class VoronoiConfig:
    size: int = 64
    num_classes: int = 5          # background + organs + tumor (last)
    sites_per_class: int = 3
    tau: float = 3.0              # softmax temperature on distances, pixels
    tumor_jitter: float = 4.0     # tumor centre lies within this radius of the grid centre
    sigma0: float = 4.0
    sigma1: float = 7.0
    amplitude: float = 0.95
    displacement: float = 2.5     # peak outward push of organ tissue, pixels
    treatment_effect: float = 0.5  # fraction of growth suppressed at full mean treatment

    def __post_init__(self):
        if self.size < 4:
            raise DomainError("grid size must be at least 4")
        if self.num_classes < 3:
            raise DomainError("need at least background, one organ and the tumor")
        if self.sites_per_class < 1:
            raise DomainError("sites_per_class must be >= 1")
        if not self.tau > 0:
            raise DomainError("tau must be positive")
        if not self.sigma1 > self.sigma0 > 0:
            raise DomainError("need sigma1 > sigma0 > 0")
        if not 0 < self.amplitude <= 1:
            raise DomainError("amplitude must lie in (0, 1]")
        if self.tumor_jitter < 0 or self.displacement < 0:
            raise DomainError("jitter and displacement must be non-negative")
        if not 0 <= self.treatment_effect < 1:
            raise DomainError("treatment_effect must lie in [0, 1)")


@dataclass(frozen=True)
class VesselConfig:
    size: int = 64
    num_lobes: int = 2            # classes: lobes..., vessel, tumor
    branch_prob: float = 0.04
    steps: int = 60
    turn_spread: float = 0.35     # max heading change per unit step, radians
    branch_angle: float = 0.7
    max_branches: int = 6
    vessel_radius: float = 1.5
    vessel_radius_t1: float = 2.5
    sites_per_lobe: int = 3
    tau: float = 3.0
    seed_distance: float = 3.0    # d_max: tumor seed to skeleton
    sigma0: float = 3.0
    sigma1: float = 6.0
    proximity_scale: float = 3.0  # rho in exp(-dist / rho)
    amplitude: float = 0.95
    treatment_effect: float = 0.5

    def __post_init__(self):
        if self.size < 8:
            raise DomainError("grid size must be at least 8")
        if self.num_lobes < 1:
            raise DomainError("need at least one lobe class")
        if not 0 <= self.branch_prob <= 1:
            raise DomainError("branch_prob must lie in [0, 1]")
        if self.steps < 1:
            raise DomainError("a zero-length walk has no skeleton")
        if not self.vessel_radius_t1 > self.vessel_radius >= 1:
            raise DomainError("need vessel_radius_t1 > vessel_radius >= 1")
        if self.seed_distance < 0:
            raise DomainError("seed_distance must be non-negative")
        if not self.sigma1 > self.sigma0 > 0:
            raise DomainError("need sigma1 > sigma0 > 0")
        if not self.tau > 0 or not self.proximity_scale > 0:
            raise DomainError("tau and proximity_scale must be positive")
        if not 0 < self.amplitude <= 1 or not 0 <= self.treatment_effect < 1:
            raise DomainError("amplitude in (0, 1] and treatment_effect in [0, 1) required")

    @property
    def num_classes(self) -> int:
        return self.num_lobes + 2


@dataclass(frozen=True, eq=False)
class SamplePair:
    baseline: SimplexField
    target: SimplexField
    treatment: TreatmentContext
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.baseline.grid != self.target.grid or self.baseline.num_classes != self.target.num_classes:
            raise DomainError("baseline and target must share grid and class count")

    def __eq__(self, other):
        if not isinstance(other, SamplePair):
            return NotImplemented
        return (self.baseline == other.baseline and self.target == other.target
                and self.treatment.channels == other.treatment.channels and self.provenance == other.provenance)


# -- shared pieces ---------------------------------------------------------------


def _coords(n):
    r, c = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64), indexing="ij")
    return r, c


def soft_voronoi(sites: list[np.ndarray], size: int, tau: float) -> np.ndarray:
    """softmax_k(-min_site_distance_k / tau) for per-class site arrays of shape (S, 2)."""
    r, c = _coords(size)
    d = np.stack([np.sqrt((r[None] - s[:, 0, None, None]) ** 2 + (c[None] - s[:, 1, None, None]) ** 2).min(axis=0)
                  for s in sites])
    z = -d / tau
    z -= z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def gaussian_blob(size: int, center, sigma: float, amplitude: float) -> np.ndarray:
    r, c = _coords(size)
    return amplitude * np.exp(-((r - center[0]) ** 2 + (c - center[1]) ** 2) / (2.0 * sigma * sigma))


def _sample_treatment(rng) -> TreatmentContext:
    return TreatmentContext(tuple(float(x) for x in rng.uniform(0.0, 1.0, len(TREATMENT_CHANNELS))))


def _grown_sigma(s0, s1, effect, ctx: TreatmentContext) -> float:
    return s0 + (s1 - s0) * (1.0 - effect * float(np.mean(ctx.channels)))


def _finish(planes: np.ndarray, size: int) -> SimplexField:
    planes = np.clip(planes, 0.0, None)
    planes = planes / planes.sum(axis=0, keepdims=True)
    return SimplexField(Grid2D(size, size), quantize(planes))


# -- Voronoi organs ----------------------------------------------------------------


def radial_push(planes: np.ndarray, center, strength: float, sigma: float) -> np.ndarray:
    """Move tissue outward from ``center``; the push d(r) = s (r / sigma) exp((1 - r^2 / sigma^2) / 2) peaks at r = sigma.

    Each output pixel samples the input bilinearly at x - d(r) r_hat, so every
    output vector is a convex combination of input simplex vectors.
    """
    size = planes.shape[-1]
    r, c = _coords(size)
    dr, dc = r - center[0], c - center[1]
    rad = np.sqrt(dr * dr + dc * dc)
    push = strength * (rad / sigma) * np.exp(0.5 * (1.0 - rad * rad / (sigma * sigma)))
    with np.errstate(invalid="ignore", divide="ignore"):
        ur = np.where(rad > 0, dr / rad, 0.0)
        uc = np.where(rad > 0, dc / rad, 0.0)
    src = np.stack([r - push * ur, c - push * uc])
    return np.stack([ndimage.map_coordinates(p, src, order=1, mode="nearest") for p in planes])


def generate_voronoi_pair(cfg: VoronoiConfig = VoronoiConfig(), seed: int = 0, index: int = 0) -> SamplePair:
    rng = sample_rng(seed, index, VORONOI_TAG)
    n, K = cfg.size, cfg.num_classes
    sites = [rng.uniform(0.0, n - 1, size=(cfg.sites_per_class, 2)) for _ in range(K - 1)]
    organs = soft_voronoi(sites, n, cfg.tau)
    ang = rng.uniform(0.0, 2.0 * np.pi)
    rad = cfg.tumor_jitter * np.sqrt(rng.uniform())
    mid = (n - 1) / 2.0
    center = (mid + rad * np.sin(ang), mid + rad * np.cos(ang))
    ctx = _sample_treatment(rng)
    sigma1 = _grown_sigma(cfg.sigma0, cfg.sigma1, cfg.treatment_effect, ctx)
    strength = cfg.displacement * (sigma1 - cfg.sigma0) / (cfg.sigma1 - cfg.sigma0)

    g0 = gaussian_blob(n, center, cfg.sigma0, cfg.amplitude)
    t0 = np.concatenate([organs * (1.0 - g0), g0[None]])
    moved = radial_push(organs, center, strength, sigma1)
    g1 = gaussian_blob(n, center, sigma1, cfg.amplitude)
    t1 = np.concatenate([moved * (1.0 - g1), g1[None]])
    prov = {"generator": "voronoi", "config_hash": config_hash(cfg), "seed": int(seed), "index": int(index)}
    return SamplePair(_finish(t0, n), _finish(t1, n), ctx, prov)


# -- vessel trees ----------------------------------------------------------------


def _reflect(x: float, hi: float) -> tuple[float, bool]:
    if x < 0:
        return -x, True
    if x > hi:
        return 2.0 * hi - x, True
    return x, False


def branching_walk(cfg: VesselConfig, rng) -> tuple[np.ndarray, tuple[int, int]]:
    """Root-anchored branching random walk rasterised to an 8-connected skeleton.

    Unit steps with floor(x + 1/2) rounding move at most one pixel per axis,
    so consecutive samples are 8-neighbours; reflection at the border keeps
    the path continuous.
    """
    n = cfg.size
    hi = n - 1.0
    root = (0, int(rng.integers(n // 4, 3 * n // 4 + 1)))
    skel = np.zeros((n, n), dtype=bool)
    skel[root] = True
    stack = [(float(root[0]), float(root[1]), np.pi / 2.0, cfg.steps)]  # heading pi/2: +rows
    branches = 1
    while stack:
        y, x, heading, steps = stack.pop(0)
        for _ in range(steps):
            heading += rng.uniform(-cfg.turn_spread, cfg.turn_spread)
            y, fy = _reflect(y + np.sin(heading), hi)
            x, fx = _reflect(x + np.cos(heading), hi)
            if fy:
                heading = -heading
            if fx:
                heading = np.pi - heading
            skel[int(np.floor(y + 0.5)), int(np.floor(x + 0.5))] = True
            if branches < cfg.max_branches and rng.uniform() < cfg.branch_prob:
                side = 1.0 if rng.uniform() < 0.5 else -1.0
                stack.append((y, x, heading + side * cfg.branch_angle, steps))
                branches += 1
    return skel, root


def _vessel_prob(dist: np.ndarray, radius: float) -> np.ndarray:
    return np.clip(radius + 0.5 - dist, 0.0, 1.0)


def generate_vessel_pair(cfg: VesselConfig = VesselConfig(), seed: int = 0, index: int = 0,
                         return_structure: bool = False):
    """Classes: lobes 0..L-1, vessel L, tumor L+1.

    The tumor only claims lobe tissue, so vessel probability is untouched by
    it and thickening stays monotone.
    """
    rng = sample_rng(seed, index, VESSEL_TAG)
    n, L = cfg.size, cfg.num_lobes
    skel, root = branching_walk(cfg, rng)
    dist = ndimage.distance_transform_edt(~skel)
    v0, v1 = _vessel_prob(dist, cfg.vessel_radius), _vessel_prob(dist, cfg.vessel_radius_t1)
    sites = [rng.uniform(0.0, n - 1, size=(cfg.sites_per_lobe, 2)) for _ in range(L)]
    lobes = soft_voronoi(sites, n, cfg.tau)

    pts = np.argwhere(skel)
    anchor = pts[rng.integers(len(pts))].astype(np.float64)
    ang = rng.uniform(0.0, 2.0 * np.pi)
    off = cfg.seed_distance * np.sqrt(rng.uniform())
    seed_px = np.clip(np.floor(anchor + off * np.array([np.sin(ang), np.cos(ang)]) + 0.5), 0, n - 1).astype(int)
    center = (float(seed_px[0]), float(seed_px[1]))
    ctx = _sample_treatment(rng)
    sigma1 = _grown_sigma(cfg.sigma0, cfg.sigma1, cfg.treatment_effect, ctx)

    g0 = gaussian_blob(n, center, cfg.sigma0, cfg.amplitude)
    g1 = np.maximum(g0, gaussian_blob(n, center, sigma1, cfg.amplitude) * np.exp(-dist / cfg.proximity_scale))

    def compose(v, g):
        free = 1.0 - v
        return np.concatenate([lobes * (free * (1.0 - g)), v[None], (free * g)[None]])

    prov = {"generator": "vessel", "config_hash": config_hash(cfg), "seed": int(seed), "index": int(index)}
    pair = SamplePair(_finish(compose(v0, g0), n), _finish(compose(v1, g1), n), ctx, prov)
    if return_structure:
        return pair, {"skeleton": skel, "root": root, "tumor_seed": tuple(int(s) for s in seed_px),
                      "seed_distance": float(dist[tuple(seed_px)]), "vessel_t0": v0 >= 0.5, "vessel_t1": v1 >= 0.5}
    return pair


GENERATORS = {"voronoi": (VoronoiConfig, generate_voronoi_pair), "vessel": (VesselConfig, generate_vessel_pair)}


def generate_dataset(benchmark: str, count: int, seed: int = 0, cfg=None) -> list[SamplePair]:
    if benchmark not in GENERATORS:
        raise DomainError(f"unknown benchmark {benchmark!r}; choose from {sorted(GENERATORS)}")
    cls, gen = GENERATORS[benchmark]
    cfg = cfg if cfg is not None else cls()
    return [gen(cfg, seed, i) for i in range(count)]


# -- folds ---------------------------------------------------------------------


def fold_of(index: int, folds: int = 5) -> int:
    return index % folds


def fold_split(n: int, fold: int, folds: int = 5) -> tuple[list[int], list[int]]:
    """(train indices, held-out indices) with held-out = {i : i mod folds == fold}."""
    if folds < 2 or not 0 <= fold < folds:
        raise DomainError(f"fold {fold} invalid for {folds} folds")
    test = [i for i in range(n) if i % folds == fold]
    train = [i for i in range(n) if i % folds != fold]
    return train, test


# -- dataset directories -------------------------------------------------------------


def write_dataset(pairs, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, pair in enumerate(pairs):
        sub = directory / f"pair_{i:04d}"
        sub.mkdir(exist_ok=True)
        write_adtf(sub / "t0.adtf", pair.baseline)
        write_adtf(sub / "t1.adtf", pair.target)
        (sub / "treatment.json").write_text(json.dumps(pair.treatment.to_json(), indent=1))
        entries.append({"dir": sub.name, "fields": ["t0.adtf", "t1.adtf"], "treatment": "treatment.json",
                        "provenance": pair.provenance})
    manifest = {"format": "adt-dataset", "version": DATASET_VERSION, "count": len(entries), "pairs": entries}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def read_dataset(directory) -> list[SamplePair]:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError:
        raise AdtfError(f"{directory}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise AdtfError(f"{directory / 'manifest.json'}: corrupt manifest ({exc})") from None
    if manifest.get("format") != "adt-dataset" or manifest.get("version") != DATASET_VERSION:
        raise AdtfError(f"{directory}: unsupported dataset format/version")
    out = []
    for e in manifest["pairs"]:
        sub = directory / e["dir"]
        t0, t1 = (read_adtf(sub / f) for f in e["fields"])
        ctx = TreatmentContext.from_json(json.loads((sub / e["treatment"]).read_text()))
        out.append(SamplePair(t0, t1, ctx, e.get("provenance", {})))
    return out


def dataset_hash(pairs) -> str:
    h = hashlib.sha256()
    for p in pairs:
        for f in (p.baseline, p.target):
            h.update(np.ascontiguousarray(f.values).tobytes())
        h.update(canonical_json(list(p.treatment.channels)).encode())
    return h.hexdigest()[:16]
