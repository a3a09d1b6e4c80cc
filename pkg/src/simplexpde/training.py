"""Losses, the fold-wise training loop, evaluation, sweeps and ablations."""
from __future__ import annotations

import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import value
from .field import DomainError, SimplexField, argmax_labels
from .growth import ResidualNet, init_residual
from .metrics import COLLAPSED, MetricReport, aggregate, fmt, sample_metrics
from .operators import PdeParams
from .solver import SolverConfig, StabilityError, simulate
from .synth import canonical_json, fold_split
from .topology import AtlWeights, SkeletonConfig, atl_loss

EPS = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    lambda_topo: float = 0.1
    lambda_reg: float = 1e-4      # applied as decoupled weight decay 2 * lambda_reg
    lambda_tv: float = 0.0
    atl: AtlWeights = AtlWeights()
    skeleton_iters: int = 10
    lr_physics: float = 1e-2
    lr_network: float = 1e-3
    betas: tuple = (0.9, 0.999)
    epochs: int = 10
    batch_size: int = 8
    folds: int = 5
    seed: int = 0
    spatial_on: bool = True
    growth_cnn_on: bool = True
    topology_on: bool = True
    growth_clamp: float = 2.0     # k_max
    carrying_capacity: float = 1.0
    diff_init: float = 0.05
    cross_init: float = 0.0
    cross_trainable: bool = True
    growth_init: float = 1.0
    kill_init: float = 0.1
    hidden: int = 8
    gamma_init: float = 0.1

    def __post_init__(self):
        for name in ("lambda_topo", "lambda_reg", "lambda_tv", "lr_physics", "lr_network", "growth_clamp"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise DomainError(f"{name} must be finite and >= 0, got {v}")
        if self.folds < 2:
            raise DomainError("folds must be >= 2")
        if self.epochs < 0 or self.batch_size < 1:
            raise DomainError("epochs >= 0 and batch_size >= 1 required")
        if isinstance(self.atl, dict):
            object.__setattr__(self, "atl", AtlWeights(**self.atl))
        object.__setattr__(self, "betas", tuple(self.betas))

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["atl"]["cl_classes"] = list(self.atl.cl_classes)
        doc["betas"] = list(self.betas)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        known = {k: v for k, v in doc.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise DomainError(f"unknown training config keys: {unknown}")
        return cls(**known)


# -- losses ----------------------------------------------------------------------


def _values(x):
    return x.values if isinstance(x, SimplexField) else x


def seg_loss(pred, target):
    """Soft multi-class Dice loss, one value per leading index."""
    p, q = _values(pred), np.asarray(value(_values(target)), dtype=np.float64)
    sp = (-2, -1)
    inter = ad.sum_(ad.mul(p, q), axis=sp)
    pp = ad.sum_(ad.mul(p, p), axis=sp)
    qq = (q * q).sum(axis=sp)
    dice = ad.div(ad.add(ad.mul(2.0, inter), EPS), ad.add(ad.add(pp, qq), EPS))
    return ad.sub(1.0, ad.mean(dice, axis=-1))


def total_variation(pred):
    """Sum of absolute forward differences over every class plane."""
    p = _values(pred)
    dx = ad.sub(ad.getitem(p, (Ellipsis, slice(None), slice(1, None))),
                ad.getitem(p, (Ellipsis, slice(None), slice(None, -1))))
    dy = ad.sub(ad.getitem(p, (Ellipsis, slice(1, None), slice(None))),
                ad.getitem(p, (Ellipsis, slice(None, -1), slice(None))))
    return ad.add(ad.sum_(ad.abs_(dx), axis=(-3, -2, -1)), ad.sum_(ad.abs_(dy), axis=(-3, -2, -1)))


def target_masks(target) -> np.ndarray:
    q = np.asarray(value(_values(target)))
    K = q.shape[-3]
    lab = argmax_labels(q, axis=-3)
    return (lab[..., None, :, :] == np.arange(K)[:, None, None]).astype(np.float64)


def total_loss(pred, target, cfg: TrainConfig, masks=None):
    """Batch mean of seg + lambda_topo * ATL + lambda_tv * TV.

    The lambda_reg term is realised by weight decay in the optimiser and is
    not part of this value.
    """
    loss = seg_loss(pred, target)
    lam_topo = cfg.lambda_topo if cfg.topology_on else 0.0
    if lam_topo:
        masks = target_masks(target) if masks is None else masks
        loss = ad.add(loss, ad.mul(lam_topo, atl_loss(_values(pred), masks, cfg.atl,
                                                      SkeletonConfig(cfg.skeleton_iters))))
    if cfg.lambda_tv:
        loss = ad.add(loss, ad.mul(cfg.lambda_tv, total_variation(pred)))
    return ad.mean(loss)


# -- model -----------------------------------------------------------------------


def model_meta(cfg: TrainConfig, num_classes: int, num_channels: int, tumor_class: int = -1) -> dict:
    return {"num_classes": num_classes, "num_channels": num_channels, "tumor_class": tumor_class % num_classes,
            "growth_clamp": cfg.growth_clamp, "carrying_capacity": cfg.carrying_capacity,
            "growth_cnn_on": cfg.growth_cnn_on, "spatial_on": cfg.spatial_on}


def init_params(cfg: TrainConfig, num_classes: int, num_channels: int, shape, fold: int = 0,
                tumor_class: int = -1) -> ad.ParamSet:
    K, C = num_classes, num_channels
    ps = ad.ParamSet()
    spatial = cfg.spatial_on
    ps.add("diff", np.full(K, cfg.diff_init if spatial else 0.0), trainable=spatial, constraint=ad.Clip(0.0, None))
    chi = np.full((K, K), cfg.cross_init if spatial else 0.0)
    ps.add("cross", chi, trainable=spatial and cfg.cross_trainable, constraint=ad.zero_diagonal)
    ps.add("growth_rate", np.full(tuple(shape), min(cfg.growth_init, cfg.growth_clamp)),
           constraint=ad.Clip(0.0, cfg.growth_clamp))
    ps.add("kill_rates", np.full(C, cfg.kill_init), constraint=ad.Clip(0.0, None))
    if cfg.growth_cnn_on:
        init_residual(cfg.seed * 1009 + fold, K, C, cfg.hidden, cfg.gamma_init).to_params(ps)
    ps.meta = model_meta(cfg, K, C, tumor_class)
    return ps


def build_model(vals: dict, meta: dict):
    """(PdeParams, residual or None) from leaf values, which may be tracked tensors."""
    params = PdeParams(vals["diff"], vals["cross"], vals["growth_rate"], meta["carrying_capacity"],
                       meta["growth_clamp"], vals["kill_rates"], meta["tumor_class"])
    net = ResidualNet.from_params(vals) if meta.get("growth_cnn_on") and "net.w1" in vals else None
    return params, net


def predict(ps: ad.ParamSet, baselines: np.ndarray, channels: np.ndarray, solver: SolverConfig, h: float = 1.0):
    params, net = build_model(ps.values(), ps.meta)
    return simulate(baselines, params, channels, solver, net, h)


def _stack(pairs, idx):
    p0 = np.stack([pairs[i].baseline.values for i in idx])
    p1 = np.stack([pairs[i].target.values for i in idx])
    ch = np.stack([pairs[i].treatment.array() for i in idx])
    return p0, p1, ch


# -- training --------------------------------------------------------------------


@dataclass
class FoldOutcome:
    params: ad.ParamSet
    history: list
    aborted: bool
    report: MetricReport | None
    flagged_steps: int = 0


def train_fold(pairs, train_idx, cfg: TrainConfig, solver: SolverConfig, fold: int = 0):
    """Fit one parameter set on ``train_idx``.  Returns (params, per-epoch mean losses, aborted)."""
    first = pairs[0]
    K, C = first.baseline.num_classes, len(first.treatment.channels)
    h = first.baseline.grid.spacing
    ps = init_params(cfg, K, C, first.baseline.grid.shape, fold)
    lr = {"physics": cfg.lr_physics, "network": cfg.lr_network}
    state = ad.AdamState()
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, fold, 0x747261])))
    history, flagged = [], 0
    train_idx = list(train_idx)
    for _ in range(cfg.epochs):
        order = [train_idx[i] for i in rng.permutation(len(train_idx))]
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            p0, p1, ch = _stack(pairs, idx)
            tape = ad.Tape()
            vals = ps.attach(tape)
            params, net = build_model(vals, ps.meta)
            try:
                pred = simulate(p0, params, ch, solver, net, h)
                loss = total_loss(pred, p1, cfg)
            except StabilityError:
                return ps, history, True
            lv = float(value(loss))
            if not np.isfinite(lv):
                return ps, history, True
            grads = ad.backward(loss, ps)
            # tensors and closures form cycles; break them so the next batch starts clean
            tape.release()
            del tape, vals, params, net, pred, loss
            ps.attached = {}
            state = ad.optimizer_step(ps, grads, state, lr, cfg.betas, 2.0 * cfg.lambda_reg)
            flagged += bool(state.flagged)
            losses.append(lv * len(idx))
        history.append(sum(losses) / len(order))
    return ps, history, False


def evaluate(ps: ad.ParamSet, pairs, solver: SolverConfig, indices=None, batch_size: int = 32,
             skeleton: SkeletonConfig = SkeletonConfig()) -> MetricReport:
    """Roll out each baseline, binarize by argmax and score every class against the target."""
    idx = list(range(len(pairs))) if indices is None else list(indices)
    if not idx:
        raise DomainError("nothing to evaluate")
    h = pairs[idx[0]].baseline.grid.spacing
    rows = []
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        p0, p1, ch = _stack(pairs, chunk)
        pred = value(predict(ps, p0, ch, solver, h))
        if not np.all(np.isfinite(pred)):
            raise StabilityError("rollout")
        rows.extend(sample_metrics(pred[i], p1[i], skeleton) for i in range(len(chunk)))
    K = pairs[idx[0]].baseline.num_classes
    return MetricReport.from_samples(rows, [str(i) for i in idx], _class_names(K))


def evaluate_fields(preds, targets, labels=None) -> MetricReport:
    rows = [sample_metrics(p, t) for p, t in zip(preds, targets)]
    K = np.shape(_values(preds[0]))[0]
    return MetricReport.from_samples(rows, labels, _class_names(K))


def _class_names(K):
    return [f"class{k}" for k in range(K - 1)] + ["tumor"]


def _fold_job(args):
    pairs, cfg, solver, fold = args
    train_idx, test_idx = fold_split(len(pairs), fold, cfg.folds)
    ps, hist, aborted = train_fold(pairs, train_idx, cfg, solver, fold)
    report = None
    if not aborted:
        try:
            report = evaluate(ps, pairs, solver, test_idx)
        except StabilityError:
            aborted = True
    return FoldOutcome(ps, hist, aborted, report)


def worker_count() -> int:
    env = os.environ.get("ADT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise DomainError(f"ADT_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _map(fn, jobs, workers):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


@dataclass
class ExperimentResult:
    fold_reports: list
    fold_params: list
    loss_history: list
    aborted: list
    config: dict
    solver: dict
    wall_clock: float = 0.0

    @property
    def collapsed(self) -> bool:
        return all(self.aborted)

    def report(self) -> MetricReport | None:
        good = [(i, r) for i, r in enumerate(self.fold_reports) if r is not None]
        if not good:
            return None
        return aggregate([r for _, r in good], [f"fold{i}" for i, _ in good])

    def headline(self) -> dict:
        rep = self.report()
        if rep is None:
            return {"dsc_mean": float("nan"), "dsc_std": float("nan"), "hd95_mean": float("nan"),
                    "hd95_std": float("nan"), "hd95_undefined": 0, "collapsed": True}
        out = rep.headline()
        out["collapsed"] = any(self.aborted)
        return out

    def to_json(self) -> dict:
        return {"config": self.config, "solver": self.solver, "wall_clock": self.wall_clock,
                "aborted": self.aborted, "loss_history": self.loss_history,
                "headline": {k: (v if not isinstance(v, float) or np.isfinite(v) else None)
                             for k, v in self.headline().items()}}


def train(pairs, cfg: TrainConfig, solver: SolverConfig = SolverConfig(), workers: int | None = None):
    """Cross-validated training: one parameter set per fold, each scored on its held-out samples.

    Returns (per-fold ParamSets, ExperimentResult).  A fold whose loss turns
    non-finite is aborted and flagged; the other folds still run.
    """
    if not pairs:
        raise DomainError("empty dataset")
    t0 = time.perf_counter()
    workers = worker_count() if workers is None else workers
    outs = _map(_fold_job, [(pairs, cfg, solver, f) for f in range(cfg.folds)], workers)
    res = ExperimentResult([o.report for o in outs], [o.params for o in outs], [o.history for o in outs],
                           [o.aborted for o in outs], cfg.to_json(), asdict(solver), time.perf_counter() - t0)
    return res.fold_params, res


def evaluate_folds(result: ExperimentResult, pairs, solver: SolverConfig, folds: int) -> ExperimentResult:
    """Re-score each fold's trained parameters on its held-out split under another solver setting."""
    reports, aborted = [], []
    for f, ps in enumerate(result.fold_params):
        if result.aborted[f]:
            reports.append(None)
            aborted.append(True)
            continue
        _, test_idx = fold_split(len(pairs), f, folds)
        try:
            reports.append(evaluate(ps, pairs, solver, test_idx))
            aborted.append(False)
        except StabilityError:
            reports.append(None)
            aborted.append(True)
    return ExperimentResult(reports, result.fold_params, result.loss_history, aborted, result.config,
                            asdict(solver), result.wall_clock)


# -- sweeps and ablations ------------------------------------------------------------

SOLVER_AXES = ("dt", "jacobi_iters", "relaxation")
TRAIN_AXES = ("resolution", "chi", "carrying_capacity", "lambda_tv", "k_max")


def apply_axis(axis: str, val, cfg: TrainConfig, solver: SolverConfig):
    if axis == "dt":
        return cfg, replace(solver, dt=float(val))
    if axis == "jacobi_iters":
        return cfg, replace(solver, jacobi_iters=int(val))
    if axis == "relaxation":
        return cfg, replace(solver, relaxation=float(val))
    if axis == "chi":
        return replace(cfg, cross_init=float(val), cross_trainable=False), solver
    if axis == "carrying_capacity":
        return replace(cfg, carrying_capacity=float(val)), solver
    if axis == "lambda_tv":
        return replace(cfg, lambda_tv=float(val)), solver
    if axis == "k_max":
        return replace(cfg, growth_clamp=float(val)), solver
    if axis == "resolution":
        return cfg, solver
    raise DomainError(f"unknown sweep axis {axis!r}; choose from {SOLVER_AXES + TRAIN_AXES}")


def _key(cfg: TrainConfig, solver: SolverConfig, pairs) -> str:
    shape = pairs[0].baseline.values.shape
    return canonical_json({"cfg": cfg.to_json(), "solver": asdict(solver), "n": len(pairs), "shape": list(shape)})


def cached_train(pairs, cfg, solver, cache: dict | None = None, workers=None) -> ExperimentResult:
    key = _key(cfg, solver, pairs)
    if cache is not None and key in cache:
        return cache[key]
    _, res = train(pairs, cfg, solver, workers)
    if cache is not None:
        cache[key] = res
    return res


@dataclass
class SweepTable:
    axis: str
    rows: list = field(default_factory=list)  # dicts: value, dsc_mean, dsc_std, hd95_mean, hd95_std, collapsed

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.csv_text())

    def csv_text(self) -> str:
        lines = [f"{self.axis},dsc_mean,dsc_std,hd95_mean,hd95_std"]
        for r in self.rows:
            cells = [COLLAPSED if r["collapsed"] else fmt(r[k])
                     for k in ("dsc_mean", "dsc_std", "hd95_mean", "hd95_std")]
            lines.append(",".join([repr(r["value"])] + cells))
        return "\n".join(lines) + "\n"

    def value_of(self, v, key="dsc_mean"):
        for r in self.rows:
            if r["value"] == v:
                return r[key]
        raise KeyError(v)


def _row(val, res: ExperimentResult) -> dict:
    hl = res.headline()
    finite = all(np.isfinite(hl[k]) for k in ("dsc_mean", "dsc_std")) and np.isfinite(hl["hd95_mean"])
    return {"value": val, **{k: hl[k] for k in ("dsc_mean", "dsc_std", "hd95_mean", "hd95_std")},
            "collapsed": bool(hl["collapsed"] or not finite), "result": res}


def sensitivity_sweep(axis: str, values, pairs, cfg: TrainConfig, solver: SolverConfig,
                      reference: ExperimentResult | None = None, resample=None, cache: dict | None = None,
                      workers=None) -> SweepTable:
    """Score the model at each axis value with everything else fixed.

    Solver-only axes re-run the rollout of the model trained at the base
    setting (``reference``, trained here if absent).  Other axes retrain.
    ``resample(size)`` must return the dataset at another resolution for the
    ``resolution`` axis.  Non-finite runs become COLLAPSED rows.
    """
    values = list(values)
    if not values:
        raise DomainError("sweep needs at least one value")
    table = SweepTable(axis)
    if axis in SOLVER_AXES and reference is None:
        reference = cached_train(pairs, cfg, solver, cache, workers)
    for v in values:
        c2, s2 = apply_axis(axis, v, cfg, solver)
        try:
            if axis in SOLVER_AXES:
                res = evaluate_folds(reference, pairs, s2, cfg.folds)
            elif axis == "resolution":
                if resample is None:
                    raise DomainError("the resolution axis needs a resample(size) callable")
                res = cached_train(resample(int(v)), c2, s2, cache, workers)
            else:
                res = cached_train(pairs, c2, s2, cache, workers)
        except (StabilityError, FloatingPointError):
            res = ExperimentResult([None] * cfg.folds, [], [], [True] * cfg.folds, c2.to_json(), asdict(s2))
        table.rows.append(_row(v, res))
    return table


ABLATIONS = (
    ("no-spatial", dict(spatial_on=False, growth_cnn_on=True, topology_on=False)),
    ("spatial-only", dict(spatial_on=True, growth_cnn_on=False, topology_on=False)),
    ("spatial+topology", dict(spatial_on=True, growth_cnn_on=False, topology_on=True)),
    ("full", dict(spatial_on=True, growth_cnn_on=True, topology_on=True)),
)


def ablation_run(pairs, cfg: TrainConfig, solver: SolverConfig = SolverConfig(), cache: dict | None = None,
                 workers=None) -> list[dict]:
    rows = []
    for name, toggles in ABLATIONS:
        res = cached_train(pairs, replace(cfg, **toggles), solver, cache, workers)
        row = _row(name, res)
        row.update(toggles)
        rows.append(row)
    return rows


def ablation_csv(rows) -> str:
    lines = ["row,spatial,growth_cnn,topology,dsc_mean,dsc_std,hd95_mean,hd95_std"]
    for r in rows:
        cells = [COLLAPSED if r["collapsed"] else fmt(r[k]) for k in ("dsc_mean", "dsc_std", "hd95_mean", "hd95_std")]
        lines.append(",".join([r["value"], str(int(r["spatial_on"])), str(int(r["growth_cnn_on"])),
                               str(int(r["topology_on"]))] + cells))
    return "\n".join(lines) + "\n"


def save_result(res: ExperimentResult, directory) -> None:
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for f, ps in enumerate(res.fold_params):
        ps.save(directory / f"fold_{f}", ps.meta)
    rep = res.report()
    if rep is not None:
        rep.to_csv(directory / "report.csv")
    (directory / "result.json").write_text(json.dumps(res.to_json(), indent=1))
