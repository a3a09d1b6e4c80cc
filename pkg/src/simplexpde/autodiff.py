"""Reverse-mode differentiation over coarse field primitives.

A :class:`Tape` records one node per primitive application.  Values flowing
through the simulator are either plain ``numpy`` arrays (untracked) or
:class:`Tensor` objects (tracked).  Every primitive computes its output with
the same numpy kernel in both cases, so switching tracking on never changes a
forward value.

Backward rules are written by hand per primitive.  Non-differentiable points
use the one-sided limit from the active region: ``relu`` and ``clamp`` pass
gradient at their kinks, pooling routes it to the first selected tap, and the
simplex projection uses the Jacobian of its active set.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import stencil


class UnsupportedOperationError(TypeError):
    """Raised when a tracked value reaches an operation with no backward rule."""


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> "Tensor":
        return Tensor(np.asarray(value, dtype=np.float64), self, None, name)

    def release(self):
        """Drop recorded nodes so their saved arrays are freed without waiting for the cycle collector."""
        for node in self.nodes:
            node.vjp = node.parents = node.out = node.active = None
        self.nodes = []

    def op_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for node in self.nodes:
            counts[node.op] = counts.get(node.op, 0) + 1
        return counts

    def active_signature(self) -> str:
        """Hash of every branch decision taken on the tape.

        Two forward passes with equal signatures are on the same smooth piece
        of the computation, so finite differences across them are meaningful.
        """
        digest = hashlib.sha1()
        for node in self.nodes:
            if node.active is not None:
                digest.update(node.op.encode())
                digest.update(np.ascontiguousarray(node.active).tobytes())
        return digest.hexdigest()


class Node:
    __slots__ = ("op", "parents", "vjp", "out", "active")

    def __init__(self, op, parents, vjp, active=None):
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.out = None
        self.active = active


class Tensor:
    """A tracked array living on a tape."""

    __slots__ = ("value", "tape", "node", "name")
    __array_priority__ = 1000

    def __init__(self, value, tape, node, name=None):
        self.value = value
        self.tape = tape
        self.node = node
        self.name = name

    shape = property(lambda self: self.value.shape)
    ndim = property(lambda self: self.value.ndim)
    dtype = property(lambda self: self.value.dtype)

    def __repr__(self):
        label = self.name or (self.node.op if self.node else "leaf")
        return f"Tensor({label}, shape={self.value.shape})"

    def __len__(self):
        return len(self.value)

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method == "__call__" and not kwargs:
            fn = _UFUNCS.get(ufunc.__name__)
            if fn is not None:
                return fn(*inputs)
        raise UnsupportedOperationError(f"no backward rule for numpy.{ufunc.__name__}.{method}")

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedOperationError(f"no backward rule for numpy.{func.__name__}")

    def __bool__(self):
        raise UnsupportedOperationError("truth value of a tracked tensor is data-dependent control flow")


def value(x):
    """Raw numpy value of a tensor or array-like."""
    return x.value if isinstance(x, Tensor) else x


def tracked(*xs) -> bool:
    return any(isinstance(x, Tensor) for x in xs)


def record(op: str, out, parents, vjp, active=None):
    """Append a node for ``op`` if any parent is tracked; otherwise return ``out``.

    ``vjp`` maps the output cotangent to a tuple with one entry per parent
    (``None`` for parents that need no gradient).
    """
    tape = next((p.tape for p in parents if isinstance(p, Tensor)), None)
    if tape is None:
        return out
    node = Node(op, tuple(p if isinstance(p, Tensor) else None for p in parents), vjp, active)
    t = Tensor(np.asarray(out), tape, node)
    node.out = t
    tape.nodes.append(node)
    return t


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------------


def add(a, b):
    av, bv = value(a), value(b)
    out = av + bv
    sa, sb = np.shape(av), np.shape(bv)
    return record("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = value(a), value(b)
    out = av - bv
    sa, sb = np.shape(av), np.shape(bv)
    return record("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    av, bv = value(a), value(b)
    out = av * bv
    sa, sb = np.shape(av), np.shape(bv)
    return record("mul", out, (a, b), lambda g: (_unbroadcast(g * bv, sa), _unbroadcast(g * av, sb)))


def div(a, b):
    av, bv = value(a), value(b)
    out = av / bv
    sa, sb = np.shape(av), np.shape(bv)
    return record("div", out, (a, b),
                  lambda g: (_unbroadcast(g / bv, sa), _unbroadcast(-g * out / bv, sb)))


def neg(a):
    return record("neg", -value(a), (a,), lambda g: (-g,))


def tanh(a):
    out = np.tanh(value(a))
    return record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def abs_(a):
    av = value(a)
    sign = np.sign(av)
    return record("abs", np.abs(av), (a,), lambda g: (g * sign,), active=sign.astype(np.int8))


def relu(a):
    av = value(a)
    keep = av >= 0  # kink passes gradient: one-sided limit from the active side
    return record("relu", np.maximum(av, 0.0), (a,), lambda g: (np.where(keep, g, 0.0),), active=av > 0)


def clamp(a, lo=None, hi=None):
    av = value(a)
    out = np.clip(av, lo, hi) if (lo is not None or hi is not None) else np.array(av, copy=True)
    inside = np.ones(np.shape(av), dtype=bool)
    if lo is not None:
        inside &= av >= lo
    if hi is not None:
        inside &= av <= hi
    return record("clamp", out, (a,), lambda g: (np.where(inside, g, 0.0),), active=inside)


# -- shape ---------------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    av = value(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)
    shape = np.shape(av)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims=False):
    av = value(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a, shape):
    av = value(a)
    old = np.shape(av)
    return record("reshape", np.reshape(av, shape), (a,), lambda g: (np.reshape(g, old),))


def getitem(a, key):
    av = value(a)
    out = av[key]
    shape, dtype = av.shape, av.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        keys = key if isinstance(key, tuple) else (key,)
        if any(isinstance(k, (np.ndarray, list)) for k in keys):
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return record("getitem", out, (a,), vjp)


def embed(a, index: int, size: int, axis: int = -3):
    """Place ``a`` as slice ``index`` of a zero array with ``size`` entries on ``axis``."""
    av = np.asarray(value(a))
    pos = av.ndim + 1 + axis if axis < 0 else axis
    out = np.zeros(av.shape[:pos] + (size,) + av.shape[pos:], dtype=np.float64)
    sl = (slice(None),) * pos + (index,)
    out[sl] = av
    return record("embed", out, (a,), lambda g: (g[sl].copy(),))


def concat(parts, axis=-3):
    vals = [np.asarray(value(p)) for p in parts]
    target = np.broadcast_shapes(*[v.shape[:axis] for v in vals]) if axis < 0 else None
    if target is not None:
        vals = [np.broadcast_to(v, target + v.shape[axis:]) for v in vals]
    out = np.concatenate(vals, axis=axis)
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    shapes = [np.shape(value(p)) for p in parts]

    def vjp(g):
        pieces = np.split(g, sizes, axis=axis)
        return tuple(_unbroadcast(pc, s) for pc, s in zip(pieces, shapes))

    return record("concat", out, tuple(parts), vjp)


def classmix(chi, x):
    """out[..., k, :, :] = sum_j chi[k, j] * x[..., j, :, :]."""
    cv, xv = value(chi), value(x)
    out = np.einsum("kj,...jhw->...khw", cv, xv)
    sx = np.shape(xv)

    def vjp(g):
        xb = np.broadcast_to(xv, g.shape[:-3] + np.shape(xv)[-3:])
        gc = np.einsum("bkhw,bjhw->kj", g.reshape((-1,) + g.shape[-3:]), xb.reshape((-1,) + xb.shape[-3:]))
        gx = np.einsum("kj,...khw->...jhw", cv, g)
        return gc, _unbroadcast(gx, sx)

    return record("classmix", out, (chi, x), vjp)


# -- grid primitives -----------------------------------------------------------


def laplacian(f, h=1.0):
    return record("laplacian", stencil.laplacian(value(f), h), (f,),
                  lambda g: (stencil.laplacian(g, h),))


def grad_x(f, h=1.0):
    return record("grad_x", stencil.grad_x(value(f), h), (f,), lambda g: (stencil.grad_x_adjoint(g, h),))


def grad_y(f, h=1.0):
    return record("grad_y", stencil.grad_y(value(f), h), (f,), lambda g: (stencil.grad_y_adjoint(g, h),))


def avg_x(f):
    sf = np.shape(value(f))
    return record("avg_x", stencil.avg_x(value(f)), (f,),
                  lambda g: (_unbroadcast(stencil.avg_x_adjoint(g), sf),))


def avg_y(f):
    sf = np.shape(value(f))
    return record("avg_y", stencil.avg_y(value(f)), (f,),
                  lambda g: (_unbroadcast(stencil.avg_y_adjoint(g), sf),))


def face_div(fx, fy, h=1.0):
    sx, sy = np.shape(value(fx)), np.shape(value(fy))

    def vjp(g):
        gx, gy = stencil.face_div_adjoint(g, h)
        return _unbroadcast(gx, sx), _unbroadcast(gy, sy)

    return record("face_div", stencil.face_div(value(fx), value(fy), h), (fx, fy), vjp)


def jacobi_sweep(u, rhs, D, dt, omega, h=1.0):
    """One weighted-Jacobi iterate for the implicit diffusion solve."""
    uv, rv, Dv = value(u), value(rhs), value(D)
    shape = np.broadcast_shapes(np.shape(uv), np.shape(rv))
    uv_b = np.broadcast_to(uv, shape)
    Db = Dv if stencil._is_uniform(Dv) else np.broadcast_to(Dv, shape)
    out, saved = stencil.jacobi_sweep(uv_b, rv, Db, dt, omega, h)
    su, sr, sD = np.shape(uv), np.shape(rv), np.shape(Dv)

    def vjp(g):
        gu, gr, gD = stencil.jacobi_sweep_adjoint(g, uv_b, Db, saved, dt, omega, h)
        return _unbroadcast(gu, su), _unbroadcast(gr, sr), _unbroadcast(gD, sD)

    return record("jacobi", out, (u, rhs, D), vjp)


def project_simplex(v, axis=-3):
    vv = value(v)
    out = stencil.project_simplex_axis(vv, axis)
    return record("project", out, (v,), lambda g: (stencil.project_simplex_adjoint(g, out, axis),),
                  active=out > 0)


def conv3x3(x, w, b):
    xv, wv, bv = value(x), value(w), value(b)
    out, cols = stencil.conv3x3(xv, wv, bv)
    sx = np.shape(xv)

    def vjp(g):
        gx, gw, gb = stencil.conv3x3_adjoint(g, cols, wv, sx)
        return gx, gw, gb

    return record("conv3x3", out, (x, w, b), vjp)


def maxpool3(x):
    out, idx = stencil.pool3(value(x), "max")
    return record("maxpool3", out, (x,), lambda g: (stencil.pool3_adjoint(g, idx),), active=idx.astype(np.int8))


def minpool3(x):
    out, idx = stencil.pool3(value(x), "min")
    return record("minpool3", out, (x,), lambda g: (stencil.pool3_adjoint(g, idx),), active=idx.astype(np.int8))


def checkpoint(fn: Callable, *args):
    """Run ``fn(*args)`` without recording its interior; recompute it during backward.

    ``fn`` must be a pure function of its positional arguments built from
    primitives in this module.  Only array-valued outputs are supported.
    """
    vals = [value(a) for a in args]
    out = fn(*vals)
    if not tracked(*args):
        return out

    def vjp(g):
        sub_tape = Tape()
        leaves = [sub_tape.leaf(v) if isinstance(a, Tensor) else v for a, v in zip(args, vals)]
        res = fn(*leaves)
        grads = gradients(res, [l for l in leaves if isinstance(l, Tensor)], seed=g)
        sub_tape.release()
        it = iter(grads)
        return tuple(next(it) if isinstance(l, Tensor) else None for l in leaves)

    return record("checkpoint", out, args, vjp)


_UFUNCS = {
    "add": add,
    "subtract": sub,
    "multiply": mul,
    "true_divide": div,
    "negative": neg,
    "tanh": tanh,
    "absolute": abs_,
}


# -- backward ------------------------------------------------------------------


def _propagate(out: Tensor, seed: np.ndarray) -> dict[int, np.ndarray]:
    tape = out.tape
    grads: dict[int, np.ndarray] = {id(out): seed}
    stop = len(tape.nodes)
    if out.node is not None:
        stop = next(i for i in range(len(tape.nodes) - 1, -1, -1) if tape.nodes[i] is out.node) + 1
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes[:stop]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for parent, gp in zip(node.parents, node.vjp(g)):
            if parent is None or gp is None:
                continue
            key = id(parent)
            target = grads if parent.node is not None else leaf_grads
            if key in target:
                target[key] = target[key] + gp
            else:
                target[key] = gp
    if out.node is None:
        leaf_grads[id(out)] = leaf_grads.get(id(out), 0.0) + seed
    return leaf_grads


def gradients(out: Tensor, leaves, seed=None) -> list[np.ndarray]:
    """Gradients of ``out`` (seeded with ``seed``, default ones) w.r.t. ``leaves``."""
    if not isinstance(out, Tensor):
        return [np.zeros_like(value(l)) for l in leaves]
    seed = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)
    found = _propagate(out, seed)
    return [np.asarray(found[id(l)]).reshape(l.shape) if id(l) in found else np.zeros_like(l.value)
            for l in leaves]


def backward(loss: Tensor, params: "ParamSet") -> dict[str, np.ndarray]:
    """Accumulate dloss/dleaf into ``params.grads`` for every trainable attached leaf."""
    if np.ndim(value(loss)) != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {np.shape(value(loss))}")
    names = [n for n in params.names if params.trainable(n) and n in params.attached]
    leaves = [params.attached[n] for n in names]
    grads = gradients(loss, leaves)
    for n, g in zip(names, grads):
        params.grads[n] = params.grads[n] + g
    return dict(zip(names, grads))


# -- parameters and optimisation -----------------------------------------------


@dataclass(frozen=True)
class Clip:
    """Picklable box projection usable as a per-leaf constraint."""

    lo: float | None = None
    hi: float | None = None

    def __call__(self, x):
        return np.clip(x, self.lo, self.hi)


def zero_diagonal(x):
    x = np.array(x, copy=True)
    np.fill_diagonal(x, 0.0)
    return x


class ParamSet:
    """Named learnable leaves with gradient slots and optional projections."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}
        self._group: dict[str, str] = {}
        self.constraints: dict[str, Callable[[np.ndarray], np.ndarray]] = {}
        self.set_constraints: list[Callable[["ParamSet"], None]] = []
        self.grads: dict[str, np.ndarray] = {}
        self.attached: dict[str, Tensor] = {}
        self.meta: dict = {}

    @property
    def names(self) -> list[str]:
        return list(self._values)

    def add(self, name, val, trainable=True, constraint=None, lr_group="physics"):
        if name in self._values:
            raise KeyError(f"parameter {name!r} already registered")
        arr = np.array(val, dtype=np.float64)
        self._values[name] = arr
        self._trainable[name] = bool(trainable)
        self._group[name] = lr_group
        if constraint is not None:
            self.constraints[name] = constraint
            self._values[name] = np.asarray(constraint(arr), dtype=np.float64)
        self.grads[name] = np.zeros_like(arr)

    def __contains__(self, name):
        return name in self._values

    def __getitem__(self, name) -> np.ndarray:
        return self._values[name]

    def set(self, name, val):
        arr = np.asarray(val, dtype=np.float64)
        if arr.shape != self._values[name].shape:
            raise ValueError(f"shape of {name!r} is fixed at {self._values[name].shape}, got {arr.shape}")
        self._values[name] = arr

    def trainable(self, name) -> bool:
        return self._trainable[name]

    def set_trainable(self, name, flag: bool):
        self._trainable[name] = bool(flag)

    def group(self, name) -> str:
        return self._group[name]

    def zero_grad(self):
        for n, v in self._values.items():
            self.grads[n] = np.zeros_like(v)

    def attach(self, tape: Tape) -> dict:
        """Leaves for trainable entries, raw arrays for frozen ones."""
        self.attached = {n: tape.leaf(v, n) for n, v in self._values.items() if self._trainable[n]}
        return {n: self.attached.get(n, v) for n, v in self._values.items()}

    def values(self) -> dict[str, np.ndarray]:
        return dict(self._values)

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for n, v in self._values.items():
            out._values[n] = v.copy()
            out._trainable[n] = self._trainable[n]
            out._group[n] = self._group[n]
            out.grads[n] = np.zeros_like(v)
        out.constraints = dict(self.constraints)
        out.set_constraints = list(self.set_constraints)
        out.meta = dict(self.meta)
        return out

    def add_set_constraint(self, fn):
        """Projection acting on several leaves at once; runs after the per-leaf ones."""
        if fn not in self.set_constraints:
            self.set_constraints.append(fn)
        fn(self)

    def apply_constraints(self):
        for n, fn in self.constraints.items():
            self._values[n] = np.asarray(fn(self._values[n]), dtype=np.float64)
        for fn in self.set_constraints:
            fn(self)

    def save(self, directory, meta: dict | None = None):
        """JSON manifest plus ADTF payloads for field-valued (2-D or 3-D) leaves.

        ``meta`` is stored verbatim and returned as ``.meta`` by :meth:`load`.
        """
        from .field import write_adtf_array

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"format": "paramset", "version": 1, "meta": meta or {}, "leaves": {}}
        for n, v in self._values.items():
            entry = {"shape": list(v.shape), "trainable": self._trainable[n], "group": self._group[n]}
            if v.ndim in (2, 3) and min(v.shape[-2:]) >= 2:
                fname = n.replace(".", "_") + ".adtf"
                planes = v if v.ndim == 3 else v[None]
                write_adtf_array(directory / fname, planes)
                entry["file"] = fname
            else:
                entry["data"] = v.ravel().tolist()
            manifest["leaves"][n] = entry
        (directory / "params.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load(cls, directory) -> "ParamSet":
        from .field import read_adtf_array

        directory = Path(directory)
        manifest = json.loads((directory / "params.json").read_text())
        out = cls()
        for n, entry in manifest["leaves"].items():
            shape = tuple(entry["shape"])
            if "file" in entry:
                arr = read_adtf_array(directory / entry["file"]).reshape(shape)
            else:
                arr = np.array(entry["data"], dtype=np.float64).reshape(shape)
            out.add(n, arr, trainable=entry["trainable"], lr_group=entry.get("group", "physics"))
        out.meta = manifest.get("meta", {})
        return out


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    flagged: list = field(default_factory=list)


def optimizer_step(params: ParamSet, grads: dict, state: AdamState, lr, betas=(0.9, 0.999),
                   weight_decay=0.0, eps=1e-8) -> AdamState:
    """Adam with bias correction and decoupled weight decay, then projections.

    ``lr`` is a float or a mapping from learning-rate group to float.
    Leaves whose gradient is not finite are left untouched and listed in
    ``state.flagged``.
    """
    b1, b2 = betas
    state.step += 1
    state.flagged = []
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for n in params.names:
        if not params.trainable(n) or n not in grads:
            continue
        g = grads[n]
        if not np.all(np.isfinite(g)):
            state.flagged.append(n)
            continue
        rate = lr[params.group(n)] if isinstance(lr, dict) else lr
        m = state.m.get(n, np.zeros_like(g))
        v = state.v.get(n, np.zeros_like(g))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[n], state.v[n] = m, v
        p = params[n]
        p = p - rate * (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            p = p - rate * weight_decay * params[n]
        params.set(n, p)
    params.apply_constraints()
    return state


def finite_difference(fn: Callable[[], float], arr: np.ndarray, index, eps=1e-4) -> float:
    """Central difference of ``fn`` w.r.t. ``arr[index]`` (``arr`` is modified in place and restored)."""
    old = arr[index]
    arr[index] = old + eps
    fp = fn()
    arr[index] = old - eps
    fm = fn()
    arr[index] = old
    return (fp - fm) / (2.0 * eps)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
