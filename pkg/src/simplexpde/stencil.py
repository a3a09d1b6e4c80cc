"""Plain numpy kernels for the grid operators.

Every function here acts on the trailing two axes ``(H, W)`` of its inputs and
broadcasts over any leading axes (batch, class).  Boundaries are zero-flux:
cell-centred values with a mirrored ghost cell, which is the same thing as a
vanishing flux through every boundary face.

The autodiff primitives wrap these kernels together with their adjoints, so
nothing in this module knows about tapes.
"""
from __future__ import annotations

import numpy as np

_SPATIAL = ((1, 1), (1, 1))

# Fixed neighbourhood order for 3x3 windows (row offset, col offset).
# Tie-breaking in the pooling kernels follows this order.
TAPS = tuple((di, dj) for di in range(3) for dj in range(3))

# |sum - 1| below which a nonnegative vector counts as already projected
SIMPLEX_ROUNDING = 1e-14


def _pad(x: np.ndarray, mode: str = "edge", value: float = 0.0) -> np.ndarray:
    widths = [(0, 0)] * (x.ndim - 2) + list(_SPATIAL)
    if mode == "edge":
        return np.pad(x, widths, mode="edge")
    return np.pad(x, widths, mode="constant", constant_values=value)


def edge_pad_adjoint(gp: np.ndarray) -> np.ndarray:
    """Adjoint of one-cell replicate padding: fold the halo back onto the edges."""
    g = gp[..., 1:-1, 1:-1].copy()
    g[..., 0, :] += gp[..., 0, 1:-1]
    g[..., -1, :] += gp[..., -1, 1:-1]
    g[..., :, 0] += gp[..., 1:-1, 0]
    g[..., :, -1] += gp[..., 1:-1, -1]
    g[..., 0, 0] += gp[..., 0, 0]
    g[..., 0, -1] += gp[..., 0, -1]
    g[..., -1, 0] += gp[..., -1, 0]
    g[..., -1, -1] += gp[..., -1, -1]
    return g


def laplacian(f: np.ndarray, h: float = 1.0) -> np.ndarray:
    """5-point Laplacian with mirrored ghost cells (self-adjoint)."""
    fp = _pad(f)
    out = fp[..., 1:-1, 2:] + fp[..., 1:-1, :-2] + fp[..., 2:, 1:-1] + fp[..., :-2, 1:-1]
    out = out - 4.0 * f
    return out / (h * h)


# -- face-centred pieces -----------------------------------------------------
# x-faces sit between columns j and j+1 (shape H x (W-1)); y-faces between
# rows i and i+1 (shape (H-1) x W).


def grad_x(f, h=1.0):
    return (f[..., :, 1:] - f[..., :, :-1]) / h


def grad_y(f, h=1.0):
    return (f[..., 1:, :] - f[..., :-1, :]) / h


def grad_x_adjoint(g, h=1.0):
    shape = g.shape[:-1] + (g.shape[-1] + 1,)
    out = np.zeros(shape, dtype=g.dtype)
    out[..., :, 1:] += g / h
    out[..., :, :-1] -= g / h
    return out


def grad_y_adjoint(g, h=1.0):
    shape = g.shape[:-2] + (g.shape[-2] + 1, g.shape[-1])
    out = np.zeros(shape, dtype=g.dtype)
    out[..., 1:, :] += g / h
    out[..., :-1, :] -= g / h
    return out


def avg_x(f):
    return 0.5 * (f[..., :, 1:] + f[..., :, :-1])


def avg_y(f):
    return 0.5 * (f[..., 1:, :] + f[..., :-1, :])


def avg_x_adjoint(g):
    shape = g.shape[:-1] + (g.shape[-1] + 1,)
    out = np.zeros(shape, dtype=g.dtype)
    out[..., :, 1:] += 0.5 * g
    out[..., :, :-1] += 0.5 * g
    return out


def avg_y_adjoint(g):
    shape = g.shape[:-2] + (g.shape[-2] + 1, g.shape[-1])
    out = np.zeros(shape, dtype=g.dtype)
    out[..., 1:, :] += 0.5 * g
    out[..., :-1, :] += 0.5 * g
    return out


def face_div(fx: np.ndarray, fy: np.ndarray, h: float = 1.0) -> np.ndarray:
    """Divergence of face fluxes; boundary faces carry zero flux."""
    shape = np.broadcast_shapes(fx.shape[:-2], fy.shape[:-2]) + (fy.shape[-2] + 1, fx.shape[-1] + 1)
    out = np.zeros(shape, dtype=np.result_type(fx, fy))
    out[..., :, :-1] += fx / h
    out[..., :, 1:] -= fx / h
    out[..., :-1, :] += fy / h
    out[..., 1:, :] -= fy / h
    return out


def face_div_adjoint(g: np.ndarray, h: float = 1.0):
    gx = (g[..., :, :-1] - g[..., :, 1:]) / h
    gy = (g[..., :-1, :] - g[..., 1:, :]) / h
    return gx, gy


# -- implicit diffusion --------------------------------------------------------


def face_coefficients(D: np.ndarray):
    """Arithmetic face averages of a cell-centred diffusivity."""
    return avg_x(D), avg_y(D)


def neighbour_sum(u, Dx, Dy, h=1.0):
    """Off-diagonal part of the diffusion stencil: sum over faces of D_face * u_nbr / h^2.

    ``Dx``/``Dy`` are face arrays or, for a spatially uniform diffusivity,
    arrays whose last two axes have length one.
    """
    shape = np.broadcast_shapes(u.shape[:-2], np.shape(Dx)[:-2]) + u.shape[-2:]
    out = np.zeros(shape, dtype=np.result_type(u, Dx))
    out[..., :, :-1] += Dx * u[..., :, 1:]
    out[..., :, 1:] += Dx * u[..., :, :-1]
    out[..., :-1, :] += Dy * u[..., 1:, :]
    out[..., 1:, :] += Dy * u[..., :-1, :]
    return out if h == 1.0 else out / (h * h)


def face_total(Dx, Dy, h=1.0):
    """Sum of the face coefficients touching each cell, divided by h^2."""
    shape = Dx.shape[:-1] + (Dx.shape[-1] + 1,)
    out = np.zeros(shape, dtype=Dx.dtype)
    out[..., :, :-1] += Dx
    out[..., :, 1:] += Dx
    out[..., :-1, :] += Dy
    out[..., 1:, :] += Dy
    return out / (h * h)


def face_count(H: int, W: int) -> np.ndarray:
    """Number of interior faces around each cell (4 inside, 3 on edges, 2 at corners)."""
    n = np.full((H, W), 4.0)
    n[0, :] -= 1
    n[-1, :] -= 1
    n[:, 0] -= 1
    n[:, -1] -= 1
    return n


def _is_uniform(D) -> bool:
    return np.ndim(D) >= 2 and np.shape(D)[-2:] == (1, 1)


def jacobi_sweep(u, rhs, D, dt, omega, h=1.0):
    """One weighted-Jacobi sweep for (I - dt div(D grad)) u = rhs.

    The splitting keeps the mirrored ghost cells: each boundary face adds
    D_i * u_i to the neighbour sum and D_i to the diagonal.  Both sides of the
    equation change by the same amount, so the fixed point is unchanged, but
    the diagonal is constant for a uniform D and every sweep then preserves
    the domain sum exactly.

    ``D`` is either broadcast to ``u.shape`` or spatially uniform (trailing
    axes of length one).  Returns the new iterate together with the
    intermediates the adjoint needs.
    """
    s = dt / (h * h)
    ghost = 4.0 - face_count(*u.shape[-2:])
    if _is_uniform(D):
        Dx = Dy = D
        diag = 1.0 + 4.0 * s * D
    else:
        Dx, Dy = face_coefficients(D)
        diag = 1.0 + dt * face_total(Dx, Dy, h) + s * D * ghost
    z = (rhs + dt * neighbour_sum(u, Dx, Dy, h) + s * D * ghost * u) / diag
    # written as a correction so that D == 0 returns rhs bit-exactly
    out = u + omega * (z - u)
    return out, (Dx, Dy, diag, z, ghost)


def jacobi_sweep_adjoint(g, u, D, saved, dt, omega, h=1.0):
    Dx, Dy, diag, z, ghost = saved
    s = dt / (h * h)
    w = omega * g / diag
    gu = (1.0 - omega) * g + dt * neighbour_sum(w, Dx, Dy, h) + s * D * ghost * w
    grhs = w
    gDx = s * (w[..., :, :-1] * (u[..., :, 1:] - z[..., :, :-1]) + w[..., :, 1:] * (u[..., :, :-1] - z[..., :, 1:]))
    gDy = s * (w[..., :-1, :] * (u[..., 1:, :] - z[..., :-1, :]) + w[..., 1:, :] * (u[..., :-1, :] - z[..., 1:, :]))
    gG = s * ghost * w * (u - z)
    if _is_uniform(D):
        gD = (gDx.sum(axis=(-2, -1), keepdims=True) + gDy.sum(axis=(-2, -1), keepdims=True)
              + gG.sum(axis=(-2, -1), keepdims=True))
    else:
        gD = avg_x_adjoint(gDx) + avg_y_adjoint(gDy) + gG
    return gu, grhs, gD


def helmholtz_matrix(D: np.ndarray, dt: float, h: float = 1.0) -> np.ndarray:
    """Dense (HW x HW) matrix of I - dt div(D grad) for a single 2-D plane."""
    H, W = D.shape
    Dx, Dy = face_coefficients(D)
    n = H * W
    A = np.eye(n)
    idx = np.arange(n).reshape(H, W)
    s = dt / (h * h)
    for (a, b, c) in ((idx[:, :-1], idx[:, 1:], Dx), (idx[:-1, :], idx[1:, :], Dy)):
        a, b, c = a.ravel(), b.ravel(), c.ravel()
        A[a, a] += s * c
        A[b, b] += s * c
        A[a, b] -= s * c
        A[b, a] -= s * c
    return A


# -- simplex projection --------------------------------------------------------


def project_simplex_last(v: np.ndarray) -> np.ndarray:
    """Euclidean projection of every vector along the last axis onto the simplex.

    Sort-based threshold: find the largest rho with u_rho > (sum_{i<=rho} u_i - 1)/rho
    on the descending sort u, then shift by that threshold and clip at zero.
    """
    K = v.shape[-1]
    u = -np.sort(-v, axis=-1)
    css = np.cumsum(u, axis=-1) - 1.0
    ind = np.arange(1, K + 1, dtype=np.float64)
    cond = u - css / ind > 0
    rho = np.count_nonzero(cond, axis=-1)
    theta = np.take_along_axis(css, (rho - 1)[..., None], axis=-1) / rho[..., None]
    out = np.maximum(v - theta, 0.0)
    # vectors already on the simplex up to rounding pass through untouched
    feasible = (v.min(axis=-1) >= 0) & (np.abs(v.sum(axis=-1) - 1.0) <= SIMPLEX_ROUNDING)
    return np.where(feasible[..., None], v, out)


def project_simplex_axis(v: np.ndarray, axis: int = -3) -> np.ndarray:
    moved = np.moveaxis(v, axis, -1)
    return np.ascontiguousarray(np.moveaxis(project_simplex_last(moved), -1, axis))


def project_simplex_adjoint(g: np.ndarray, out: np.ndarray, axis: int = -3) -> np.ndarray:
    """Active-set Jacobian: on strictly positive outputs subtract the active mean."""
    active = out > 0
    n = np.count_nonzero(active, axis=axis, keepdims=True)
    gm = np.where(active, g, 0.0)
    mean = gm.sum(axis=axis, keepdims=True) / np.maximum(n, 1)
    return np.where(active, g - mean, 0.0)


# -- 3x3 windows ---------------------------------------------------------------


def _windows(xp: np.ndarray, H: int, W: int) -> np.ndarray:
    return np.stack([xp[..., di:di + H, dj:dj + W] for di, dj in TAPS], axis=-3)


def pool3(x: np.ndarray, mode: str):
    """3x3 max- or min-pool, stride 1, out-of-domain cells ignored.

    Returns ``(out, idx)`` where ``idx`` is the selected tap (first in TAPS on ties).
    """
    H, W = x.shape[-2:]
    fill = -np.inf if mode == "max" else np.inf
    win = _windows(_pad(x, "constant", fill), H, W)
    idx = np.argmax(win, axis=-3) if mode == "max" else np.argmin(win, axis=-3)
    out = np.take_along_axis(win, idx[..., None, :, :], axis=-3)[..., 0, :, :]
    return out, idx


def pool3_adjoint(g: np.ndarray, idx: np.ndarray) -> np.ndarray:
    H, W = g.shape[-2:]
    gp = np.zeros(g.shape[:-2] + (H + 2, W + 2), dtype=g.dtype)
    for t, (di, dj) in enumerate(TAPS):
        gp[..., di:di + H, dj:dj + W] += np.where(idx == t, g, 0.0)
    return gp[..., 1:-1, 1:-1]


def conv3x3(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """3x3 convolution (cross-correlation) with replicate padding.

    x: (..., Cin, H, W); w: (Cout, Cin, 3, 3); b: (Cout,).  Returns the output
    and the unfolded input columns (..., Cin * 9, H * W), which the adjoint reuses.
    """
    H, W = x.shape[-2:]
    cin = x.shape[-3]
    cols = _windows(_pad(x), H, W).reshape(x.shape[:-3] + (cin * 9, H * W))
    out = np.matmul(w.reshape(w.shape[0], cin * 9), cols)
    return out.reshape(x.shape[:-3] + (w.shape[0], H, W)) + b[:, None, None], cols


def conv3x3_adjoint(g, cols, w, x_shape):
    cout, cin = w.shape[:2]
    H, W = x_shape[-2:]
    g2 = g.reshape(g.shape[:-2] + (H * W,))
    gw = np.matmul(g2, np.swapaxes(cols, -1, -2))
    gw = gw.reshape((-1, cout, cin * 9)).sum(axis=0).reshape(w.shape)
    gb = g2.sum(axis=-1).reshape(-1, cout).sum(axis=0)
    gcols = np.matmul(w.reshape(cout, cin * 9).T, g2).reshape(x_shape[:-3] + (cin, 9, H, W))
    gp = np.zeros(x_shape[:-2] + (H + 2, W + 2), dtype=g.dtype)
    for t, (di, dj) in enumerate(TAPS):
        gp[..., di:di + H, dj:dj + W] += gcols[..., t, :, :]
    return edge_pad_adjoint(gp), gw, gb
