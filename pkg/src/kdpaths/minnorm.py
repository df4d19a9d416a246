"""Minimum-norm convex combination of per-path gradients on the simplex.

Solves min_{v in simplex} || sum_i v_i g_i ||^2 given only the Gram matrix
of the gradient vectors.  K=2 has a closed form; larger K uses Frank-Wolfe
with exact line search plus away steps, terminating on the duality-gap
certificate gap = 2 (v'Gv - min_i (Gv)_i), which directly bounds how far
any g_i . u can fall below ||u||^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_MAX_ITERS = 250
DEFAULT_TOL = 1e-7
DEGENERATE_TRACE = 1e-300  # an exactly-zero Gram means every gradient vanished


class NotConverged(RuntimeError):
    """Frank-Wolfe exhausted max_iters; carries the last iterate and gap."""

    def __init__(self, weights, gap):
        super().__init__(f"duality gap {gap:.3e} after iteration budget")
        self.weights = weights
        self.gap = gap


class UnknownParameter(KeyError):
    """A per-path gradient names a parameter outside the canonical order."""


@dataclass
class SimplexPoint:
    """Weights on the probability simplex; degenerate marks an all-zero input."""

    weights: np.ndarray
    degenerate: bool = False

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        w = np.clip(w, 0.0, None)
        total = w.sum()
        if total > 0:
            w = w / total
        self.weights = w


@dataclass
class GradientMatrix:
    """Row-per-path flattened gradients plus their Gram matrix."""

    rows: np.ndarray          # [K, d]
    gram: np.ndarray          # [K, K]
    param_order: list


def two_vector_minnorm(g1: np.ndarray, g2: np.ndarray) -> SimplexPoint:
    """Closed-form min-norm point on the segment between two gradients.

    gamma = clip( ((g2 - g1) . g2) / ||g1 - g2||^2 , 0, 1 ) weights g1.
    Equal vectors tie-break to (0.5, 0.5); two zero vectors additionally
    set the degenerate flag.
    """
    g1 = np.asarray(g1, dtype=np.float64).reshape(-1)
    g2 = np.asarray(g2, dtype=np.float64).reshape(-1)
    if g1.shape != g2.shape:
        raise ValueError(f"gradient lengths differ: {g1.size} vs {g2.size}")
    g11 = float(g1 @ g1)
    g22 = float(g2 @ g2)
    g12 = float(g1 @ g2)
    return _two_vector_from_products(g11, g12, g22)


def _two_vector_from_products(g11: float, g12: float, g22: float) -> SimplexPoint:
    denom = g11 - 2.0 * g12 + g22  # ||g1 - g2||^2
    if denom <= 0.0:
        degenerate = g11 == 0.0 and g22 == 0.0
        return SimplexPoint(np.array([0.5, 0.5]), degenerate=degenerate)
    gamma = (g22 - g12) / denom
    gamma = min(max(gamma, 0.0), 1.0)
    return SimplexPoint(np.array([gamma, 1.0 - gamma]))


def frank_wolfe_minnorm(gram: np.ndarray, max_iters: int = DEFAULT_MAX_ITERS,
                        tol: float = DEFAULT_TOL) -> SimplexPoint:
    """Minimize v'Gv over the simplex from a Gram matrix.

    Parameters
    ----------
    gram : [K, K] symmetric positive semidefinite matrix of pairwise
        gradient inner products.
    max_iters : iteration budget; exceeding it raises NotConverged with the
        last iterate attached.
    tol : absolute duality-gap threshold in the units of gram.
    """
    g = np.asarray(gram, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ValueError(f"gram must be square, got {g.shape}")
    k = g.shape[0]
    if k == 0:
        raise ValueError("empty gram")
    asym = np.abs(g - g.T).max() if k > 1 else 0.0
    if asym > 1e-8 * max(1.0, np.abs(g).max()):
        raise ValueError(f"gram not symmetric: asymmetry {asym:.3e}")

    if float(np.trace(g)) <= DEGENERATE_TRACE:
        return SimplexPoint(np.full(k, 1.0 / k), degenerate=True)
    if k == 1:
        return SimplexPoint(np.array([1.0]))
    if k == 2:
        return _two_vector_from_products(g[0, 0], g[0, 1], g[1, 1])

    v = np.full(k, 1.0 / k)
    gap = np.inf
    for _ in range(max_iters):
        gv = g @ v
        f = float(v @ gv)
        s = int(np.argmin(gv))
        gap = 2.0 * (f - gv[s])
        if gap <= tol:
            return SimplexPoint(v)
        # away vertex: worst coordinate currently in the support
        support = np.flatnonzero(v > 0)
        a = support[int(np.argmax(gv[support]))]
        toward = f - gv[s]       # improvement potential of the FW direction
        away = gv[a] - f         # and of the away direction
        if toward >= away or v[a] >= 1.0:
            d = -v.copy()
            d[s] += 1.0
            step_max = 1.0
        else:
            d = v.copy()
            d[a] -= 1.0
            step_max = v[a] / (1.0 - v[a])
        # exact line search for the quadratic along d, clipped to feasibility
        dgv = float(d @ gv)
        dgd = float(d @ (g @ d))
        if dgd <= 0.0:
            step = step_max
        else:
            step = min(max(-dgv / dgd, 0.0), step_max)
        if step == 0.0:
            return SimplexPoint(v)
        v = v + step * d
        v = np.clip(v, 0.0, None)
        total = v.sum()
        if total > 0:
            v /= total
    raise NotConverged(SimplexPoint(v), gap)


def flatten_path_gradients(per_path_grads: list[dict], param_order) -> GradientMatrix:
    """Zero-filled flattening of per-path gradient dicts into matrix rows.

    param_order is an ordered sequence of (name, shape) pairs fixing the
    layout; parameters a path never touched contribute zero blocks.  A
    gradient keyed by a name outside param_order raises UnknownParameter.
    """
    order = [(name, tuple(shape)) for name, shape in param_order]
    sizes = [int(np.prod(shape)) if shape else 1 for _, shape in order]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    names = {name: i for i, (name, _) in enumerate(order)}

    rows = np.zeros((len(per_path_grads), total))
    for r, grads in enumerate(per_path_grads):
        for name, arr in grads.items():
            if name not in names:
                raise UnknownParameter(f"gradient for unknown parameter {name!r}")
            i = names[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != order[i][1]:
                raise ValueError(
                    f"gradient shape {arr.shape} != declared {order[i][1]} for {name!r}"
                )
            rows[r, offsets[i] : offsets[i + 1]] = arr.reshape(-1)
    gram = rows @ rows.T
    return GradientMatrix(rows=rows, gram=gram, param_order=order)


def combine(matrix: GradientMatrix, point: SimplexPoint) -> np.ndarray:
    """Weighted gradient combination u = sum_i v_i g_i as a flat vector."""
    return point.weights @ matrix.rows
