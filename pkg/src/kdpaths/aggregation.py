"""Combining per-path losses into one objective: four weighting strategies.

equal sums path losses as-is; fixed applies externally chosen weights;
multiobjective uses the min-norm simplex point over per-path gradients;
adaptive reparameterizes weights as v_i = exp(-z_i) with the proxies z
trained jointly, regularized by sum_i z_i so weights cannot collapse.
The distillation block always enters the objective scaled by alpha.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_engine as te
from .tensor_engine import Tensor
from .distill_paths import DistillPath
from .minnorm import SimplexPoint

STRATEGIES = ("none", "equal", "fixed", "multiobjective", "adaptive")


class WeightLengthMismatch(ValueError):
    """Fixed weight vector length differs from the number of paths."""


@dataclass
class StepLosses:
    """Losses of one batch: the main term plus one term per path."""

    main: Tensor
    per_path: list[Tensor]
    per_path_detached: np.ndarray

    @classmethod
    def collect(cls, main: Tensor, per_path: list[Tensor]) -> "StepLosses":
        detached = np.array([float(p.data) for p in per_path])
        return cls(main=main, per_path=per_path, per_path_detached=detached)


@dataclass
class AggregationState:
    """Strategy plus the mutable weighting state carried across steps."""

    strategy: str
    alpha: float = 1.0
    v: np.ndarray = field(default_factory=lambda: np.zeros(0))
    z: Tensor | None = None
    fixed_v: np.ndarray | None = None
    layerwise: bool = False
    moo_every: int = 1
    degenerate_batches: int = 0

    @classmethod
    def create(cls, strategy: str, k: int, alpha: float = 1.0,
               fixed_v=None, layerwise: bool = False, moo_every: int = 1):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        if not 0.0 <= alpha:
            raise ValueError(f"alpha must be nonnegative, got {alpha}")
        state = cls(strategy=strategy, alpha=float(alpha),
                    layerwise=layerwise, moo_every=int(moo_every))
        state.v = np.ones(k)
        if strategy == "fixed":
            if fixed_v is None or len(fixed_v) != k:
                raise WeightLengthMismatch(
                    f"fixed strategy needs {k} weights, got "
                    f"{'none' if fixed_v is None else len(fixed_v)}"
                )
            state.fixed_v = np.asarray(fixed_v, dtype=np.float64)
            state.v = state.fixed_v.copy()
        if strategy == "adaptive":
            # z starts at zero so every path weight starts at exp(0) = 1
            state.z = Tensor(np.zeros(k), requires_grad=True)
        return state


def equal_objective(losses: StepLosses, alpha: float) -> Tensor:
    """main + alpha * sum of path losses (all weights one)."""
    if alpha == 0.0 or not losses.per_path:
        return losses.main
    total = losses.per_path[0]
    for p in losses.per_path[1:]:
        total = total + p
    return losses.main + alpha * total


def fixed_objective(losses: StepLosses, v, alpha: float) -> Tensor:
    """main + alpha * sum_i v_i * loss_i with externally chosen weights v."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (len(losses.per_path),):
        raise WeightLengthMismatch(
            f"{len(losses.per_path)} paths but {v.size} weights"
        )
    if alpha == 0.0 or not losses.per_path:
        return losses.main
    total = float(v[0]) * losses.per_path[0]
    for w, p in zip(v[1:], losses.per_path[1:]):
        total = total + float(w) * p
    return losses.main + alpha * total


def moo_objective(losses: StepLosses, point: SimplexPoint, alpha: float) -> Tensor:
    """main + alpha * sum_i v_i * loss_i with v from the min-norm solver.

    A degenerate solver output (all path gradients zero) drops the
    distillation term for the batch.
    """
    if point.degenerate:
        return losses.main
    return fixed_objective(losses, point.weights, alpha)


def adaptive_objective(losses: StepLosses, state: AggregationState) -> Tensor:
    """main + alpha * ( sum_i exp(-z_i) loss_i + sum_i z_i ).

    z rides the tape, so backward produces its gradient alongside the
    network's; state.v is refreshed to exp(-z) for logging each call.
    """
    if state.z is None:
        raise ValueError("adaptive objective needs state.z")
    if state.z.data.shape != (len(losses.per_path),):
        raise WeightLengthMismatch(
            f"{len(losses.per_path)} paths but z has shape {state.z.data.shape}"
        )
    state.v = np.exp(-state.z.data)
    if state.alpha == 0.0 or not losses.per_path:
        return losses.main
    lvec = te.stack(losses.per_path)
    distill = te.tsum(te.exp(-state.z) * lvec) + te.tsum(state.z)
    return losses.main + state.alpha * distill


def adaptive_z_gradient(state: AggregationState, per_path_detached) -> np.ndarray:
    """Analytic gradient of the distillation block w.r.t. z.

    d/dz_i [ alpha (sum_j exp(-z_j) l_j + sum_j z_j) ]
        = alpha (1 - exp(-z_i) l_i).
    """
    l = np.asarray(per_path_detached, dtype=np.float64)
    return state.alpha * (1.0 - np.exp(-state.z.data) * l)


def build_objective(losses: StepLosses, state: AggregationState,
                    moo_point: SimplexPoint | None = None) -> Tensor:
    """Dispatch to the strategy's objective builder."""
    if state.strategy in ("none",) or not losses.per_path:
        return losses.main
    if state.strategy == "equal":
        return equal_objective(losses, state.alpha)
    if state.strategy == "fixed":
        return fixed_objective(losses, state.fixed_v, state.alpha)
    if state.strategy == "multiobjective":
        if moo_point is None:
            moo_point = SimplexPoint(state.v.copy())
        return moo_objective(losses, moo_point, state.alpha)
    if state.strategy == "adaptive":
        return adaptive_objective(losses, state)
    raise ValueError(f"unknown strategy {state.strategy!r}")


def expand_layerwise(paths: list[DistillPath]) -> list[DistillPath]:
    """Split each multi-tap feature path into one independent path per tap.

    Logit-level paths pass through unchanged; a four-tap backbone with
    paths [AT, ST, NST, L2Logit] therefore expands 4 -> 10 (4+1+4+1).
    """
    out: list[DistillPath] = []
    for path in paths:
        pairs = path.tap_pairs()
        if path.kind in ("ST", "L2Logit") or len(pairs) == 1:
            out.append(path)
            continue
        for s_tap, t_tap in pairs:
            out.append(
                DistillPath(
                    id=f"{path.id}@{s_tap}",
                    kind=path.kind,
                    student_tap=s_tap,
                    teacher_tap=t_tap,
                    temperature=path.temperature,
                    at_squared=path.at_squared,
                )
            )
    return out
