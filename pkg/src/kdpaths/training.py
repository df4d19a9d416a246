"""SGD training over the combined objective, plus evaluation metrics.

One optimizer step per batch regardless of strategy: the multiobjective
path first runs one extra forward/backward per distillation path to build
the gradient matrix for the min-norm solver, then applies a single update
through the combined objective.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor_engine as te
from .tensor_engine import Tensor
from . import aggregation as agg
from .distill_paths import DistillPath, log_softmax, path_loss, softmax_np
from .minnorm import NotConverged, SimplexPoint, flatten_path_gradients, frank_wolfe_minnorm
from .models import FeatureBundle, TappedNetwork, forward_tapped


class MissingGradient(RuntimeError):
    """A registered trainable parameter has no gradient buffer."""


@dataclass
class ParamGroup:
    name: str
    tensor: Tensor
    weight_decay: float
    lr_scale: float = 1.0


@dataclass
class OptimizerState:
    """SGD with momentum and decoupled-by-group weight decay.

    velocity = momentum * velocity + grad + weight_decay * param
    param   -= lr * lr_scale * velocity
    """

    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    milestones: list[int] = field(default_factory=list)
    decay_factor: float = 0.1
    groups: list[ParamGroup] = field(default_factory=list)
    velocities: dict[str, np.ndarray] = field(default_factory=dict)

    def register(self, name: str, tensor: Tensor, weight_decay: float | None = None,
                 lr_scale: float = 1.0):
        wd = self.weight_decay if weight_decay is None else weight_decay
        self.groups.append(ParamGroup(name=name, tensor=tensor, weight_decay=wd,
                                      lr_scale=lr_scale))
        self.velocities[name] = np.zeros_like(tensor.data)

    def params(self) -> list[Tensor]:
        return [g.tensor for g in self.groups]


def lr_at(epoch: int, initial_lr: float, milestones, factor: float) -> float:
    """Step schedule: initial_lr * factor^(number of milestones <= epoch)."""
    hits = sum(1 for m in milestones if m <= epoch)
    return initial_lr * (factor ** hits)


def sgd_step(opt: OptimizerState, lr: float):
    """Apply one SGD update to every registered parameter, then zero grads."""
    for group in opt.groups:
        p = group.tensor
        if p.grad is None:
            raise MissingGradient(f"parameter {group.name!r} has no gradient")
        vel = opt.velocities[group.name]
        vel *= opt.momentum
        vel += p.grad
        if group.weight_decay:
            vel += group.weight_decay * p.data
        p.data -= (lr * group.lr_scale) * vel
        p.grad[...] = 0.0


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy; gradient w.r.t. logits is (softmax - onehot)/N."""
    n, c = logits.data.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise te.ShapeMismatch(f"labels shape {labels.shape}, expected ({n},)")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    return te.tsum(te.constant(onehot) * log_softmax(logits)) * (-1.0 / n)


def top1_error(logits: np.ndarray, labels: np.ndarray) -> float:
    """Percentage of samples whose argmax (ties to lowest index) is wrong."""
    pred = np.argmax(logits, axis=1)
    return float((pred != np.asarray(labels)).mean() * 100.0)


def top1_agreement_error(student_probs: np.ndarray, teacher_probs: np.ndarray) -> float:
    """100 * (1 - fraction of samples where the two argmaxes agree)."""
    if student_probs.shape != teacher_probs.shape:
        raise te.ShapeMismatch(
            f"probability shapes differ: {student_probs.shape} vs {teacher_probs.shape}"
        )
    same = np.argmax(student_probs, axis=1) == np.argmax(teacher_probs, axis=1)
    return float((1.0 - same.mean()) * 100.0)


@dataclass
class MetricsRecord:
    """One evaluation row of a run log."""

    epoch: int
    top1_err: float
    top1_agreement_err: float | None
    main_loss: float
    per_path_losses: list[float]
    v: list[float]
    wall_time_per_iter: float | None


def collect_path_gradients(student: TappedNetwork, teacher_bundle: FeatureBundle,
                           batch: Tensor, paths: list[DistillPath]) -> list[dict]:
    """One backward per path; returns per-path student-parameter gradients.

    Parameters the path never touches are simply absent from its dict.
    Grad buffers are zeroed before and after each collection so optimizer
    state is unaffected.
    """
    out = []
    params = student.parameters()
    for path in paths:
        te.zero_grads(params.values())
        bundle = forward_tapped(student, batch)
        te.backward(path_loss(path, bundle, teacher_bundle))
        grads = {}
        for name, p in params.items():
            if np.any(p.grad):
                grads[name] = p.grad.copy()
        out.append(grads)
    te.zero_grads(params.values())
    return out


def solve_moo_weights(student: TappedNetwork, teacher_bundle: FeatureBundle,
                      batch: Tensor, paths: list[DistillPath]) -> SimplexPoint:
    """Min-norm simplex weights over per-path gradients for this batch."""
    per_path = collect_path_gradients(student, teacher_bundle, batch, paths)
    order = [(name, p.data.shape) for name, p in student.parameters().items()]
    matrix = flatten_path_gradients(per_path, order)
    try:
        return frank_wolfe_minnorm(matrix.gram)
    except NotConverged as err:
        return err.weights  # best iterate so far; certificate miss is logged upstream


def train_step(student: TappedNetwork, teacher: TappedNetwork | None, batch: Tensor,
               labels: np.ndarray, paths: list[DistillPath],
               state: agg.AggregationState, opt: OptimizerState, lr: float,
               teacher_bundle: FeatureBundle | None = None,
               step_index: int = 0) -> agg.StepLosses:
    """One optimizer step on the strategy's combined objective."""
    if teacher_bundle is None and teacher is not None and paths:
        with te.no_grad():
            tb = forward_tapped(teacher, batch)
        teacher_bundle = FeatureBundle(
            taps={k: v.detach() for k, v in tb.taps.items()}, logits=tb.logits.detach()
        )

    moo_point = None
    if (
        state.strategy == "multiobjective"
        and paths
        and state.alpha > 0.0
        and step_index % max(state.moo_every, 1) == 0
    ):
        moo_point = solve_moo_weights(student, teacher_bundle, batch, paths)
        state.v = moo_point.weights.copy()
        if moo_point.degenerate:
            state.degenerate_batches += 1
    elif state.strategy == "multiobjective":
        moo_point = SimplexPoint(state.v.copy())

    bundle = forward_tapped(student, batch)
    main = cross_entropy(bundle.logits, labels)
    per_path = []
    if paths and teacher_bundle is not None:
        # always computed for logging; the objective builders drop the
        # distillation block themselves when alpha is zero
        per_path = [path_loss(p, bundle, teacher_bundle) for p in paths]
    losses = agg.StepLosses.collect(main, per_path)
    objective = agg.build_objective(losses, state, moo_point)
    te.backward(objective)
    sgd_step(opt, lr)
    return losses


def evaluate(student: TappedNetwork, inputs: np.ndarray, labels: np.ndarray,
             teacher_probs: np.ndarray | None = None, batch_size: int = 256):
    """Batched no-grad pass: (top1_err, top1_agreement_err or None)."""
    n = inputs.shape[0]
    logits = np.empty((n, student.logits_dim))
    with te.no_grad():
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            bundle = forward_tapped(student, Tensor(inputs[start:stop]))
            logits[start:stop] = bundle.logits.data
    err = top1_error(logits, labels)
    agreement = None
    if teacher_probs is not None:
        agreement = top1_agreement_error(softmax_np(logits), teacher_probs)
    return err, agreement


def gradient_cosines(per_path_grads: list[dict], param_order) -> dict[str, float]:
    """Pairwise cosine similarities between flattened path gradients."""
    matrix = flatten_path_gradients(per_path_grads, param_order)
    norms = np.sqrt((matrix.rows ** 2).sum(axis=1))
    out = {}
    k = matrix.rows.shape[0]
    for i in range(k):
        for j in range(i + 1, k):
            denom = norms[i] * norms[j]
            cos = float(matrix.rows[i] @ matrix.rows[j] / denom) if denom > 0 else 0.0
            out[f"{i}-{j}"] = cos
    return out
