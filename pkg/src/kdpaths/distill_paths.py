"""Per-path distillation losses between a frozen teacher and a student.

Four loss families: temperature-softened target cross-entropy on logits,
attention transfer on channel-collapsed feature maps, Gram-matrix matching
on channel-normalized features, and plain L2 regression on logits.  Every
loss reduces with a mean over the batch and sends gradient to the student
side only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor_engine as te
from .tensor_engine import Tensor

NORM_GUARD = 1e-12  # floor for vector norms before division

PATH_KINDS = ("ST", "AT", "NST", "L2Logit")
LOGIT_KINDS = ("ST", "L2Logit")


class UnknownTap(KeyError):
    """A path references a tap name the network does not expose."""


class AdapterMissing(ValueError):
    """NST path with mismatched channel counts has no adaptation layer."""


@dataclass
class AdaptationLayer:
    """Trainable 1x1 conv mapping student channels onto teacher channels.

    No bias; its kernel is updated only through the loss of the path that
    owns it, since no other objective term touches it.
    """

    kernel: Tensor  # [D_teacher, D_student, 1, 1]

    def apply(self, features: Tensor) -> Tensor:
        return te.conv2d(features, self.kernel, stride=1)


def make_adapter(d_student: int, d_teacher: int, seed) -> AdaptationLayer:
    rng = np.random.default_rng(seed)
    bound = np.sqrt(6.0 / d_student)
    kernel = Tensor(
        rng.uniform(-bound, bound, size=(d_teacher, d_student, 1, 1)),
        requires_grad=True,
    )
    return AdaptationLayer(kernel=kernel)


@dataclass
class DistillPath:
    """One teacher-to-student transfer route.

    student_tap/teacher_tap are tap names or "logits"; feature paths may
    span several taps, in which case the per-tap losses are summed and the
    tap lists must pair up one to one.
    """

    id: str
    kind: str
    student_tap: str | list[str]
    teacher_tap: str | list[str]
    temperature: float = 4.0
    at_squared: bool = True
    adapters: dict[str, AdaptationLayer] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in PATH_KINDS:
            raise ValueError(f"unknown path kind {self.kind!r}")
        if self.kind in LOGIT_KINDS:
            if self.student_tap != "logits" or self.teacher_tap != "logits":
                raise ValueError(f"{self.kind} path {self.id!r} must use logits taps")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")

    def tap_pairs(self) -> list[tuple[str, str]]:
        s = [self.student_tap] if isinstance(self.student_tap, str) else list(self.student_tap)
        t = [self.teacher_tap] if isinstance(self.teacher_tap, str) else list(self.teacher_tap)
        if len(s) != len(t):
            raise ValueError(
                f"path {self.id!r}: {len(s)} student taps vs {len(t)} teacher taps"
            )
        return list(zip(s, t))

    def adapter_params(self) -> dict[str, Tensor]:
        return {
            f"adapter.{self.id}.{tap}.kernel": a.kernel for tap, a in self.adapters.items()
        }


def log_softmax(logits: Tensor, axis: int = 1) -> Tensor:
    """Row-stable log softmax: shift by the (constant) row maximum."""
    shift = te.constant(logits.data.max(axis=axis, keepdims=True))
    z = logits - shift
    return z - te.log(te.tsum(te.exp(z), axis=axis, keepdims=True))


def softmax_np(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    """Stable softmax on plain arrays (teacher side, metrics)."""
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def soft_target_loss(student_logits: Tensor, teacher_logits: Tensor,
                     temperature: float = 4.0) -> Tensor:
    """Softened-target cross-entropy, scaled by temperature squared.

    Mean over the batch of -tau^2 * sum_c q_c(teacher) * log q_c(student),
    with both sides softened at the same temperature.  The teacher side is
    treated as constant, so gradient reaches the student logits only.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    sd, td = student_logits.data, teacher_logits.data
    if sd.shape != td.shape:
        raise te.ShapeMismatch(f"logit shapes differ: {sd.shape} vs {td.shape}")
    q_teacher = te.constant(softmax_np(td / temperature, axis=1))
    log_q_student = log_softmax(student_logits * (1.0 / temperature), axis=1)
    n = sd.shape[0]
    return te.tsum(q_teacher * log_q_student) * (-(temperature ** 2) / n)


def attention_map(features: Tensor) -> Tensor:
    """Collapse channels by summing squared activations: [N,C,H,W] -> [N,H,W]."""
    if features.data.ndim != 4:
        raise te.ShapeMismatch(f"attention_map needs rank 4, got {features.data.ndim}")
    return te.tsum(features * features, axis=1)


def _normalized_attention_rows(features: Tensor) -> Tensor:
    """Vectorized, L2-normalized attention maps, one row per sample."""
    amap = attention_map(features)
    n = amap.data.shape[0]
    rows = te.reshape(amap, (n, -1))
    norms = te.sqrt(te.clip_min(te.tsum(rows * rows, axis=1, keepdims=True), NORM_GUARD))
    return rows / te.clip_min(norms, NORM_GUARD)


def attention_transfer_loss(student_feats: Tensor, teacher_feats: Tensor,
                            squared: bool = True) -> Tensor:
    """Distance between normalized attention maps, mean over the batch.

    Channel counts may differ; batch and spatial extents must match.  The
    squared form (default) averages the squared L2 distance per sample; the
    alternative averages the unsquared distance.
    """
    sd, td = student_feats.data, teacher_feats.data
    if sd.ndim != 4 or td.ndim != 4:
        raise te.ShapeMismatch("attention transfer needs rank-4 features")
    if sd.shape[0] != td.shape[0] or sd.shape[2:] != td.shape[2:]:
        raise te.ShapeMismatch(
            f"batch/spatial extents differ: {sd.shape} vs {td.shape}"
        )
    s_rows = _normalized_attention_rows(student_feats)
    t_rows = _normalized_attention_rows(teacher_feats.detach())
    diff = s_rows - t_rows
    per_sample = te.tsum(diff * diff, axis=1)
    if not squared:
        per_sample = te.sqrt(te.clip_min(per_sample, NORM_GUARD))
    return te.tmean(per_sample)


def gram(features_normalized: Tensor) -> Tensor:
    """Gram matrix F^T F of a [D, HW] feature block -> [HW, HW]."""
    if features_normalized.data.ndim != 2:
        raise te.ShapeMismatch("gram expects a rank-2 [D, HW] block")
    return te.matmul(te.transpose(features_normalized, (1, 0)), features_normalized)


def _channel_normalized_columns(features: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C,HW] with every spatial column scaled to unit norm."""
    n, c, h, w = features.data.shape
    cols = te.reshape(features, (n, c, h * w))
    norms = te.sqrt(te.clip_min(te.tsum(cols * cols, axis=1, keepdims=True), NORM_GUARD))
    return cols / te.clip_min(norms, NORM_GUARD)


def nst_loss(student_feats: Tensor, teacher_feats: Tensor,
             adapter: AdaptationLayer | None = None) -> Tensor:
    """Frobenius distance between per-sample Gram matrices, mean over batch.

    Student features pass through the 1x1 adaptation conv when provided;
    the adapter is mandatory when channel counts differ.  Features are
    normalized across the channel dimension before the Gram product, and
    spatial extents must already agree.
    """
    sd, td = student_feats.data, teacher_feats.data
    if sd.ndim != 4 or td.ndim != 4:
        raise te.ShapeMismatch("nst needs rank-4 features")
    if sd.shape[0] != td.shape[0] or sd.shape[2:] != td.shape[2:]:
        raise te.ShapeMismatch(f"batch/spatial extents differ: {sd.shape} vs {td.shape}")
    if adapter is not None:
        student_feats = adapter.apply(student_feats)
    elif sd.shape[1] != td.shape[1]:
        raise AdapterMissing(
            f"channel counts {sd.shape[1]} vs {td.shape[1]} need an adaptation layer"
        )
    s_cols = _channel_normalized_columns(student_feats)
    t_cols = _channel_normalized_columns(teacher_feats.detach())
    g_s = te.matmul(te.transpose(s_cols, (0, 2, 1)), s_cols)
    g_t = te.matmul(te.transpose(t_cols, (0, 2, 1)), t_cols)
    diff = g_s - g_t
    fro = te.sqrt(te.clip_min(te.tsum(diff * diff, axis=(1, 2)), NORM_GUARD))
    return te.tmean(fro)


def l2_logit_loss(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    """Mean over the batch of the Euclidean distance between logit vectors."""
    sd, td = student_logits.data, teacher_logits.data
    if sd.shape != td.shape:
        raise te.ShapeMismatch(f"logit shapes differ: {sd.shape} vs {td.shape}")
    diff = teacher_logits.detach() - student_logits
    per_sample = te.sqrt(te.clip_min(te.tsum(diff * diff, axis=1), NORM_GUARD))
    return te.tmean(per_sample)


def _lookup(bundle, tap: str, side: str, path_id: str) -> Tensor:
    if tap == "logits":
        return bundle.logits
    if tap not in bundle.taps:
        raise UnknownTap(f"path {path_id!r}: {side} tap {tap!r} not found")
    return bundle.taps[tap]


def path_loss(path: DistillPath, student_bundle, teacher_bundle) -> Tensor:
    """Dispatch one path to its loss; multi-tap feature paths sum per-tap terms."""
    if path.kind == "ST":
        return soft_target_loss(
            student_bundle.logits, teacher_bundle.logits, path.temperature
        )
    if path.kind == "L2Logit":
        return l2_logit_loss(student_bundle.logits, teacher_bundle.logits)

    total = None
    for s_tap, t_tap in path.tap_pairs():
        s_feat = _lookup(student_bundle, s_tap, "student", path.id)
        t_feat = _lookup(teacher_bundle, t_tap, "teacher", path.id)
        if path.kind == "AT":
            term = attention_transfer_loss(s_feat, t_feat, squared=path.at_squared)
        else:  # NST
            term = nst_loss(s_feat, t_feat, adapter=path.adapters.get(s_tap))
        total = term if total is None else total + term
    if total is None:
        raise ValueError(f"path {path.id!r} has no taps")
    return total


def bind_adapters(paths: list[DistillPath], student_net, teacher_net, seed) -> None:
    """Create adaptation layers for NST tap pairs whose channel counts differ.

    Adapter kernels draw from a dedicated stream so their presence never
    perturbs any other consumer of the run seed.
    """
    s_shapes = student_net.tap_shapes()
    t_shapes = teacher_net.tap_shapes()
    counter = 0
    for path in paths:
        if path.kind != "NST":
            continue
        for s_tap, t_tap in path.tap_pairs():
            if s_tap not in s_shapes:
                raise UnknownTap(f"path {path.id!r}: student tap {s_tap!r} not found")
            if t_tap not in t_shapes:
                raise UnknownTap(f"path {path.id!r}: teacher tap {t_tap!r} not found")
            ds, dt = s_shapes[s_tap][1], t_shapes[t_tap][1]
            if ds != dt and s_tap not in path.adapters:
                path.adapters[s_tap] = make_adapter(ds, dt, [*_as_seq(seed), counter])
            counter += 1


def _as_seq(seed):
    if isinstance(seed, (list, tuple)):
        return list(seed)
    return [int(seed)]
