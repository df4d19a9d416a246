"""Training loop pieces: optimizer, schedule, metrics, per-strategy steps."""

import numpy as np
import pytest

from kdpaths import aggregation as agg
from kdpaths import models, tensor_engine as te, training as tr
from kdpaths.distill_paths import DistillPath, softmax_np


# ---------------------------------------------------------------- sgd + schedule


def test_sgd_step_vanilla():
    p = te.Tensor(np.array([1.0]), requires_grad=True)
    opt = tr.OptimizerState(momentum=0.0, weight_decay=0.0)
    opt.register("p", p)
    p.grad[:] = 1.0
    tr.sgd_step(opt, lr=0.1)
    assert np.allclose(p.data, [0.9])
    assert np.array_equal(p.grad, [0.0])  # grads zeroed after the step


def test_sgd_step_momentum_accumulates():
    p = te.Tensor(np.array([0.0]), requires_grad=True)
    opt = tr.OptimizerState(momentum=0.9, weight_decay=0.0)
    opt.register("p", p)
    p.grad[:] = 1.0
    tr.sgd_step(opt, lr=1.0)  # velocity 1.0, param -1.0
    p.grad[:] = 1.0
    tr.sgd_step(opt, lr=1.0)  # velocity 1.9, param -2.9
    assert np.allclose(p.data, [-2.9])


def test_sgd_step_weight_decay_in_velocity():
    p = te.Tensor(np.array([2.0]), requires_grad=True)
    opt = tr.OptimizerState(momentum=0.0, weight_decay=0.5)
    opt.register("p", p)
    p.grad[:] = 0.0
    tr.sgd_step(opt, lr=0.1)
    # velocity = 0 + 0 + 0.5*2 = 1, param = 2 - 0.1
    assert np.allclose(p.data, [1.9])


def test_sgd_per_group_weight_decay_override():
    p = te.Tensor(np.array([2.0]), requires_grad=True)
    z = te.Tensor(np.array([2.0]), requires_grad=True)
    opt = tr.OptimizerState(momentum=0.0, weight_decay=0.5)
    opt.register("p", p)
    opt.register("z", z, weight_decay=0.0)
    p.grad[:] = 0.0
    z.grad[:] = 0.0
    tr.sgd_step(opt, lr=0.1)
    assert np.allclose(p.data, [1.9])
    assert np.allclose(z.data, [2.0])  # proxy weights are never decayed


def test_sgd_missing_gradient():
    p = te.Tensor(np.array([1.0]))  # no grad buffer
    opt = tr.OptimizerState()
    opt.groups.append(tr.ParamGroup(name="p", tensor=p, weight_decay=0.0))
    opt.velocities["p"] = np.zeros(1)
    with pytest.raises(tr.MissingGradient):
        tr.sgd_step(opt, lr=0.1)


def test_lr_schedule_values():
    assert tr.lr_at(0, 0.1, [100, 150], 0.1) == 0.1
    assert tr.lr_at(99, 0.1, [100, 150], 0.1) == 0.1
    assert abs(tr.lr_at(120, 0.1, [100, 150], 0.1) - 0.01) < 1e-15
    assert abs(tr.lr_at(150, 0.1, [100, 150], 0.1) - 0.001) < 1e-15
    assert abs(tr.lr_at(130, 0.1, [60, 120, 160], 0.2) - 0.004) < 1e-15
    assert tr.lr_at(5, 0.1, [], 0.1) == 0.1


# ---------------------------------------------------------------- losses + metrics


def test_cross_entropy_gradient_identity():
    # d CE / d logits must equal (softmax - onehot) / N to 1e-10
    rng = np.random.default_rng(0)
    for _ in range(20):
        n, c = int(rng.integers(2, 9)), int(rng.integers(2, 7))
        logits = te.Tensor(rng.normal(size=(n, c)) * 3.0, requires_grad=True)
        labels = rng.integers(0, c, size=n)
        te.backward(tr.cross_entropy(logits, labels))
        onehot = np.zeros((n, c))
        onehot[np.arange(n), labels] = 1.0
        expected = (softmax_np(logits.data) - onehot) / n
        assert np.abs(logits.grad - expected).max() <= 1e-10


def test_cross_entropy_value_uniform():
    logits = te.Tensor(np.zeros((4, 10)))
    labels = np.zeros(4, dtype=int)
    assert abs(float(tr.cross_entropy(logits, labels).data) - np.log(10.0)) < 1e-12


def test_top1_error_tie_breaks_to_lowest_index():
    logits = np.zeros((5, 3))
    assert tr.top1_error(logits, np.zeros(5, dtype=int)) == 0.0
    assert tr.top1_error(logits, np.ones(5, dtype=int)) == 100.0


def test_top1_error_counting_oracle():
    rng = np.random.default_rng(1)
    for _ in range(50):
        n, c = int(rng.integers(1, 40)), int(rng.integers(2, 8))
        logits = rng.normal(size=(n, c))
        labels = rng.integers(0, c, size=n)
        wrong = sum(int(np.argmax(logits[i]) != labels[i]) for i in range(n))
        assert tr.top1_error(logits, labels) == wrong / n * 100.0


def test_agreement_error_counting_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n, c = int(rng.integers(1, 40)), int(rng.integers(2, 8))
        ps = rng.dirichlet(np.ones(c), size=n)
        pt = rng.dirichlet(np.ones(c), size=n)
        same = sum(int(np.argmax(ps[i]) == np.argmax(pt[i])) for i in range(n))
        expected = (1.0 - same / n) * 100.0  # same float order as the metric
        assert tr.top1_agreement_error(ps, pt) == expected


def test_agreement_with_self_is_zero():
    rng = np.random.default_rng(3)
    p = rng.dirichlet(np.ones(5), size=30)
    assert tr.top1_agreement_error(p, p.copy()) == 0.0


# ---------------------------------------------------------------- train steps


def _tiny_setup(seed=0, strategy="equal", alpha=1.0, fixed_v=None):
    rng = np.random.default_rng(seed)
    student = models.build_convnet(1, (1, 8, 8), 4, seed=seed)
    teacher = models.build_convnet(2, (1, 8, 8), 4, seed=seed + 100)
    teacher.freeze()
    paths = [
        DistillPath(id="at", kind="AT", student_tap=["b1", "b2", "b3"],
                    teacher_tap=["b1", "b2", "b3"]),
        DistillPath(id="st", kind="ST", student_tap="logits", teacher_tap="logits"),
    ]
    state = agg.AggregationState.create(strategy, k=len(paths), alpha=alpha,
                                        fixed_v=fixed_v)
    opt = tr.OptimizerState(lr=0.05, momentum=0.9, weight_decay=5e-4)
    for name, p in student.params.items():
        opt.register(name, p)
    if state.z is not None:
        opt.register("aggregation.z", state.z, weight_decay=0.0)
    inputs = rng.normal(size=(16, 1, 8, 8))
    labels = rng.integers(0, 4, size=16)
    return student, teacher, paths, state, opt, inputs, labels


def test_train_step_decreases_main_loss():
    student, teacher, paths, state, opt, inputs, labels = _tiny_setup(seed=5)
    batch = te.Tensor(inputs)
    first = None
    for i in range(60):
        losses = tr.train_step(student, teacher, batch, labels, paths, state, opt,
                               lr=0.05, step_index=i)
        if first is None:
            first = float(losses.main.data)
    assert float(losses.main.data) < first


def test_train_step_k0_is_plain_supervised():
    student, teacher, _, _, opt, inputs, labels = _tiny_setup(seed=6)
    state = agg.AggregationState.create("equal", k=0)
    losses = tr.train_step(student, teacher, te.Tensor(inputs), labels, [], state,
                           opt, lr=0.05)
    assert losses.per_path == []


def test_alpha_zero_trajectory_bitwise_equals_plain(tmp_path):
    runs = {}
    for tag, (strategy, alpha, paths_on) in {
        "plain": ("none", 1.0, False),
        "alpha0": ("adaptive", 0.0, True),
    }.items():
        student, teacher, paths, state, opt, inputs, labels = _tiny_setup(
            seed=7, strategy=strategy, alpha=alpha
        )
        use_paths = paths if paths_on else []
        batch = te.Tensor(inputs)
        for i in range(8):
            tr.train_step(student, teacher, batch, labels, use_paths, state, opt,
                          lr=0.05, step_index=i)
        runs[tag] = {n: p.data.copy() for n, p in student.params.items()}
    for name in runs["plain"]:
        assert np.array_equal(runs["plain"][name], runs["alpha0"][name]), name


def test_moo_step_updates_simplex_weights():
    student, teacher, paths, state, opt, inputs, labels = _tiny_setup(
        seed=8, strategy="multiobjective"
    )
    batch = te.Tensor(inputs)
    tr.train_step(student, teacher, batch, labels, paths, state, opt, lr=0.01,
                  step_index=0)
    assert abs(state.v.sum() - 1.0) < 1e-9
    assert (state.v >= 0).all()


def test_moo_combined_direction_is_descent_for_every_path():
    # small step along the min-norm combination must not increase any path loss
    student, teacher, paths, state, opt, inputs, labels = _tiny_setup(
        seed=9, strategy="multiobjective"
    )
    batch = te.Tensor(inputs)
    with te.no_grad():
        tb = models.forward_tapped(teacher, batch)

    def all_path_losses():
        with te.no_grad():
            bundle = models.forward_tapped(student, batch)
            from kdpaths.distill_paths import path_loss
            return [float(path_loss(p, bundle, tb).data) for p in paths]

    before = all_path_losses()
    per_path = tr.collect_path_gradients(student, tb, batch, paths)
    order = [(name, p.data.shape) for name, p in student.parameters().items()]
    from kdpaths.minnorm import flatten_path_gradients, frank_wolfe_minnorm, combine
    matrix = flatten_path_gradients(per_path, order)
    point = frank_wolfe_minnorm(matrix.gram, max_iters=10000, tol=1e-12)
    u = combine(matrix, point)
    offset = 0
    eps = 1e-5
    for name, shape in order:
        size = int(np.prod(shape))
        student.params[name].data -= eps * u[offset : offset + size].reshape(shape)
        offset += size
    after = all_path_losses()
    for b, a in zip(before, after):
        assert a <= b + 1e-9


def test_collect_path_gradients_restores_state():
    student, teacher, paths, state, opt, inputs, labels = _tiny_setup(seed=10)
    batch = te.Tensor(inputs)
    with te.no_grad():
        tb = models.forward_tapped(teacher, batch)
    before = {n: p.data.copy() for n, p in student.params.items()}
    grads = tr.collect_path_gradients(student, tb, batch, paths)
    assert len(grads) == 2
    for n, p in student.params.items():
        assert np.array_equal(p.data, before[n])
        assert np.all(p.grad == 0.0)
    # the ST path touches every student parameter, AT skips the head
    assert "fc.weight" in grads[1]
    assert "fc.weight" not in grads[0]


def test_adaptive_z_moves_with_training():
    student, teacher, paths, state, opt, inputs, labels = _tiny_setup(
        seed=11, strategy="adaptive"
    )
    batch = te.Tensor(inputs)
    for i in range(5):
        tr.train_step(student, teacher, batch, labels, paths, state, opt, lr=0.05,
                      step_index=i)
    assert np.any(state.z.data != 0.0)
    assert (state.v > 0).all()


def test_evaluate_matches_manual_forward():
    student, _, _, _, _, inputs, labels = _tiny_setup(seed=12)
    err, agreement = tr.evaluate(student, inputs, labels, batch_size=7)
    with te.no_grad():
        bundle = models.forward_tapped(student, te.Tensor(inputs))
    assert err == tr.top1_error(bundle.logits.data, labels)
    assert agreement is None
    tp = softmax_np(bundle.logits.data)
    err2, agr = tr.evaluate(student, inputs, labels, teacher_probs=tp, batch_size=7)
    assert agr == 0.0


def test_gradient_cosines_bounded():
    student, teacher, paths, state, opt, inputs, labels = _tiny_setup(seed=13)
    batch = te.Tensor(inputs)
    with te.no_grad():
        tb = models.forward_tapped(teacher, batch)
    grads = tr.collect_path_gradients(student, tb, batch, paths)
    order = [(name, p.data.shape) for name, p in student.parameters().items()]
    cos = tr.gradient_cosines(grads, order)
    assert set(cos) == {"0-1"}
    assert -1.0 - 1e-12 <= cos["0-1"] <= 1.0 + 1e-12
