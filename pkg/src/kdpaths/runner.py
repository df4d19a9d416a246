"""Experiment orchestration: pretraining, single runs, grids, and log files.

Every stochastic consumer draws from a run-scoped stream derived from the
run seed and a fixed stream id, so adding or removing a grid arm never
perturbs another arm's data order or initialization.
"""

from __future__ import annotations

import dataclasses
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import models, training as tr
from . import tensor_engine as te
from .aggregation import AggregationState, expand_layerwise
from .config import RunConfig, RunVariant, expand_grid, parse_config
from .data import Dataset, gen_synthetic, load_csv, load_idx
from .distill_paths import bind_adapters, softmax_np

STREAM_TEACHER_INIT = 1
STREAM_STUDENT_INIT = 2
STREAM_ADAPTER_INIT = 3
STREAM_SHUFFLE = 4
STREAM_SYNTH_TRAIN = 5
STREAM_SYNTH_VAL = 6

RESULTS_HEADER = "strategy,seed,top1_err,top1_agr"
WEIGHTS_HEADER = "iter,path_id,v,z"
TIMING_HEADER = "epoch,wall_time_per_iter"
COSINE_HEADER = "iter,pair,cosine"


def stream(seed: int, stream_id: int) -> list:
    """Seed sequence for one named consumer of a run's randomness."""
    return [int(seed), int(stream_id)]


# ------------------------------------------------------------------ datasets


def load_datasets(cfg: RunConfig, seed: int) -> tuple:
    """(train, val) pair for one run seed.

    File-backed corpora are seed-independent; synthetic corpora draw
    train and val from separate streams of the run seed.
    """
    ds = cfg.dataset
    if ds.kind == "synthetic":
        train = gen_synthetic(ds.synth_kind, ds.n, ds.noise,
                              stream(seed, STREAM_SYNTH_TRAIN), ds.classes)
        val = gen_synthetic(ds.synth_kind, ds.n_val, ds.noise,
                            stream(seed, STREAM_SYNTH_VAL), ds.classes,
                            split="val")
        return train, val
    if ds.kind == "idx":
        return (load_idx(ds.train_images, ds.train_labels, ds.classes),
                load_idx(ds.val_images, ds.val_labels, ds.classes, split="val"))
    return (load_csv(ds.train_path, ds.input_dim, ds.classes, ds.header),
            load_csv(ds.val_path, ds.input_dim, ds.classes, ds.header,
                     split="val"))


def build_from_config(model_cfg, input_shape: tuple, classes: int, seed_seq):
    """Instantiate a network from its config block and the data geometry."""
    if model_cfg.arch == "convnet":
        return models.build_convnet(model_cfg.width_multiplier, input_shape,
                                    classes, seed_seq)
    dim = int(np.prod(input_shape))
    return models.build_mlp(model_cfg.hidden, dim, classes, seed_seq)


def prep_inputs(inputs: np.ndarray, net) -> np.ndarray:
    """Flatten image inputs for dense networks; pass others through."""
    if len(net.input_shape) == 1 and inputs.ndim > 2:
        return inputs.reshape(inputs.shape[0], -1)
    return inputs


# --------------------------------------------------------------- file helpers


def _append_jsonl(path: str, obj: dict):
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(obj) + "\n")


def _read_summary(path: str) -> dict:
    last = None
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                last = json.loads(line)
    if last is None or "best_epoch" not in last:
        raise ValueError(f"{path} has no summary line")
    return last


def _metrics_line(record: tr.MetricsRecord) -> dict:
    return {
        "epoch": record.epoch,
        "top1_err": record.top1_err,
        "top1_agreement_err": record.top1_agreement_err,
        "main_loss": record.main_loss,
        "per_path_losses": record.per_path_losses,
        "v": record.v,
        "wall_time_per_iter": None,  # measured values live in timing.csv
    }


def _summary_line(best: tr.MetricsRecord) -> dict:
    return {
        "best_epoch": best.epoch,
        "top1_err": best.top1_err,
        "top1_agreement_err": best.top1_agreement_err,
        "main_loss": best.main_loss,
        "per_path_losses": best.per_path_losses,
        "v": best.v,
    }


# --------------------------------------------------------------- feature cache


class TeacherFeatureCache:
    """Per-sample teacher activations, computed once and gathered per batch.

    The teacher is frozen, so its features and logits on a fixed corpus are
    constants; caching them removes the teacher forward pass from every
    training iteration and is shared by all runs over the same data.
    """

    def __init__(self, teacher, train_inputs: np.ndarray, tap_names,
                 chunk: int = 512):
        self.tap_names = sorted(set(tap_names) - {"logits"})
        feats = {t: [] for t in self.tap_names}
        logits = []
        prepped = prep_inputs(train_inputs, teacher)
        for start in range(0, prepped.shape[0], chunk):
            with te.no_grad():
                fb = models.forward_tapped(
                    teacher, te.Tensor(prepped[start:start + chunk]))
            for t in self.tap_names:
                feats[t].append(fb.taps[t].data)
            logits.append(fb.logits.data)
        self.features = {t: np.concatenate(feats[t]) for t in self.tap_names}
        self.logits = np.concatenate(logits)

    def gather(self, idx: np.ndarray) -> models.FeatureBundle:
        taps = {t: te.Tensor(self.features[t][idx]) for t in self.tap_names}
        return models.FeatureBundle(taps=taps, logits=te.Tensor(self.logits[idx]))


def teacher_val_probs(teacher, val: Dataset, chunk: int = 512) -> np.ndarray:
    parts = []
    prepped = prep_inputs(val.inputs, teacher)
    for start in range(0, prepped.shape[0], chunk):
        with te.no_grad():
            fb = models.forward_tapped(teacher,
                                       te.Tensor(prepped[start:start + chunk]))
        parts.append(softmax_np(fb.logits.data))
    return np.concatenate(parts)


# ----------------------------------------------------------------- pretraining


def pretrain_teacher(cfg: RunConfig, out_dir: str | None = None,
                     seed: int | None = None) -> str:
    """Train the teacher on the main loss only and checkpoint the best epoch.

    Returns the checkpoint path. The run directory also receives
    metrics.jsonl (per-epoch lines plus a best-epoch summary) and a
    teacher_meta.json fingerprint used to reuse compatible checkpoints.
    """
    if cfg.teacher.pretrain is None:
        raise ValueError("config has no teacher.pretrain block")
    seed = cfg.seeds[0] if seed is None else seed
    out_dir = out_dir or os.path.join(cfg.output_dir, "teacher")
    os.makedirs(out_dir, exist_ok=True)
    ckpt_path = os.path.join(out_dir, "teacher.ckpt")
    meta_path = os.path.join(out_dir, "teacher_meta.json")
    meta = {"dataset": dataclasses.asdict(cfg.dataset),
            "teacher": dataclasses.asdict(cfg.teacher), "seed": seed}
    if os.path.isfile(ckpt_path) and os.path.isfile(meta_path):
        with open(meta_path, "r", encoding="utf-8") as fh:
            if json.load(fh) == meta:
                return ckpt_path

    pre = cfg.teacher.pretrain
    train, val = load_datasets(cfg, seed)
    net = build_from_config(cfg.teacher.model, _geometry(train),
                            train.classes, stream(seed, STREAM_TEACHER_INIT))
    opt = tr.OptimizerState(lr=pre.lr, momentum=pre.momentum,
                            weight_decay=pre.weight_decay)
    for name, p in net.params.items():
        opt.register(name, p)
    shuffle_rng = np.random.default_rng(stream(seed, STREAM_SHUFFLE))
    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    if os.path.exists(metrics_path):
        os.remove(metrics_path)
    inputs = prep_inputs(train.inputs, net)
    state = AggregationState.create("none", k=0)
    best = None
    best_params = None
    for epoch in range(pre.epochs):
        lr = tr.lr_at(epoch, pre.lr, pre.milestones, pre.decay_factor)
        perm = shuffle_rng.permutation(train.n)
        main_sum, batches = 0.0, 0
        for start in range(0, train.n, pre.batch_size):
            idx = perm[start:start + pre.batch_size]
            losses = tr.train_step(net, None, te.Tensor(inputs[idx]),
                                   train.labels[idx], [], state, opt, lr)
            main_sum += float(losses.main.data)
            batches += 1
        err, _ = tr.evaluate(net, prep_inputs(val.inputs, net), val.labels)
        record = tr.MetricsRecord(epoch=epoch, top1_err=err,
                                  top1_agreement_err=None,
                                  main_loss=main_sum / batches,
                                  per_path_losses=[], v=[],
                                  wall_time_per_iter=None)
        _append_jsonl(metrics_path, _metrics_line(record))
        if best is None or err < best.top1_err:
            best = record
            best_params = {n: p.data.copy() for n, p in net.params.items()}
    _append_jsonl(metrics_path, _summary_line(best))
    for name, p in net.params.items():
        p.data[...] = best_params[name]
    models.save_checkpoint(ckpt_path, net.params)
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2)
    return ckpt_path


def load_teacher(cfg: RunConfig, ckpt_path: str, train: Dataset):
    """Rebuild the teacher network, load weights, and freeze it."""
    net = build_from_config(cfg.teacher.model, _geometry(train),
                            train.classes, 0)
    models.load_into(net, models.load_checkpoint(ckpt_path))
    net.freeze()
    return net


def _geometry(ds: Dataset) -> tuple:
    return tuple(ds.inputs.shape[1:])


# ------------------------------------------------------------------ one run


def run_single(cfg: RunConfig, variant: RunVariant, teacher, train: Dataset,
               val: Dataset, run_dir: str,
               cache: TeacherFeatureCache | None = None,
               val_probs: np.ndarray | None = None) -> dict:
    """Train one student and write its metrics, weights, timing, and cosine logs.

    Returns the best-epoch summary dict that closes metrics.jsonl.
    """
    os.makedirs(run_dir, exist_ok=True)
    seed = variant.seed
    agg = variant.aggregation
    paths = (expand_layerwise(variant.paths) if agg.layerwise
             else list(variant.paths))
    effective = paths if agg.strategy != "none" else []

    student = build_from_config(cfg.student, _geometry(train), train.classes,
                                stream(seed, STREAM_STUDENT_INIT))
    adapters = bind_adapters(effective, student, teacher,
                             stream(seed, STREAM_ADAPTER_INIT)) if effective else {}

    state = AggregationState.create(agg.strategy, k=len(effective),
                                    alpha=agg.alpha, fixed_v=agg.fixed_v,
                                    layerwise=agg.layerwise,
                                    moo_every=agg.moo_every)
    opt = tr.OptimizerState(lr=cfg.optimizer.lr, momentum=cfg.optimizer.momentum,
                            weight_decay=cfg.optimizer.weight_decay)
    for name, p in student.params.items():
        opt.register(name, p)
    for path in effective:
        for name, p in path.adapter_params().items():
            opt.register(name, p)
    if state.z is not None:
        opt.register("aggregation.z", state.z, weight_decay=0.0)

    if effective and cache is None:
        needed = set()
        for p in effective:
            for _, t_tap in p.tap_pairs():
                needed.add(t_tap)
        cache = TeacherFeatureCache(teacher, train.inputs, needed)
    if val_probs is None and teacher is not None:
        val_probs = teacher_val_probs(teacher, val)

    inputs = prep_inputs(train.inputs, student)
    val_inputs = prep_inputs(val.inputs, student)
    shuffle_rng = np.random.default_rng(stream(seed, STREAM_SHUFFLE))
    metrics_path = os.path.join(run_dir, "metrics.jsonl")
    if os.path.exists(metrics_path):
        os.remove(metrics_path)
    param_order = [(n, p.data.shape) for n, p in student.parameters().items()]

    weights_fh = open(os.path.join(run_dir, "weights.csv"), "w",
                      encoding="utf-8")
    timing_fh = open(os.path.join(run_dir, "timing.csv"), "w",
                     encoding="utf-8")
    cosine_fh = open(os.path.join(run_dir, "cosine.csv"), "w",
                     encoding="utf-8")
    best = None
    best_params = None
    try:
        weights_fh.write(WEIGHTS_HEADER + "\n")
        timing_fh.write(TIMING_HEADER + "\n")
        cosine_fh.write(COSINE_HEADER + "\n")
        iteration = 0
        for epoch in range(cfg.epochs):
            lr = tr.lr_at(epoch, cfg.optimizer.lr, cfg.optimizer.milestones,
                          cfg.optimizer.decay_factor)
            perm = shuffle_rng.permutation(train.n)
            main_sum = 0.0
            path_sums = np.zeros(len(effective))
            batches = 0
            started = time.perf_counter()
            for start in range(0, train.n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                bundle = cache.gather(idx) if effective else None
                losses = tr.train_step(student, teacher, te.Tensor(inputs[idx]),
                                       train.labels[idx], effective, state,
                                       opt, lr, teacher_bundle=bundle,
                                       step_index=iteration)
                main_sum += float(losses.main.data)
                if effective:
                    path_sums += np.asarray(losses.per_path_detached)
                for k, path in enumerate(effective):
                    z_text = repr(float(state.z.data[k])) if state.z is not None else ""
                    weights_fh.write(f"{iteration},{path.id},"
                                     f"{float(state.v[k])!r},{z_text}\n")
                if len(effective) >= 2 and iteration % cfg.sim_every == 0:
                    grads = tr.collect_path_gradients(student, bundle,
                                                      te.Tensor(inputs[idx]),
                                                      effective)
                    for pair, cos in tr.gradient_cosines(grads, param_order).items():
                        i, j = (int(s) for s in pair.split("-"))
                        cosine_fh.write(f"{iteration},{effective[i].id}-"
                                        f"{effective[j].id},{cos!r}\n")
                batches += 1
                iteration += 1
            elapsed = time.perf_counter() - started
            timing_fh.write(f"{epoch},{elapsed / batches!r}\n")
            weights_fh.flush()
            timing_fh.flush()
            cosine_fh.flush()

            err, agreement = tr.evaluate(student, val_inputs, val.labels,
                                         teacher_probs=val_probs)
            record = tr.MetricsRecord(
                epoch=epoch, top1_err=err, top1_agreement_err=agreement,
                main_loss=main_sum / batches,
                per_path_losses=[float(x) / batches for x in path_sums],
                v=[float(x) for x in state.v],
                wall_time_per_iter=elapsed / batches)
            _append_jsonl(metrics_path, _metrics_line(record))
            if best is None or err < best.top1_err:
                best = record
                best_params = {n: p.data.copy()
                               for n, p in student.params.items()}
    finally:
        weights_fh.close()
        timing_fh.close()
        cosine_fh.close()

    summary = _summary_line(best)
    _append_jsonl(metrics_path, summary)
    for name, p in student.params.items():
        p.data[...] = best_params[name]
    models.save_checkpoint(os.path.join(run_dir, "student.ckpt"),
                           student.params)
    if adapters:
        adapter_params = {}
        for path in effective:
            adapter_params.update(path.adapter_params())
        models.save_checkpoint(os.path.join(run_dir, "adapters.ckpt"),
                               adapter_params)
    return summary


# ---------------------------------------------------------------- experiments


def _ensure_teacher(cfg: RunConfig) -> str:
    if cfg.teacher.pretrain is not None:
        return pretrain_teacher(cfg)
    return cfg.teacher.checkpoint


def _teacher_row(cfg: RunConfig, teacher, val: Dataset) -> str:
    """Teacher reference row for results.csv, sourced from its own summary."""
    summary_path = os.path.join(cfg.output_dir, "teacher", "metrics.jsonl")
    if cfg.teacher.pretrain is not None and os.path.isfile(summary_path):
        err = _read_summary(summary_path)["top1_err"]
    else:
        err, _ = tr.evaluate(teacher, prep_inputs(val.inputs, teacher),
                             val.labels)
    return f"teacher,{cfg.seeds[0]},{err!r},"


def _grid_worker(payload) -> tuple:
    document, base_dir, unsafe_alpha, csv_header, label, seed, ckpt, run_dir = payload
    cfg = parse_config(document, base_dir, unsafe_alpha)
    if csv_header:
        cfg.dataset.header = True
    agg = next(a for a in cfg.aggregations if a.label == label)
    paths = [p for p in cfg.paths
             if agg.use_paths is None or p.id in agg.use_paths]
    variant = RunVariant(label=label, seed=seed, aggregation=agg, paths=paths)
    train, val = load_datasets(cfg, seed)
    teacher = load_teacher(cfg, ckpt, train)
    summary = run_single(cfg, variant, teacher, train, val, run_dir)
    return label, seed, summary


def run_experiment(cfg: RunConfig, jobs: int = 1, document: str | None = None,
                   base_dir: str | None = None, unsafe_alpha: bool = False,
                   csv_header: bool = False) -> int:
    """Execute a single run or a strategy-by-seed grid; returns 0 on success."""
    os.makedirs(cfg.output_dir, exist_ok=True)
    ckpt = _ensure_teacher(cfg)
    variants = expand_grid(cfg)

    if not cfg.is_grid:
        variant = variants[0]
        train, val = load_datasets(cfg, variant.seed)
        teacher = load_teacher(cfg, ckpt, train)
        run_single(cfg, variant, teacher, train, val, cfg.output_dir)
        return 0

    rows = {}
    if jobs > 1 and document is not None:
        payloads = [(document, base_dir, unsafe_alpha, csv_header, v.label,
                     v.seed, ckpt, os.path.join(cfg.output_dir, v.run_id))
                    for v in variants]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for label, seed, summary in pool.map(_grid_worker, payloads):
                rows[(label, seed)] = summary
        train, val = load_datasets(cfg, cfg.seeds[0])
        teacher = load_teacher(cfg, ckpt, train)
    else:
        shared = None
        if cfg.dataset.kind != "synthetic":
            shared = load_datasets(cfg, cfg.seeds[0])
        caches = {}
        teacher = None
        for variant in variants:
            train, val = shared or load_datasets(cfg, variant.seed)
            if teacher is None or cfg.dataset.kind == "synthetic":
                teacher = load_teacher(cfg, ckpt, train)
            key = None if shared else variant.seed
            if key not in caches:
                needed = {t for p in cfg.paths for _, t in p.tap_pairs()}
                cache = (TeacherFeatureCache(teacher, train.inputs, needed)
                         if cfg.paths else None)
                caches[key] = (cache, teacher_val_probs(teacher, val))
            cache, val_probs = caches[key]
            summary = run_single(cfg, variant, teacher, train, val,
                                 os.path.join(cfg.output_dir, variant.run_id),
                                 cache=cache, val_probs=val_probs)
            rows[(variant.label, variant.seed)] = summary
        train, val = shared or load_datasets(cfg, cfg.seeds[0])

    lines = [RESULTS_HEADER]
    for variant in variants:
        summary = rows[(variant.label, variant.seed)]
        agr = summary["top1_agreement_err"]
        agr_text = "" if agr is None else repr(agr)
        lines.append(f"{variant.label},{variant.seed},"
                     f"{summary['top1_err']!r},{agr_text}")
    lines.append(_teacher_row(cfg, teacher, val))
    with open(os.path.join(cfg.output_dir, "results.csv"), "w",
              encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return 0
