"""End-to-end orchestration: pretraining, run artifacts, grids, determinism."""

import json
import os

import numpy as np
import pytest

from kdpaths import config, data, models, runner
from kdpaths import training as tr


def _synth_doc(out_dir, **overrides):
    doc = {
        "dataset": {"kind": "synthetic", "synth_kind": "gaussian_blobs",
                    "n": 60, "n_val": 40, "noise": 0.6},
        "teacher": {"hidden": [32], "pretrain": {"epochs": 2, "batch_size": 20}},
        "student": {"hidden": [16]},
        "paths": [{"id": "st", "kind": "ST"}],
        "epochs": 2,
        "batch_size": 20,
        "output_dir": str(out_dir),
    }
    doc.update(overrides)
    return doc


def _parse(doc):
    return config.parse_config(json.dumps(doc))


def _idx_doc(tmp_path, out_dir, **overrides):
    images, labels = data.synthetic_image_corpus(40, classes=4, hw=8, seed=0,
                                                 noise=0.1)
    vi, vl = data.synthetic_image_corpus(20, classes=4, hw=8, seed=1, noise=0.1)
    data.write_idx(tmp_path / "ti", tmp_path / "tl", images, labels)
    data.write_idx(tmp_path / "vi", tmp_path / "vl", vi, vl)
    doc = {
        "dataset": {"kind": "idx", "classes": 4,
                    "train_images": str(tmp_path / "ti"),
                    "train_labels": str(tmp_path / "tl"),
                    "val_images": str(tmp_path / "vi"),
                    "val_labels": str(tmp_path / "vl")},
        "teacher": {"width_multiplier": 2, "pretrain": {"epochs": 1,
                                                        "batch_size": 20}},
        "student": {"width_multiplier": 1},
        "paths": [
            {"id": "at", "kind": "AT", "student_tap": ["b1", "b2", "b3"],
             "teacher_tap": ["b1", "b2", "b3"]},
            {"id": "st", "kind": "ST"},
        ],
        "epochs": 1,
        "batch_size": 20,
        "sim_every": 1,
        "output_dir": str(out_dir),
    }
    doc.update(overrides)
    return doc


def _read_jsonl(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _read_csv(path):
    with open(path, "r", encoding="utf-8") as fh:
        header, *rows = fh.read().strip().split("\n")
    return header, [r.split(",") for r in rows if r]


# ---------------------------------------------------------------- pretraining


def test_pretrain_writes_checkpoint_and_metrics(tmp_path):
    cfg = _parse(_synth_doc(tmp_path / "out"))
    ckpt = runner.pretrain_teacher(cfg)
    assert os.path.isfile(ckpt)
    lines = _read_jsonl(os.path.join(cfg.output_dir, "teacher", "metrics.jsonl"))
    assert len(lines) == 3  # two epochs + summary
    assert lines[0]["epoch"] == 0 and lines[0]["wall_time_per_iter"] is None
    assert "best_epoch" in lines[-1]
    params = models.load_checkpoint(ckpt)
    assert "fc1.weight" in params


def test_pretrain_beats_untrained_and_reuses_checkpoint(tmp_path):
    cfg = _parse(_synth_doc(tmp_path / "out"))
    train, val = runner.load_datasets(cfg, cfg.seeds[0])
    fresh = runner.build_from_config(cfg.teacher.model, (2,), 4,
                                     runner.stream(0, runner.STREAM_TEACHER_INIT))
    fresh_err, _ = tr.evaluate(fresh, val.inputs, val.labels)
    ckpt = runner.pretrain_teacher(cfg)
    teacher = runner.load_teacher(cfg, ckpt, train)
    trained_err, _ = tr.evaluate(teacher, val.inputs, val.labels)
    assert trained_err < fresh_err
    assert not any(p.requires_grad for p in teacher.params.values())
    stamp = os.path.getmtime(ckpt)
    assert runner.pretrain_teacher(cfg) == ckpt
    assert os.path.getmtime(ckpt) == stamp  # reused, not retrained


def test_checkpoint_roundtrip_metrics_identical(tmp_path):
    cfg = _parse(_synth_doc(tmp_path / "out"))
    ckpt = runner.pretrain_teacher(cfg)
    train, val = runner.load_datasets(cfg, 0)
    a = runner.load_teacher(cfg, ckpt, train)
    b = runner.load_teacher(cfg, ckpt, train)
    assert tr.evaluate(a, val.inputs, val.labels) == tr.evaluate(
        b, val.inputs, val.labels)


# ------------------------------------------------------------------ single run


def test_single_run_artifacts(tmp_path):
    cfg = _parse(_synth_doc(tmp_path / "out"))
    assert runner.run_experiment(cfg) == 0
    out = cfg.output_dir
    lines = _read_jsonl(os.path.join(out, "metrics.jsonl"))
    assert len(lines) == 3
    for rec in lines[:-1]:
        assert set(rec) == {"epoch", "top1_err", "top1_agreement_err",
                            "main_loss", "per_path_losses", "v",
                            "wall_time_per_iter"}
        assert rec["wall_time_per_iter"] is None
        assert len(rec["per_path_losses"]) == 1
    summary = lines[-1]
    best = min(lines[:-1], key=lambda r: (r["top1_err"], r["epoch"]))
    assert summary["best_epoch"] == best["epoch"]
    assert summary["top1_err"] == best["top1_err"]

    header, rows = _read_csv(os.path.join(out, "weights.csv"))
    assert header == "iter,path_id,v,z"
    assert len(rows) == 6  # 3 iters/epoch x 2 epochs x 1 path
    assert all(r[1] == "st" and r[2] == "1.0" and r[3] == "" for r in rows)

    header, rows = _read_csv(os.path.join(out, "timing.csv"))
    assert header == "epoch,wall_time_per_iter"
    assert len(rows) == 2 and all(float(r[1]) > 0 for r in rows)

    header, rows = _read_csv(os.path.join(out, "cosine.csv"))
    assert header == "iter,pair,cosine" and rows == []

    student = models.load_checkpoint(os.path.join(out, "student.ckpt"))
    assert "head.weight" in student


def test_grid_results_table(tmp_path):
    doc = _synth_doc(tmp_path / "out",
                     aggregation=[{"strategy": "none", "label": "student"},
                                  {"strategy": "equal"}],
                     seed=[0, 1])
    cfg = _parse(doc)
    assert runner.run_experiment(cfg) == 0
    out = cfg.output_dir
    header, rows = _read_csv(os.path.join(out, "results.csv"))
    assert header == "strategy,seed,top1_err,top1_agr"
    assert len(rows) == 5
    assert [r[0] for r in rows] == ["student", "student", "equal", "equal",
                                    "teacher"]
    for label, seed, err, agr in rows[:4]:
        run_dir = os.path.join(out, f"{label}-seed{seed}")
        summary = _read_jsonl(os.path.join(run_dir, "metrics.jsonl"))[-1]
        assert float(err) == summary["top1_err"]
        assert float(agr) == summary["top1_agreement_err"]
    teacher_summary = _read_jsonl(
        os.path.join(out, "teacher", "metrics.jsonl"))[-1]
    assert float(rows[4][2]) == teacher_summary["top1_err"]
    assert rows[4][3] == ""


def test_grid_rerun_is_bitwise_identical(tmp_path):
    outputs = []
    for name in ("a", "b"):
        doc = _synth_doc(tmp_path / name,
                         aggregation=[{"strategy": "equal"},
                                      {"strategy": "adaptive"}])
        cfg = _parse(doc)
        runner.run_experiment(cfg)
        blob = {}
        for run_id in ("equal-seed0", "adaptive-seed0"):
            for fname in ("metrics.jsonl", "weights.csv"):
                with open(os.path.join(cfg.output_dir, run_id, fname), "rb") as fh:
                    blob[f"{run_id}/{fname}"] = fh.read()
        with open(os.path.join(cfg.output_dir, "results.csv"), "rb") as fh:
            blob["results.csv"] = fh.read()
        outputs.append(blob)
    assert outputs[0] == outputs[1]


# -------------------------------------------------------------- convnet grids


def test_convnet_grid_feature_paths(tmp_path):
    doc = _idx_doc(tmp_path, tmp_path / "out",
                   aggregation=[{"strategy": "equal"},
                                {"strategy": "adaptive"},
                                {"strategy": "multiobjective"},
                                {"strategy": "fixed", "fixed_v": [0.7, 1.3]}])
    cfg = _parse(doc)
    assert runner.run_experiment(cfg) == 0
    out = cfg.output_dir

    header, rows = _read_csv(os.path.join(out, "adaptive-seed0", "weights.csv"))
    assert [r[1] for r in rows[:2]] == ["at", "st"]
    assert all(float(r[2]) > 0 for r in rows)
    assert all(r[3] != "" for r in rows)

    _, rows = _read_csv(os.path.join(out, "multiobjective-seed0", "weights.csv"))
    by_iter = {}
    for r in rows:
        by_iter.setdefault(r[0], []).append(float(r[2]))
    for vs in by_iter.values():
        assert abs(sum(vs) - 1.0) < 1e-9 and all(v >= 0 for v in vs)

    _, rows = _read_csv(os.path.join(out, "fixed-seed0", "weights.csv"))
    assert {r[2] for r in rows} == {"0.7", "1.3"}

    _, rows = _read_csv(os.path.join(out, "equal-seed0", "cosine.csv"))
    assert len(rows) == 2  # sim_every=1, two iterations, one pair
    assert all(r[1] == "at-st" for r in rows)
    assert all(-1.0 - 1e-9 <= float(r[2]) <= 1.0 + 1e-9 for r in rows)


def test_layerwise_run_expands_path_ids(tmp_path):
    doc = _idx_doc(tmp_path, tmp_path / "out",
                   aggregation={"strategy": "equal", "layerwise": True})
    cfg = _parse(doc)
    runner.run_experiment(cfg)
    _, rows = _read_csv(os.path.join(cfg.output_dir, "weights.csv"))
    assert [r[1] for r in rows[:4]] == ["at@b1", "at@b2", "at@b3", "st"]


def test_parallel_jobs_match_sequential(tmp_path):
    results = {}
    for name, jobs in (("seq", 1), ("par", 2)):
        doc = _synth_doc(tmp_path / name,
                         aggregation=[{"strategy": "equal"},
                                      {"strategy": "none", "label": "student"}])
        text = json.dumps(doc)
        cfg = config.parse_config(text)
        runner.run_experiment(cfg, jobs=jobs, document=text)
        with open(os.path.join(cfg.output_dir, "results.csv")) as fh:
            results[name] = fh.read()
    assert results["seq"] == results["par"]
