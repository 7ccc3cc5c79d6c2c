import json

import numpy as np
import pytest

from ccil import data, harness
from ccil import model as mdl
from ccil.evaluation import accuracy_from_logits, evaluate, predict_features

SYNTH = {"n_classes": 3, "n_domains": 3, "n_channels": 2, "window_len": 24, "samples_per_class_per_domain": 8}
MODEL = {"kernel_len": 3, "channels_block1": 4, "channels_block2": 6}
TRAIN = {"max_epochs": 2, "batch_size": 8}


def experiment(tmp_path, **kw):
    base = dict(output_dir=str(tmp_path), synth=SYNTH, model=MODEL, train=TRAIN, trials=1, folds=[0])
    base.update(kw)
    return harness.ExperimentConfig(**base)


# ---------------------------------------------------------------- evaluation


def test_accuracy_examples():
    assert accuracy_from_logits(np.eye(3), np.array([0, 1, 2])) == 100.0
    # constant logits predict class 0 everywhere
    assert accuracy_from_logits(np.zeros((4, 3)), np.array([0, 1, 2, 0])) == 50.0
    with pytest.raises(ValueError):
        accuracy_from_logits(np.zeros((0, 3)), np.array([], dtype=int))


def _tiny():
    ds = data.synth_domain_shift(SYNTH)
    cfg = mdl.ModelConfig(in_channels=2, window_len=24, num_classes=3, **MODEL)
    return ds, mdl.build_model(cfg, 0)


def test_evaluate_with_oracle_classifier():
    ds, params = _tiny()
    idx = np.arange(len(ds))
    z, _ = predict_features(params, ds, idx)
    # a classifier that scores each sample's own class highest is always right
    onehot = np.eye(3)[ds.class_labels]
    lstsq, *_ = np.linalg.lstsq(z, onehot, rcond=None)
    params.params["classifier.W"] = lstsq
    acc = evaluate(params, ds, idx)
    assert acc == accuracy_from_logits(z @ lstsq, ds.class_labels)
    params.params["classifier.W"] = np.zeros_like(lstsq)
    assert evaluate(params, ds, idx) == pytest.approx(100.0 * np.mean(ds.class_labels == 0))


def test_evaluate_is_label_permutation_equivariant():
    ds, params = _tiny()
    idx = np.arange(len(ds))
    acc = evaluate(params, ds, idx)
    perm = np.array([2, 0, 1])
    permuted = data.WindowedDataset(ds.samples, perm[ds.class_labels], ds.domain_labels, ds.meta)
    p2 = params.copy()
    W = np.empty_like(params.W)
    W[:, perm] = params.W
    p2.params["classifier.W"] = W
    assert evaluate(p2, permuted, idx) == acc


def test_evaluate_chunking_is_invisible(monkeypatch):
    ds, params = _tiny()
    idx = np.arange(len(ds))
    z_ref, _ = predict_features(params, ds, idx)
    monkeypatch.setattr("ccil.evaluation.EVAL_CHUNK", 7)
    z, _ = predict_features(params, ds, idx)
    np.testing.assert_allclose(z, z_ref, rtol=0, atol=1e-12)


def test_evaluate_empty():
    ds, params = _tiny()
    with pytest.raises(ValueError):
        evaluate(params, ds, [])


# ---------------------------------------------------------------- experiments


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        harness.ExperimentConfig(output_dir=str(tmp_path))
    with pytest.raises(ValueError):
        experiment(tmp_path, methods=["bogus"])
    with pytest.raises(ValueError):
        experiment(tmp_path, train={"lam": 2.0})


def test_run_experiment_rows_and_files(tmp_path):
    table = harness.run_experiment(experiment(tmp_path, folds=[0, 2], trials=2))
    assert len(table.rows) == 4
    assert {(r["fold"], r["trial"]) for r in table.rows} == {(0, 0), (0, 1), (2, 0), (2, 1)}
    assert all(r["status"] == "ok" and r["method"] == "CCIL" for r in table.rows)
    assert [r["seed"] for r in table.rows] == [0, 1, 0, 1]
    for name in ("config.json", "results.csv", "summary.csv", "results.json"):
        assert (tmp_path / name).exists()
    row = table.rows[0]
    assert (tmp_path / row["checkpoint"]).exists()
    log = (tmp_path / "CCIL" / "fold0" / "trial0" / "log.jsonl").read_text().splitlines()
    assert len(log) == 2
    back = harness.ResultTable.read_csv(tmp_path / "results.csv")
    assert [r["target_acc"] for r in back.rows] == [float(f"{r['target_acc']:.6f}") for r in table.rows]
    assert json.loads((tmp_path / "config.json").read_text())["train"]["max_epochs"] == 2


def test_best_checkpoint_reproduces_target_accuracy(tmp_path):
    table = harness.run_experiment(experiment(tmp_path))
    row = table.rows[0]
    params, header = mdl.load_checkpoint(tmp_path / row["checkpoint"])
    ds = data.synth_domain_shift(SYNTH)
    assert header["epoch"] == row["best_epoch"]
    plan = params.extra["split"]
    sp = data.make_split(ds, plan["protocol"], plan["fold"], seed=plan["seed"])
    assert evaluate(params, ds, sp.target) == row["target_acc"]


def test_rerun_is_byte_identical(tmp_path):
    cfg = experiment(tmp_path / "a", methods=["ERM", "CCIL"])
    harness.run_experiment(cfg)
    harness.run_experiment(cfg.replace(output_dir=str(tmp_path / "b")))
    for f in ("results.csv", "summary.csv", "CCIL/fold0/trial0/best.ckpt", "ERM/fold0/trial0/final.ckpt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_parallel_workers_match_serial(tmp_path):
    cfg = experiment(tmp_path / "s", folds=[0, 1])
    harness.run_experiment(cfg, workers=1)
    harness.run_experiment(cfg.replace(output_dir=str(tmp_path / "p")), workers=2)
    assert (tmp_path / "s" / "results.csv").read_bytes() == (tmp_path / "p" / "results.csv").read_bytes()


def test_ablation_methods(tmp_path):
    table = harness.ablate(experiment(tmp_path))
    assert table.methods() == ["ERM", "W/fea", "W/log", "CCIL"]
    summary = table.summary_csv().splitlines()
    assert summary[0] == "method,0,AVG" and len(summary) == 5


def test_failed_job_is_recorded(tmp_path, monkeypatch):
    from ccil.train import TrainingDiverged

    def explode(*args, **kwargs):
        raise TrainingDiverged("epoch 1, step 0: loss is not finite")

    monkeypatch.setattr(harness, "train_loop", explode)
    table = harness.run_experiment(experiment(tmp_path))
    row = table.rows[0]
    assert row["status"].startswith("failed") and row["target_acc"] is None
    assert "failed" in (tmp_path / "results.csv").read_text()


def test_model_mismatch_rejected(tmp_path):
    with pytest.raises(ValueError):
        harness.run_experiment(experiment(tmp_path, model="dsads"))


def test_result_table_aggregates():
    rows = [
        {"method": "A", "fold": 0, "trial": 0, "target_acc": 50.0},
        {"method": "A", "fold": 0, "trial": 1, "target_acc": 70.0},
        {"method": "A", "fold": 1, "trial": 0, "target_acc": 90.0},
        {"method": "A", "fold": 1, "trial": 1, "target_acc": None},
    ]
    t = harness.ResultTable(rows, "cross_person")
    assert t.fold_means("A") == {0: 60.0, 1: 90.0}
    assert t.average("A") == 75.0
    assert t.trial_means("A") == {0: 70.0, 1: 70.0}


# ---------------------------------------------------------------- sweeps


def test_single_cell_sweep_equals_run_experiment(tmp_path):
    cfg = experiment(tmp_path / "sweep")
    grid = harness.sweep(cfg, alphas=[0.5], lambdas=[0.99])
    direct = harness.run_experiment(experiment(tmp_path / "direct", train={**TRAIN, "alpha": 0.5, "lam": 0.99}))
    assert grid.shape == (1, 1) and grid[0, 0] == direct.average("CCIL")
    lines = (tmp_path / "sweep" / "sweep.csv").read_text().splitlines()
    assert lines == ["lambda\\alpha,0.5", f"0.99,{direct.average('CCIL'):.4f}"]


def test_default_sweep_grid_shape(tmp_path, monkeypatch):
    calls = []

    def fake_run(cfg, workers=None):
        calls.append((cfg.train["alpha"], cfg.train["lam"]))
        return harness.ResultTable([{"method": "CCIL", "fold": 0, "trial": 0, "target_acc": cfg.train["alpha"]}], "x")

    monkeypatch.setattr(harness, "run_experiment", fake_run)
    grid = harness.sweep(experiment(tmp_path))
    assert grid.shape == (5, 5) and len(calls) == 25
    np.testing.assert_array_equal(grid[2], harness.SWEEP_ALPHAS)
    assert sorted(set(c[1] for c in calls)) == sorted(harness.SWEEP_LAMBDAS)


# ---------------------------------------------------------------- feature export


def test_export_features_round_trip(tmp_path):
    ds, params = _tiny()
    idx = np.array([5, 0, 17, 3])
    n = harness.export_features(params, ds, idx, tmp_path / "f.csv")
    assert n == 4
    header = (tmp_path / "f.csv").read_text().splitlines()[0].split(",")
    assert header[:3] == ["sample_id", "domain", "class"] and len(header) == 3 + params.config.feature_dim
    ids, doms, cls, z = harness.read_features(tmp_path / "f.csv")
    np.testing.assert_array_equal(ids, idx)
    np.testing.assert_array_equal(cls, ds.class_labels[idx])
    np.testing.assert_array_equal(doms, ds.domain_labels[idx])
    z_ref, _ = mdl.forward(params, ds.samples[idx].astype(np.float64), "eval")[:2]
    assert np.max(np.abs(z - z_ref)) <= 1e-12


def test_export_rejects_wrong_shape(tmp_path):
    _, params = _tiny()
    other = data.synth_domain_shift({**SYNTH, "n_channels": 3})
    with pytest.raises(ValueError):
        harness.export_features(params, other, [0], tmp_path / "f.csv")


def test_separation_ratio():
    rng = np.random.default_rng(0)
    classes = np.repeat([0, 1], 50)
    tight = np.where(classes[:, None] == 0, -5.0, 5.0) + rng.normal(size=(100, 2))
    loose = rng.normal(size=(100, 2))
    assert harness.separation_ratio(tight, classes) > 10 * harness.separation_ratio(loose, classes)
