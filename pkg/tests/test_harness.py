import csv
import json

import numpy as np
import pytest

from anchornet.errors import ConfigurationError, ValidationError
from anchornet.harness import (
    LandscapeGrid,
    RunConfig,
    check,
    evaluate_run,
    landscape,
    load_run,
    report,
    run_landscape,
    sweep_alpha,
    sweep_label_noise,
    sweep_refset,
    train_run,
    validate,
    with_master_seed,
)
from anchornet.harness.landscape import axis_offsets, random_direction, read_pgm, write_pgm
from anchornet.harness.runs import read_csv, summarize, train_artifacts
from anchornet.harness.sweeps import method_config
from anchornet.metrics import top1_accuracy
from anchornet.models import build, spec_for


def tiny(**over) -> RunConfig:
    cfg = RunConfig().replace(
        dataset={"num_classes": 4, "hw": [8, 8], "n_train": 64, "n_test": 32},
        model={"kind": "mlp", "hidden": [8]},
        training={"epochs": 2, "batch_size": 16, "milestones": [1]},
        evaluation={"corruptions": ["gaussian_noise", "contrast"], "severities": [1, 3], "n_anomaly": 32},
    )
    return cfg.replace(**over) if over else cfg


@pytest.fixture(scope="module")
def runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    out = {}
    for method in ("standard", "vanilla", "proposed"):
        d = root / method
        train_run(method_config(tiny(), method), d)
        evaluate_run(d)
        out[method] = d
    return out


def test_config_round_trip_and_strictness(tmp_path):
    cfg = tiny()
    assert RunConfig.from_json(cfg.to_json()) == cfg
    (tmp_path / "c.json").write_text(cfg.to_json())
    assert RunConfig.load(tmp_path / "c.json").digest() == cfg.digest()
    with pytest.raises(ConfigurationError, match="unknown keys"):
        RunConfig.from_dict({"training": {"epochz": 3}})
    with pytest.raises(ConfigurationError):
        cfg.replace(optimizer={"lr": 1})


def test_validation_lists_every_problem():
    bad = tiny(anchoring={"alpha": 2.0, "mode": "mix"}, evaluation={"severities": [7]})
    errs = validate(bad)
    assert len(errs) == 3
    with pytest.raises(ConfigurationError):
        check(bad)
    assert validate(tiny()) == []
    assert validate(tiny(anchoring={"enabled": False}, evaluation={"protocols": ["blt"]}))


def test_method_names():
    assert tiny().method == "proposed"
    assert method_config(tiny(), "vanilla").method == "vanilla"
    std = method_config(tiny(evaluation={"protocols": ["single", "blt"]}), "standard")
    assert std.method == "standard" and std.evaluation.protocols == ["single"]
    with pytest.raises(ValidationError):
        method_config(tiny(), "proposed", alpha=0.0)
    with pytest.raises(ValidationError):
        method_config(tiny(), "bagging")


def test_master_seed_derivation():
    a, b = with_master_seed(tiny(), 0), with_master_seed(tiny(), 1)
    assert a.seeds == with_master_seed(tiny(), 0).seeds
    sa, sb = a.seeds.__dict__, b.seeds.__dict__
    assert all(sa[k] != sb[k] for k in sa)
    assert len(set(sa.values())) == len(sa)


def test_same_config_bitwise_identical(tmp_path):
    cfg = tiny(training={"epochs": 1})
    m1 = train_run(cfg, tmp_path / "a")
    m2 = train_run(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "model.ckpt").read_bytes() == (tmp_path / "b" / "model.ckpt").read_bytes()
    assert m1 == m2


def test_masking_seed_does_not_move_batch_order():
    cfg = tiny(anchoring={"schedule": "bernoulli", "alpha": 0.5})
    a, _ = train_artifacts(cfg, track_test=False)
    b, _ = train_artifacts(cfg.replace(seeds={"masking": 99}), track_test=False)
    assert np.array_equal(a.ref_set.indices, b.ref_set.indices)
    # vanilla and proposed see the same batches until the first masked one
    v, tv = train_artifacts(method_config(tiny(training={"epochs": 1}), "vanilla"), track_test=False)
    p, tp = train_artifacts(tiny(training={"epochs": 1}, anchoring={"alpha": 0.25}), track_test=False)
    assert tv[0]["masked_batches"] == 0 and tp[0]["masked_batches"] == 1


def test_manifest_contents(runs):
    m = json.loads((runs["proposed"] / "manifest.json").read_text())
    assert m["method"] == "proposed" and m["config_digest"] == RunConfig.from_dict(m["config"]).digest()
    assert len(m["trajectory"]) == 2
    assert set(m["digests"]) == {"model.ckpt", "trajectory.csv", "refset.json", "residuals.npy"}
    assert m["dataset_provenance"][0]["kind"] == "synthetic"
    s = json.loads((runs["standard"] / "manifest.json").read_text())
    assert set(s["digests"]) == {"model.ckpt", "trajectory.csv"}


def test_eval_reproduces_manifest_accuracy(runs):
    for method, d in runs.items():
        m = json.loads((d / "manifest.json").read_text())
        rows = read_csv(d / "metrics.csv")
        idrow = [r for r in rows if r["split"] == "id"][0]
        assert float(idrow["accuracy"]) == m["final_metrics"]["test_accuracy"]


def test_metric_rows(runs):
    rows = read_csv(runs["proposed"] / "metrics.csv")
    assert sum(r["split"] == "corrupted" for r in rows) == 4
    assert {r["anomaly_set"] for r in rows if r["split"] == "anomaly"} == {"class_holdout", "uniform_noise"}
    for r in rows:
        if r["split"] != "anomaly":
            assert 0 <= float(r["accuracy"]) <= 1 and 0 <= float(r["binned_ece"]) <= 1


def test_reaggregation_oracle(runs):
    # recompute the summary with the csv module alone
    with open(runs["vanilla"] / "metrics.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    by_sev = {}
    for r in rows:
        if r["split"] == "corrupted":
            by_sev.setdefault(int(r["severity"]), []).append(float(r["accuracy"]))
    summary = json.loads((runs["vanilla"] / "metrics.json").read_text())["summary"]
    for sev, vals in by_sev.items():
        assert abs(summary[f"sev{sev}_accuracy"] - sum(vals) / len(vals)) <= 1e-12
    allv = [v for vals in by_sev.values() for v in vals]
    assert abs(summary["ood_accuracy"] - sum(allv) / len(allv)) <= 1e-12


def test_evaluate_extra_protocols(runs, tmp_path):
    rows = evaluate_run(runs["proposed"], tmp_path / "m.csv", ["single", "marginalized", "blt"])
    protos = {r["protocol"] for r in rows if r["split"] == "id"}
    assert protos == {"single", "marginalized", "blt"}
    assert (tmp_path / "metrics.json").exists()


def test_missing_anomaly_set_warns(tmp_path):
    cfg = tiny(dataset={"holdout_classes": 0}, training={"epochs": 1})
    train_run(cfg, tmp_path)
    with pytest.warns(UserWarning, match="class_holdout"):
        rows = evaluate_run(tmp_path)
    sets = {r.get("anomaly_set") for r in rows if r["split"] == "anomaly"}
    assert sets == {"uniform_noise"}
    warns = json.loads((tmp_path / "metrics.json").read_text())["warnings"]
    assert warns[0]["anomaly_set"] == "class_holdout"


def test_load_run_restores_reference_set(runs):
    art = load_run(runs["proposed"])
    assert art.method == "proposed" and art.primary_protocol == "single"
    acc = top1_accuracy(art.predict(art.test.images).probs, art.test.labels)
    m = json.loads((runs["proposed"] / "manifest.json").read_text())
    assert acc == m["final_metrics"]["test_accuracy"]


def test_report_self_delta_is_zero(runs, tmp_path):
    res = report([runs["standard"], runs["standard"]], tmp_path, comparisons=(("standard", "standard"),))
    present = {c: st for c, st in res["deltas"]["standard-standard"].items() if st["n"]}
    assert {"ID", "Sev.1", "Sev.3", "OOD", "sECE"} <= set(present)
    for st in present.values():
        assert st["mean"] == 0.0 and st["std"] == 0.0
    assert (tmp_path / "report.json").exists() and (tmp_path / "deltas.csv").exists()


def test_report_groups_and_deltas(runs, tmp_path):
    res = report(list(runs.values()), tmp_path)
    assert set(res["methods"]) == {"standard", "vanilla", "proposed"}
    d = res["deltas"]["proposed-standard"]["ID"]
    p = res["methods"]["proposed"]["ID"]["mean"]
    s = res["methods"]["standard"]["ID"]["mean"]
    assert abs(d["mean"] - (p - s)) <= 1e-12 and d["n"] == 1


def test_report_rejects_mixed_datasets(runs, tmp_path):
    other = tmp_path / "other"
    train_run(tiny(dataset={"n_test": 16}, training={"epochs": 1}), other)
    evaluate_run(other)
    with pytest.raises(ValidationError):
        report([runs["proposed"], other])


def test_landscape_centre_and_zero_radius():
    model = build(spec_for(3, (4, 4), 3, kind="mlp", hidden=(4,), init_seed=1))
    rng = np.random.default_rng(0)
    x, y = rng.random((20, 3, 4, 4)), rng.integers(0, 3, 20)

    def acc(m):
        from anchornet.models import predict_logits
        return float(np.mean(predict_logits(m, x).argmax(1) == y))

    before = {k: p.data.copy() for k, p in model.parameters.items()}
    grid = landscape(model, acc, n=5, radius=0.5, seeds=(1, 2))
    assert grid.center == acc(model)
    assert all(np.array_equal(before[k], p.data) for k, p in model.parameters.items())
    flat = landscape(model, acc, n=3, radius=0.0)
    assert np.all(flat.accuracy == acc(model))
    assert flat.plateau_fraction() == 1.0
    with pytest.raises(ValidationError):
        landscape(model, acc, n=4)


def test_axis_offsets():
    off = axis_offsets(5, 2.0)
    assert off.tolist() == [-2.0, -1.0, 0.0, 1.0, 2.0]
    assert axis_offsets(21, 1.0)[10] == 0.0


def test_filter_norm_directions(rng):
    model = build(spec_for(3, (8, 8), 4, hidden=((4, 3, 1),), init_seed=0))
    state = model.state_dict()
    d = random_direction(state, 3, "filter_norm")
    w, dw = state["conv0.weight"], d["conv0.weight"]
    for f in range(w.shape[0]):
        assert abs(np.linalg.norm(dw[f]) - np.linalg.norm(w[f])) <= 1e-12
    assert not d["conv0.bias"].any()
    g = random_direction(state, 3, "global_norm")
    total = np.sqrt(sum(np.sum(v ** 2) for v in state.values()))
    assert abs(np.sqrt(sum(np.sum(v ** 2) for v in g.values())) - total) <= 1e-9


def test_pgm_round_trip(tmp_path):
    vals = np.array([[0.0, 0.5], [1.0, 0.25]])
    write_pgm(tmp_path / "g.pgm", vals)
    assert (tmp_path / "g.pgm").read_bytes().startswith(b"P5")
    back = read_pgm(tmp_path / "g.pgm")
    assert back.tolist() == [[0, 128], [255, 64]]


def test_run_landscape_outputs(runs, tmp_path):
    art = load_run(runs["proposed"])
    grid = run_landscape(art, n=3, radius=0.2, seeds=(0, 1), n_eval=16, out_dir=tmp_path)
    assert isinstance(grid, LandscapeGrid) and grid.accuracy.shape == (3, 3)
    rows = read_csv(tmp_path / "landscape.csv")
    assert len(rows) == 9
    assert grid.center == top1_accuracy(art.predict(art.test.images[:16]).probs, art.test.labels[:16])


def test_sweeps_reuse_runs(tmp_path):
    cfg = tiny(training={"epochs": 1})
    rows = sweep_refset(cfg, sizes=(5, None), root=tmp_path)
    assert [(r["size"], r["method"]) for r in rows] == [(5, "proposed"), (5, "vanilla"), ("all", "proposed"), ("all", "vanilla")]
    n_dirs = len(list(tmp_path.glob("*-*")))
    alpha_rows = sweep_alpha(cfg, alphas=(0.0, 0.25), root=tmp_path, modes=("augment",))
    # vanilla refset=all is the alpha=0 augment run, the proposed refset=all is alpha 0.25
    assert len(list(tmp_path.glob("*-*"))) == n_dirs
    assert [r["alpha"] for r in alpha_rows] == [0.0, 0.25]
    assert (tmp_path / "sweep_refset.csv").exists() and (tmp_path / "sweep_alpha.csv").exists()
    with pytest.raises(ValidationError):
        sweep_refset(cfg, sizes=(0,), root=tmp_path)
    with pytest.raises(ValidationError):
        sweep_alpha(cfg, alphas=(1.5,), root=tmp_path)
    noise = sweep_label_noise(cfg, fractions=(0.1,), root=tmp_path, methods=("standard",))
    assert noise[0]["method"] == "standard" and (tmp_path / "sweep_noise.csv").exists()


def test_summarize_protocol_filter():
    rows = [{"protocol": "single", "split": "id", "accuracy": "0.5"},
            {"protocol": "blt", "split": "id", "accuracy": "0.25"}]
    assert summarize(rows, "blt") == {"id_accuracy": 0.25}
