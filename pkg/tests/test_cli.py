import json

import numpy as np
import pytest

from anchornet.cli import build_parser, main
from anchornet.harness import RunConfig

TINY = {
    "dataset": {"num_classes": 3, "hw": [8, 8], "n_train": 48, "n_test": 24},
    "model": {"kind": "mlp", "hidden": [6]},
    "training": {"epochs": 1, "batch_size": 16},
    "evaluation": {"corruptions": ["brightness"], "severities": [2], "n_anomaly": 16},
}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    assert main(["--config", str(cfg), "--out", str(root / "run"), "--seed", "3", "train"]) == 0
    return cfg, root


def test_global_flags_on_either_side():
    p = build_parser()
    a = p.parse_args(["--seed", "4", "train"])
    b = p.parse_args(["train", "--seed", "4", "--threads", "2"])
    assert a.seed == b.seed == 4 and a.threads == 1 and b.threads == 2


def test_train_writes_manifest(trained):
    _, root = trained
    m = json.loads((root / "run" / "manifest.json").read_text())
    assert m["method"] == "proposed"
    assert RunConfig.from_dict(m["config"]).seeds.init != 0


def test_eval_and_infer(trained, capsys):
    _, root = trained
    run = root / "run"
    assert main(["eval", str(run)]) == 0
    assert (run / "metrics.csv").exists()
    np.save(root / "x.npy", np.random.default_rng(0).random((4, 3, 8, 8)))
    capsys.readouterr()
    assert main(["infer", str(run), str(root / "x.npy"), "--protocol", "marginalized"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    recs = [json.loads(line) for line in lines]
    assert len(recs) == 4 and "epistemic_std" in recs[0]
    assert abs(sum(recs[0]["probs"]) - 1) < 1e-9
    assert main(["--out", str(root / "pred"), "infer", str(run), str(root / "x.npy"), "--protocol", "blt"]) == 0
    first = json.loads((root / "pred" / "predictions.jsonl").read_text().splitlines()[0])
    assert "chosen_ref" in first


def test_landscape_and_report(trained, capsys):
    _, root = trained
    run = root / "run"
    main(["eval", str(run)])
    capsys.readouterr()
    assert main(["landscape", str(run), "--n", "3", "--radius", "0.1", "--n-eval", "8"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert 0 <= out["plateau_fraction"] <= 1
    assert (run / "landscape.pgm").exists()
    assert main(["--out", str(root / "rep"), "report", str(run)]) == 0
    assert (root / "rep" / "report.json").exists()


def test_sweep_subcommand(trained, capsys):
    cfg, root = trained
    capsys.readouterr()
    rc = main(["--config", str(cfg), "--out", str(root / "sw"), "sweep-noise", "--fractions", "0.1"])
    assert rc == 0
    rows = [json.loads(x) for x in capsys.readouterr().out.strip().splitlines()]
    assert {r["method"] for r in rows} == {"standard", "vanilla", "proposed"}


def test_bad_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"anchoring": {"alpha": 3}}))
    assert main(["--config", str(bad), "train"]) == 2
    assert "alpha" in capsys.readouterr().err
    assert main(["eval", str(tmp_path / "missing")]) == 2
