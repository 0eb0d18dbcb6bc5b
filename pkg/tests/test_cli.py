import csv
import json

import pytest

from cft.cli import build_parser, main
from cft.config import RunConfig, TrainConfig

TINY = RunConfig(train=TrainConfig(epochs=1, batch_size=4, n_train=4, n_eval=2))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(TINY.to_json())
    common = ["--config", str(cfg), "--seed", "0"]
    assert main(["gen-data", *common, "--out-dir", str(root / "data")]) == 0
    assert main(["train", *common, "--out-dir", str(root / "cft"), "--data-dir", str(root / "data")]) == 0
    assert main(["train", *common, "--kind", "baseline", "--out-dir", str(root / "base"),
                 "--data-dir", str(root / "data")]) == 0
    return root, common


def rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_every_subcommand_is_wired():
    names = set(build_parser()._subparsers._group_actions[0].choices)
    assert names == {"gen-data", "train", "eval", "cost", "exp-embedding", "exp-windows", "exp-noise",
                     "dump-attn", "dump-embeddings"}


def test_gen_data_and_train_outputs(workspace):
    root, _ = workspace
    assert (root / "data" / "train.bin").exists() and (root / "data" / "eval.bin.json").exists()
    assert RunConfig.load(root / "cft" / "config.json") == TINY
    assert len(rows(root / "cft" / "loss.csv")) == 1
    assert "curve" in json.loads((root / "cft" / "train.json").read_text())


@pytest.mark.parametrize("model", ["cft", "base"])
def test_eval(workspace, model):
    root, common = workspace
    out = root / f"eval_{model}"
    main(["eval", "--checkpoint", str(root / model / "model.json"), "--data-dir", str(root / "data"),
          "--sigma-rot", "2", "--out-dir", str(out)])
    metrics = json.loads((out / "metrics.json").read_text())
    assert 0.0 <= metrics["NDS"] <= 1.0
    assert float(rows(out / "metrics.csv")[0]["NDS"]) == pytest.approx(metrics["NDS"])
    assert len(json.loads((out / "detections.json").read_text())) == 2


def test_cost(workspace):
    root, common = workspace
    main(["cost", *common, "--out-dir", str(root / "cost")])
    table = {r["kind"]: r for r in rows(root / "cost" / "cost_coefficients.csv")}
    assert int(table["polar_a"]["coefficient"]) == 4374
    measured = json.loads((root / "cost" / "cost_measured.json").read_text())
    assert all(m["measured_muladds"] == m["analytic_muladds"] for m in measured)


def test_dumps(workspace):
    root, common = workspace
    ckpt = str(root / "cft" / "model.json")
    main(["dump-attn", "--checkpoint", ckpt, "--cell", "3", "4", "--out-dir", str(root / "attn")])
    doc = json.loads((root / "attn" / "attention.json").read_text())
    assert list(doc["cells"]) == ["3,4"]
    mass = sum(float(r["mass"]) for r in rows(root / "attn" / "attention_mass.csv"))
    assert mass == pytest.approx(1.0, abs=1e-5)
    main(["dump-embeddings", "--checkpoint", ckpt, "--out-dir", str(root / "emb")])
    emb = json.loads((root / "emb" / "embeddings.json").read_text())
    assert {"Q_p", "z_ref"} <= set(emb)
    assert len(rows(root / "emb" / "z_ref.csv")) == 256
    with pytest.raises(SystemExit):
        main(["dump-attn", "--checkpoint", str(root / "base" / "model.json"), "--out-dir", str(root / "x")])


@pytest.mark.parametrize("command", ["exp-embedding", "exp-windows", "exp-noise"])
def test_experiments_write_results_and_config(workspace, command):
    root, common = workspace
    out = root / command
    extra = ["--levels", "0", "4"] if command == "exp-noise" else []
    main([command, *common, "--seeds", "0", "--out-dir", str(out), *extra])
    produced = {p.suffix for p in out.iterdir()}
    assert {".csv", ".json"} <= produced
    assert RunConfig.load(out / "config.json").train == TINY.train
