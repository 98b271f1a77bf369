import json

import pytest

from remote_fusion import tensor
from remote_fusion.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_OK, main, relations_path
from remote_fusion.gradcheck import tiny_config


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(steps=4, dropout=0.0, lr=1e-3)
    (root / "c.json").write_text(cfg.to_json())
    assert main(["generate", "--config", str(root / "c.json"), "--out", str(root / "d.jsonl"), "--n", "12", "--seed", "1"]) == EXIT_OK
    assert main(["train", "--config", str(root / "c.json"), "--data", str(root / "d.jsonl"), "--out", str(root / "ck")]) == EXIT_OK
    return root


def test_generate_writes_relation_vocab(workspace):
    vocab = json.loads(relations_path(workspace / "d.jsonl").read_text())
    assert "none" in json.dumps(vocab)
    assert len((workspace / "d.jsonl").read_text().splitlines()) == 12


def test_train_outputs(workspace):
    ck = workspace / "ck"
    assert (ck / "final").exists() and (ck / "config.json").exists()
    header = (ck / "metrics.csv").read_text().splitlines()[0]
    assert header == "step,epoch,loss,accuracy,precision,recall,f1"


def test_eval_dumps(workspace, capsys):
    w, plans, preds = workspace / "w.csv", workspace / "plans", workspace / "p.jsonl"
    code = main([
        "eval", "--ckpt", str(workspace / "ck" / "final"), "--data", str(workspace / "d.jsonl"),
        "--dump-expert-weights", str(w), "--dump-plans", str(plans), "--predictions", str(preds),
    ])
    assert code == EXIT_OK
    metrics = json.loads(capsys.readouterr().out)
    assert 0.0 <= metrics["accuracy"] <= 1.0
    header = w.read_text().splitlines()[0].split(",")
    assert header[:3] == ["sample_id", "relation_gold", "relation_pred"] and len(header) == 3 + 6
    assert any(p.suffix == ".csv" for p in plans.iterdir())
    row = json.loads(preds.read_text().splitlines()[0])
    assert set(row) == {"sample_id", "head_ref", "tail_ref", "gold", "pred", "logits"}


@pytest.mark.parametrize("flag", [["--disable-mot"], ["--disable-mmoe"], ["--mot-variant", "optimal_transport"]])
def test_eval_ablation_flags(workspace, flag, capsys):
    code = main(["eval", "--ckpt", str(workspace / "ck" / "final"), "--data", str(workspace / "d.jsonl"), *flag])
    assert code == EXIT_OK
    assert "accuracy" in json.loads(capsys.readouterr().out)


def test_eval_other_variant_needs_its_own_checkpoint(workspace):
    code = main([
        "eval", "--ckpt", str(workspace / "ck" / "final"), "--data", str(workspace / "d.jsonl"),
        "--mot-variant", "cross_attention",
    ])
    assert code == EXIT_CONFIG


def test_inspect_plan(workspace, capsys):
    sid = json.loads((workspace / "d.jsonl").read_text().splitlines()[0])["sample_id"]
    out = workspace / "insp"
    code = main([
        "inspect-plan", "--ckpt", str(workspace / "ck" / "final"), "--data", str(workspace / "d.jsonl"),
        "--sample-id", sid, "--out", str(out), "--modality", "text",
    ])
    assert code == EXIT_OK
    printed = capsys.readouterr().out.split()
    assert printed and all("_text_" in p for p in printed)
    assert main([
        "inspect-plan", "--ckpt", str(workspace / "ck" / "final"), "--data", str(workspace / "d.jsonl"),
        "--sample-id", "nope",
    ]) == EXIT_DATA
    assert main([
        "inspect-plan", "--ckpt", str(workspace / "ck" / "final"), "--data", str(workspace / "d.jsonl"),
        "--sample-id", sid, "--disable-mot",
    ]) == EXIT_CONFIG


def test_grad_check_pass_and_fail(capsys, monkeypatch):
    assert main(["grad-check"]) == EXIT_OK
    assert capsys.readouterr().out.splitlines()[-1] == "PASS"
    original = tensor._sigmoid_grad
    monkeypatch.setattr(tensor, "_sigmoid_grad", lambda out, g: 0.5 * original(out, g))
    assert main(["grad-check"]) == EXIT_NUMERIC
    assert capsys.readouterr().out.splitlines()[-1] == "FAIL: fusion"


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"d": -1}')
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "x.jsonl")]) == EXIT_CONFIG
    bad.write_text('{"unknown_key": 1}')
    assert main(["grad-check", "--config", str(bad)]) == EXIT_CONFIG


def test_data_errors_exit_3(tmp_path, workspace):
    assert main(["train", "--data", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    broken = tmp_path / "broken.jsonl"
    broken.write_text("{not json\n")
    assert main(["eval", "--ckpt", str(workspace / "ck" / "final"), "--data", str(broken)]) == EXIT_DATA
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"garbage")
    assert main(["eval", "--ckpt", str(junk), "--data", str(workspace / "d.jsonl")]) == EXIT_DATA
