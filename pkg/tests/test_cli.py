import json

import pytest

from rri_seqnet.cli import main
from rri_seqnet.config import load_run_config, parse_kv_file, resolve


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    assert main(["synth", "--nsr", "5", "--af", "5", "--seed", "7", "--out", str(root / "data")]) == 0
    assert main(["prepare", "--data", str(root / "data"), "--out", str(root / "prep"), "--seeds", "0,1"]) == 0
    return root


def test_synth_writes_files_and_manifest(corpus):
    files = sorted(p.name for p in (corpus / "data").glob("*.csv"))
    assert len(files) == 10 and files[0] == "af000.csv"
    manifest = json.loads((corpus / "data" / "manifest.json").read_text())
    assert manifest["seed"] == 7 and len(manifest["subjects"]) == 10


def test_synth_is_byte_reproducible(corpus, tmp_path):
    assert main(["synth", "--nsr", "5", "--af", "5", "--seed", "7", "--out", str(tmp_path)]) == 0
    for p in (corpus / "data").iterdir():
        assert (tmp_path / p.name).read_bytes() == p.read_bytes()


def test_synth_nsr_only(tmp_path):
    assert main(["synth", "--nsr", "2", "--af", "0", "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.glob("*.csv")) == ["nsr000.csv", "nsr001.csv"]


def test_synth_refuses_nonempty_dir_without_force(corpus, capsys, tmp_path):
    (tmp_path / "keep.txt").write_text("x")
    assert main(["synth", "--nsr", "1", "--af", "0", "--out", str(tmp_path)]) == 1
    assert _err(capsys)["error"] == "CliError"
    assert main(["synth", "--nsr", "1", "--af", "0", "--out", str(tmp_path), "--force"]) == 0


def test_prepare_outputs(corpus):
    prep = corpus / "prep"
    index = json.loads((prep / "segments.json").read_text())
    labels = [s["label"] for s in index["segments"]]
    assert labels.count("AF") == 20 and labels.count("NSR") == 55
    assert sorted(p.name for p in (prep / "splits").iterdir()) == ["seed0.json", "seed1.json"]
    assert json.loads((prep / "exclusions.json").read_text()) == []
    assert "seeds=0,1" in (prep / "resolved_config.txt").read_text()


def test_prepare_lists_bad_records_and_continues(corpus, tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    for p in (corpus / "data").glob("*.csv"):
        (data / p.name).write_bytes(p.read_bytes())
    (data / "broken.csv").write_text("subject_id,label,beat_time_s\nz,NSR,1.0\nz,NSR,0.5\n")
    assert main(["prepare", "--data", str(data), "--out", str(tmp_path / "prep"), "--seeds", "0"]) == 0
    excl = json.loads((tmp_path / "prep" / "exclusions.json").read_text())
    assert [e["file"] for e in excl] == ["broken.csv"] and ":3:" in excl[0]["reason"]


@pytest.fixture(scope="module")
def trained(corpus):
    runs = corpus / "runs"
    cfg = corpus / "run.cfg"
    cfg.write_text("preset=reduced\noptim.max_epochs=2\noptim.lr=1e-3\n")
    assert main(["train", "--config", str(cfg), "--prep", str(corpus / "prep"), "--out", str(runs),
                 "--seeds", "0,1"]) == 0
    return runs, cfg


def test_train_writes_checkpoint_and_history(trained):
    runs, _ = trained
    for s in (0, 1):
        hist = json.loads((runs / f"seed{s}" / "history.json").read_text())
        assert len(hist["val_loss"]) == 2
        assert (runs / f"seed{s}" / "model.ckpt").read_bytes().startswith(b"rri-seqnet/ckpt/1\n")
        assert len((runs / f"seed{s}" / "train_log.jsonl").read_text().splitlines()) == 2
    assert "optim.max_epochs=2" in (runs / "resolved_config.txt").read_text()


def test_eval_writes_reports_and_mean(corpus, trained, tmp_path):
    runs, cfg = trained
    assert main(["eval", "--config", str(cfg), "--seeds", "0,1", "--prep", str(corpus / "prep"), "--runs", str(runs),
                 "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "metrics_seed0.json").read_text())
    assert {"sens", "spec", "f1_weighted", "auroc", "auprc"} <= set(rep)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["n_splits"] == 2 and set(summary["mean"]) == {"sens", "spec", "f1_weighted", "auroc", "auprc"}


def test_eval_rejects_config_mismatch(corpus, trained, tmp_path, capsys):
    runs, _ = trained
    assert main(["eval", "--preset", "full", "--seeds", "0", "--prep", str(corpus / "prep"), "--runs", str(runs),
                 "--out", str(tmp_path)]) == 1
    err = _err(capsys)
    assert err["command"] == "eval" and "does not match" in err["message"]


def test_predict_outputs_probability(corpus, trained, capsys):
    runs, _ = trained
    assert main(["predict", "--checkpoint", str(runs / "seed0" / "model.ckpt"),
                 "--csv", str(corpus / "data" / "af001.csv")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert 0.0 <= out["af_probability"] <= 1.0 and len(out["windows"]) == 4


def test_predict_bad_checkpoint(tmp_path, capsys):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"garbage")
    csv = tmp_path / "r.csv"
    csv.write_text("subject_id,label,beat_time_s\na,NSR,0\n")
    assert main(["predict", "--checkpoint", str(bad), "--csv", str(csv)]) == 1
    assert "rri-seqnet/ckpt/1" in _err(capsys)["message"]


def test_complexity_command(capsys, tmp_path):
    assert main(["complexity", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "73.5K" in text and "55.4K" in text
    assert main(["complexity", "--json", "--preset", "reduced"]) == 0
    assert json.loads(capsys.readouterr().out)["total"]["params"] > 0


def test_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\npreset=reduced\nmodel.ssm.d_state=6\noptim.lr=0.01\nmodel.head_final_relu=false\n"
                 "seeds=3,4\n")
    rc = load_run_config(p, {"optim.patience": "4"})
    assert rc.model.tcn_channels == 8 and rc.model.ssm.d_state == 6 and rc.model.ssm.d_model == 8
    assert rc.optim.lr == 0.01 and rc.optim.patience == 4 and rc.seeds == (3, 4)
    assert rc.model.head_final_relu is False
    again = tmp_path / "again.cfg"
    again.write_text(rc.to_kv())
    assert load_run_config(again) == rc
    assert parse_kv_file(p)["preset"] == "reduced"


@pytest.mark.parametrize("kv", [{"model.nope": "1"}, {"preset": "tiny"}, {"optim.lr": "-1"}, {"bogus": "1"}])
def test_config_errors(kv):
    with pytest.raises(ValueError):
        resolve(kv)


def test_invalid_config_value_gives_error_json(tmp_path, capsys):
    assert main(["complexity", "--set", "model.tcn_channels=7"]) == 1
    assert "head_dims" in _err(capsys)["message"]


def test_precision_flag():
    from rri_seqnet.cli import _resolve, build_parser
    args = build_parser().parse_args(["complexity", "--precision", "f32"])
    assert _resolve(args).model.dtype == "float32"
