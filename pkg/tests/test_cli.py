import json

import pytest

from gridshield import cli, datagen

SMALL = ["--system", "case5", "--scale", "0.01", "--seed", "3"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["generate", *SMALL, "--data", str(d / "data"), "--csv"]) == 0
    return d


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_generate_outputs(workdir):
    data = workdir / "data"
    man = json.loads((data / "manifest.json").read_text())
    assert man["system"] == "case5" and man["seed"] == 3
    assert (data / "test.csv").exists()
    ds = datagen.read_dataset(data)
    assert len(ds.splits["test"]) == sum(man["counts"]["test"].values())


def test_config_echo_and_seed_env(capsys, monkeypatch, tmp_path):
    monkeypatch.setenv("GRIDSHIELD_SEED", "11")
    code, out, _ = run(capsys, "inspect-case", "case14")
    assert code == 0
    first = out.splitlines()[0]
    assert first.startswith("# inspect-case config: ")
    assert json.loads(first.split(": ", 1)[1])["seed"] == 11
    info = json.loads(out.split("\n", 1)[1])
    assert info["buses"] == 14 and info["branches"] == 20 and info["zero_injection_buses"] == [7]
    assert info["off_nominal_taps"] == 3


def test_inspect_case_file(capsys, workdir):
    code, out, _ = run(capsys, "inspect-case", str(workdir / "data" / "case.m"))
    assert code == 0 and json.loads(out.split("\n", 1)[1])["buses"] == 5


def test_usage_errors(capsys, tmp_path):
    code, _, err = run(capsys, "generate", "--profile", "/nope", "--data", str(tmp_path / "x"))
    assert code == 2 and "profile not found: /nope" in err
    code, _, err = run(capsys, "generate", "--scale", "2", "--data", str(tmp_path / "x"))
    assert code == 2 and "scale" in err
    code, _, err = run(capsys, "train", "--model", "gcn", "--data", str(tmp_path / "x"))
    assert code == 2
    code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path))
    assert code == 2
    code, _, err = run(capsys, "inspect-case", "no_such_case")
    assert code == 2
    code, _, err = run(capsys, "generate", "--set", "bogus=1", "--data", str(tmp_path / "x"))
    assert code == 2 and "bogus" in err
    code, _, err = run(capsys, "generate", "--set", "gen.sigma=1", *SMALL, "--data", str(tmp_path / "x"))
    assert code == 2


def test_config_file_and_overrides(tmp_path):
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps({"system": "case5", "train": {"max_epochs": 3}, "scale": 0.5}))
    args = cli.build_parser().parse_args(
        ["train", "--model", "mlp", "--config", str(cfg_path), "--set", "train.patience=2", "--seed", "9"]
    )
    cfg = cli.resolve_config(args)
    assert cfg["system"] == "case5" and cfg["train"] == {"max_epochs": 3, "patience": 2}
    assert cfg["seed"] == 9 and cfg["scale"] == 0.5


def test_oracle_checkpoint_scores_perfectly(capsys, workdir):
    ck = workdir / "oracle.ckpt"
    cli.write_oracle_checkpoint(ck)
    code, out, _ = run(capsys, "eval", "--checkpoint", str(ck), "--data", str(workdir / "data"), "--out", str(workdir / "orc"))
    assert code == 0
    rep = json.loads((workdir / "orc" / "report.json").read_text())
    assert rep["detection"]["overall"]["f1"] == 1.0 and rep["detection"]["overall"]["fa"] == 0.0
    assert rep["sw"]["pct_f1_ge_95"] == 100.0 and rep["nw"]["pct_f1_ge_95"] == 100.0


def test_train_eval_export(capsys, workdir):
    data, ck = str(workdir / "data"), str(workdir / "ck")
    code, out, _ = run(
        capsys, "train", "--model", "aceot", "--data", data, "--out", ck, "--seed", "1",
        "--set", "train.max_epochs=2", "--set", "model.d_model=8", "--set", "model.heads=2", "--threads", "1",
    )
    assert code == 0 and "epoch   2" in out
    code, out, _ = run(capsys, "eval", "--checkpoint", f"{ck}/aceot.ckpt", "--data", data, "--out", str(workdir / "rep"),
                       "--timing", "--repeats", "20")
    assert code == 0 and "ms/sample" in out
    assert json.loads((workdir / "rep" / "timing.json").read_text())["inference_ms"] > 0
    assert "inference_ms" not in json.loads((workdir / "rep" / "report.json").read_text())
    emb = workdir / "emb.csv"
    code, out, _ = run(capsys, "export", "--what", "embeddings", "--checkpoint", f"{ck}/aceot.ckpt", "--data", data,
                       "--out", str(emb))
    assert code == 0
    lines = emb.read_text().splitlines()
    assert lines[0].startswith("timestep,kind,bus,label,e_1") and len(lines[0].split(",")) == 4 + 8
    n_test = len(datagen.read_dataset(data).splits["test"])
    assert len(lines) == 1 + 5 * n_test
    code, _, _ = run(capsys, "export", "--data", data, "--out", str(workdir / "feat.csv"), "--split", "val")
    assert code == 0
    code, _, err = run(capsys, "export", "--what", "embeddings", "--data", data, "--out", str(emb))
    assert code == 2


def test_runtime_error_exit_code(capsys, workdir, tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    code, _, err = run(capsys, "eval", "--checkpoint", str(bad), "--data", str(workdir / "data"))
    assert code == 3 and "SchemaMismatch" in err
