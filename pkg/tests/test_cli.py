"""End-to-end CLI: exit codes, artifacts, determinism."""

import json

import pytest

from streamjam.cli import main

CONFIG = """\
[data]
n_songs = 6
frames = 240
min_stems = 2
max_stems = 3
n_q = 2

[model]
d_model = 16
n_layers = 1
n_heads = 2
n_kv_heads = 2
d_dac = 8
ffn_mult = 2

[train]
total_steps = 6
warmup_steps = 2
batch_size = 2
window_frames = 48
eval_every = 0
grid_t_f_seconds = [-0.04, 0.0]
grid_k_seconds = [0.02]

[eval]
n_examples = 3
window_frames = 48
batch_size = 2
floors_n = 8
variants = ["paired"]
prompt_seconds = [0.4]

[sched]
chunks = 50
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Config file, corpus, and a trained grid shared by the command tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.toml"
    cfg.write_text(CONFIG)
    corpus = root / "corpus"
    assert main(["gen-data", "--config", str(cfg), "--out", str(corpus)]) == 0
    runs = root / "runs"
    assert main(["train-grid", "--config", str(cfg), "--corpus", str(corpus),
                 "--out", str(runs)]) == 0
    return {"root": root, "config": cfg, "corpus": corpus, "runs": runs}


def test_gen_data_artifacts_and_force(workspace, tmp_path):
    corpus = workspace["corpus"]
    assert (corpus / "manifest.json").is_file()
    assert (corpus / "config.toml").is_file()
    args = ["gen-data", "--config", str(workspace["config"]), "--out", str(corpus)]
    assert main(args) == 1  # non-empty without --force
    other = tmp_path / "again"
    assert main(["gen-data", "--config", str(workspace["config"]), "--out", str(other)]) == 0
    assert (other / "manifest.json").read_bytes() == (corpus / "manifest.json").read_bytes()


def test_gen_data_env_override(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("STREAMJAM_DATA__N_SONGS", "4")
    out = tmp_path / "small"
    assert main(["gen-data", "--config", str(workspace["config"]), "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["n_songs"] == 4
    assert "n_songs = 4" in (out / "config.toml").read_text()


def test_train_single_cell(workspace, tmp_path):
    out = tmp_path / "run"
    code = main(["train", "--config", str(workspace["config"]),
                 "--corpus", str(workspace["corpus"]), "--out", str(out),
                 "--t-f", "-0.04", "--k", "0.02"])
    assert code == 0
    for name in ("model.ckpt", "loss.csv", "config.toml"):
        assert (out / name).is_file()


def test_off_grid_seconds_rejected(workspace, tmp_path, capsys):
    code = main(["train", "--config", str(workspace["config"]),
                 "--corpus", str(workspace["corpus"]),
                 "--out", str(tmp_path / "x"), "--t-f", "0.03", "--k", "0.02"])
    assert code == 1
    assert "0.03" in capsys.readouterr().err


def test_unknown_config_key_exit_code(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[train]\nlearming_rate = 1\n")
    code = main(["feasibility", "--config", str(bad), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "learming_rate" in capsys.readouterr().err


def test_train_grid_layout(workspace):
    runs = workspace["runs"]
    for cell in ("tf-2_k1", "tf0_k1"):
        assert (runs / cell / "model.ckpt").is_file()
        assert (runs / cell / "loss.csv").is_file()


def test_generate_outputs_and_determinism(workspace, tmp_path):
    ckpt = workspace["runs"] / "tf-2_k1" / "model.ckpt"
    outs = []
    for name in ("g1", "g2"):
        out = tmp_path / name
        code = main(["generate", "--config", str(workspace["config"]),
                     "--ckpt", str(ckpt), "--corpus", str(workspace["corpus"]),
                     "--out", str(out)])
        assert code == 0
        outs.append(out)
    for fname in ("generated.tgrd", "input.tgrd", "target.tgrd"):
        assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()
    meta = json.loads((outs[0] / "meta.json").read_text())
    assert meta["t_f_frames"] == -2 and meta["k_frames"] == 1


def test_eval_writes_report_and_reruns_identically(workspace, tmp_path):
    ckpt = workspace["runs"] / "tf0_k1" / "model.ckpt"
    csvs = []
    for name in ("e1", "e2"):
        out = tmp_path / name
        code = main(["eval", "--config", str(workspace["config"]),
                     "--ckpt", str(ckpt), "--corpus", str(workspace["corpus"]),
                     "--out", str(out), "--variant", "prompt_0.4"])
        assert code == 0
        csvs.append((out / "report.csv").read_bytes())
        report = json.loads((out / "report.json").read_text())
        assert report["variant"] == "prompt_0.4"
        assert "surrogate" in report["note"]
        assert set(report["floors"]) == {"coherence", "beat_f1", "dist_distance"}
    assert csvs[0] == csvs[1]


def test_eval_missing_checkpoint(workspace, tmp_path):
    code = main(["eval", "--config", str(workspace["config"]),
                 "--ckpt", str(tmp_path / "nope.ckpt"),
                 "--corpus", str(workspace["corpus"]), "--out", str(tmp_path / "o")])
    assert code == 1


def test_eval_runtime_failure_is_exit_2(workspace, tmp_path, monkeypatch):
    # window longer than any song: sampling fails only once work starts
    monkeypatch.setenv("STREAMJAM_EVAL__WINDOW_FRAMES", "1000")
    ckpt = workspace["runs"] / "tf0_k1" / "model.ckpt"
    code = main(["eval", "--config", str(workspace["config"]),
                 "--ckpt", str(ckpt), "--corpus", str(workspace["corpus"]),
                 "--out", str(tmp_path / "o")])
    assert code == 2


def test_sweep_rows_and_rerun_bytes(workspace, tmp_path):
    csvs = []
    for name in ("s1", "s2"):
        out = tmp_path / name
        code = main(["sweep", "--config", str(workspace["config"]),
                     "--runs", str(workspace["runs"]),
                     "--corpus", str(workspace["corpus"]), "--out", str(out)])
        assert code == 0
        csvs.append((out / "sweep.csv").read_bytes())
    assert csvs[0] == csvs[1]
    lines = csvs[0].decode().strip().splitlines()
    assert lines[0].startswith("t_f_frames,k_frames,variant")
    assert len(lines) == 1 + 2 * 2  # two cells, paired + prompt_0.4
    sweep = json.loads((tmp_path / "s1" / "sweep.json").read_text())
    assert sweep["warnings"] == []
    assert {c["cell"] for c in sweep["cells"]} == {"tf-2_k1", "tf0_k1"}


def test_sweep_missing_checkpoint_warns(workspace, tmp_path):
    partial = tmp_path / "partial_runs"
    partial.mkdir()
    src = workspace["runs"] / "tf0_k1"
    dst = partial / "tf0_k1"
    dst.mkdir()
    (dst / "model.ckpt").write_bytes((src / "model.ckpt").read_bytes())
    out = tmp_path / "out"
    code = main(["sweep", "--config", str(workspace["config"]),
                 "--runs", str(partial),
                 "--corpus", str(workspace["corpus"]), "--out", str(out)])
    assert code == 0
    sweep = json.loads((out / "sweep.json").read_text())
    assert len(sweep["warnings"]) == 1
    assert "tf-2_k1" in sweep["warnings"][0]["cell"]
    lines = (out / "sweep.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 2  # one surviving cell


def test_feasibility_region(workspace, tmp_path):
    out = tmp_path / "feas"
    code = main(["feasibility", "--config", str(workspace["config"]), "--out", str(out)])
    assert code == 0
    lines = (out / "feasibility.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 55
    blob = json.loads((out / "feasibility.json").read_text())
    assert blob["n_feasible"] == sum(c["feasible"] for c in blob["cells"])


def test_calibrate_gen_time(workspace, tmp_path):
    ckpt = workspace["runs"] / "tf0_k1" / "model.ckpt"
    out = tmp_path / "calib"
    code = main(["calibrate-gen-time", "--config", str(workspace["config"]),
                 "--ckpt", str(ckpt), "--out", str(out),
                 "--k-grid", "0.02,0.04,0.1"])
    assert code == 0
    calib = json.loads((out / "calibration.json").read_text())
    assert calib["a"] >= 0 and calib["b"] >= 0 and 0.25 <= calib["alpha"] <= 2.0
    assert len(calib["samples"]) == 3


def test_help_and_missing_subcommand(capsys):
    with pytest.raises(SystemExit) as e:
        main(["--help"])
    assert e.value.code == 0
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 1
