import json

import numpy as np
import pytest

from landmark_da.checkpoint import load_checkpoint, save_checkpoint
from landmark_da.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from landmark_da.data import Dataset, generate_synthetic, write_dataset
from landmark_da.netdef import ArchitectureSpec, init_parameters


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--domain", "source", "--count", "12", "--seed", "1", "--out", str(root / "src")]) == 0
    assert main(["synth", "--domain", "target", "--count", "12", "--seed", "1", "--out", str(root / "tgt")]) == 0
    assert main(["synth", "--domain", "target", "--count", "20", "--seed", "2", "--out", str(root / "pool")]) == 0
    cfg = root / "train.cfg"
    cfg.write_text(
        "\n".join([
            "epochs = 1",
            "batch_size = 6",
            "width_scale = 0.05",
            f"source = {root / 'src'}",
            f"target = {root / 'tgt'}",
            f"target_labeled = {root / 'pool'}",
            f"test = {root / 'pool'}",
            f"out_dir = {root / 'run'}",
        ]) + "\n"
    )
    assert main(["train", "--config", str(cfg)]) == 0
    return root


def test_synth_layout(workspace):
    files = sorted(p.name for p in (workspace / "src").iterdir())
    assert "annotations.csv" in files and len(files) == 13


def test_train_outputs(workspace):
    run = workspace / "run"
    for name in ("final.ckpt", "train_log.jsonl", "config.txt", "eval_report.json", "roc.csv"):
        assert (run / name).is_file()
    lines = (run / "train_log.jsonl").read_text().splitlines()
    assert len(lines) == 2
    assert set(json.loads(lines[0])) == {"step", "epoch", "l_rec", "l_reg", "wall_time"}


def test_train_override(workspace, capsys):
    out = workspace / "run2"
    assert main(["train", "--config", str(workspace / "train.cfg"), "--override", f"out_dir={out}",
                 "--override", "mode=supervised_only", "--override", "test="]) == 0
    assert (out / "final.ckpt").is_file() and not (out / "eval_report.json").exists()


def test_eval_is_byte_reproducible(workspace):
    a, b = workspace / "a.json", workspace / "b.json"
    args = ["eval", "--model", str(workspace / "run/final.ckpt"), "--data", str(workspace / "pool")]
    assert main(args + ["--report", str(a), "--csv", str(workspace / "a.csv")]) == 0
    assert main(args + ["--annotations", str(workspace / "pool/annotations.csv"), "--report", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    report = json.loads(a.read_text())
    assert report["count"] == 20 and 0 <= report["auc"] <= 100
    assert (workspace / "a.csv").read_text().splitlines()[0] == "threshold_px,precision"


def test_eval_oracle_checkpoint(tmp_path):
    # every face shares one landmark set; a zero-weight regressor with bias atanh(y) predicts it
    truth = np.array([-0.5, -0.3, 0.5, -0.3, 0.0, 0.4])
    base = generate_synthetic("source", 4, 0)
    data = Dataset(base.images, np.tile(truth, (4, 1)), base.ids)
    write_dataset(data, tmp_path / "d")
    model = init_parameters(ArchitectureSpec(width_scale=0.05), 0)
    model.params["reg.fc.weight"].data[...] = 0.0
    model.params["reg.fc.bias"].data[...] = np.arctanh(truth)
    save_checkpoint(model, tmp_path / "oracle.ckpt")
    assert main(["eval", "--model", str(tmp_path / "oracle.ckpt"), "--data", str(tmp_path / "d"),
                 "--report", str(tmp_path / "r.json")]) == 0
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["precision"] == 1.0
    assert report["mean_error_px"] < 1e-9


def test_predict_prints_six_numbers(workspace, capsys):
    image = workspace / "src" / "source_1_00000.png"
    assert main(["predict", "--model", str(workspace / "run/final.ckpt"), "--image", str(image)]) == 0
    values = [float(v) for v in capsys.readouterr().out.split()]
    assert len(values) == 6
    assert all(0 <= v <= 31 for v in values)


def test_predict_scales_to_original_resolution(tmp_path, capsys):
    from PIL import Image

    Image.fromarray(np.zeros((64, 96), dtype=np.uint8)).save(tmp_path / "big.png")
    model = init_parameters(ArchitectureSpec(width_scale=0.05), 0)
    model.params["reg.fc.weight"].data[...] = 0.0
    save_checkpoint(model, tmp_path / "m.ckpt")
    assert main(["predict", "--model", str(tmp_path / "m.ckpt"), "--image", str(tmp_path / "big.png")]) == 0
    values = [float(v) for v in capsys.readouterr().out.split()]
    assert values == [47.5, 31.5] * 3


def test_sweep(workspace):
    report = workspace / "sweep.json"
    code = main(["sweep", "--config", str(workspace / "train.cfg"), "--counts", "0,2",
                 "--override", f"out_dir={workspace / 'sweep_run'}", "--report", str(report)])
    assert code == 0
    entries = json.loads(report.read_text())
    assert [e["target_labeled_count"] for e in entries] == [0, 2]
    assert (workspace / "sweep_run/sweep/count_0002/final.ckpt").is_file()


def test_gradcheck_exit_zero(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert len(out) >= 7 and all(line.startswith("PASS") for line in out)


def test_gradcheck_failure_exit_code(monkeypatch, capsys):
    import landmark_da.cli as cli
    from landmark_da.gradcheck import GradCheckResult

    monkeypatch.setattr(cli, "check_all", lambda seed: [GradCheckResult("conv2d", {"x": 0.5})])
    assert main(["gradcheck"]) == EXIT_NUMERIC
    assert capsys.readouterr().err.strip() == "error: numeric: gradient check failed for conv2d"


@pytest.mark.parametrize("argv", [[], ["fly"], ["eval", "--model"], ["synth", "--domain", "cats", "--count", "1",
                                                                      "--out", "x"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error: usage: ")


def test_data_errors_are_one_line(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    blob = bytearray((workspace / "run/final.ckpt").read_bytes())
    blob[100] ^= 1
    bad.write_bytes(bytes(blob))
    assert main(["predict", "--model", str(bad), "--image", str(workspace / "src/source_1_00000.png")]) == EXIT_DATA
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: data: checksum error")
    assert main(["eval", "--model", str(workspace / "run/final.ckpt"), "--data", str(tmp_path / "none"),
                 "--report", str(tmp_path / "r.json")]) == EXIT_DATA
    cfg = tmp_path / "c.cfg"
    cfg.write_text("bogus = 1\n")
    assert main(["train", "--config", str(cfg)]) == EXIT_DATA
    cfg.write_text("epochs = 1\n")
    assert main(["train", "--config", str(cfg)]) == EXIT_DATA
    assert "source" in capsys.readouterr().err


def test_checkpoint_from_train_loads(workspace):
    model = load_checkpoint(workspace / "run/final.ckpt")
    assert model.spec.width_scale == 0.05 and model.step == 2
