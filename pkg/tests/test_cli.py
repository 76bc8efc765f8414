import csv
import subprocess
import sys
import xml.etree.ElementTree as ET

import pytest

from dunet.cli import main
from dunet.data import read_cloud
from dunet.train import load_checkpoint, save_checkpoint

TOY = ["--widths", "8,16,16,32", "--lift-width", "8", "--head-widths", "32,16", "--batch-size", "3"]


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def seg_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("seg")
    assert main(["gen-data", "--family", "seg-composites", "--n", "128", "--per-class", "2", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def trained(seg_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--task", "seg", "--data", str(seg_dir), "--out", str(out), "--epochs", "2", *TOY]) == 0
    return out


def test_gen_data_writes_clouds(seg_dir):
    files = sorted(p.name for p in seg_dir.glob("*.duc"))
    assert len(files) == 6 and files[0] == "capsule_0000.duc"
    assert len(read_cloud(seg_dir / files[0])) == 128


def test_train_outputs_and_determinism(seg_dir, trained, tmp_path, capsys):
    assert rows(trained / "metrics.csv")[0] == ["epoch", "split", "loss", "metric_name", "metric_value"]
    assert len(rows(trained / "metrics.csv")) == 3
    ck = load_checkpoint(trained / "model.ckpt")
    assert ck.epoch == 2 and ck.model.cfg.task == "segmentation"
    capsys.readouterr()
    assert main(["train", "--task", "seg", "--data", str(seg_dir), "--out", str(tmp_path), "--epochs", "2",
                 *TOY]) == 0
    printed = capsys.readouterr().out
    assert "epochs = 2" in printed and "optimizer = sgd-momentum" in printed
    assert (tmp_path / "metrics.csv").read_text() == (trained / "metrics.csv").read_text()


def test_config_file_and_flag_override(seg_dir, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# toy run\ntask = seg\nepochs = 5\nlr = 0.05\nwidths = 8,16,16,32\nlift_width = 8\n"
                   "enable_phi = false\n")
    assert main(["train", "--config", str(cfg), "--data", str(seg_dir), "--out", str(tmp_path / "o"),
                 "--epochs", "1", "--batch-size", "6"]) == 0
    out = capsys.readouterr().out
    assert "epochs = 1" in out and "lr = 0.05" in out and "enable_phi = False" in out
    assert load_checkpoint(tmp_path / "o" / "model.ckpt").model.cfg.enable_phi is False


@pytest.mark.parametrize("argv", [
    ["train", "--task", "seg", "--data", "D", "--out", "O", "--epochs", "0"],
    ["train", "--task", "seg", "--data", "D", "--out", "O", "--bogus", "1"],
    ["train", "--task", "det", "--data", "D", "--out", "O"],
    ["diffuse", "--diffusivity", "pm", "--lambda", "-1", "--out", "O"],
    ["edge-experiment", "--weights", "0.1,nan", "--out", "O"],
])
def test_bad_flags_exit_2_without_touching_disk(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2
    assert list(tmp_path.iterdir()) == []


def test_missing_data_and_bad_config(tmp_path, capsys):
    assert main(["train", "--task", "seg", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == 2
    assert "does not exist" in capsys.readouterr().err
    cfg = tmp_path / "c.cfg"
    cfg.write_text("task = seg\nlearning_rate = 3\n")
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path), "--out", str(tmp_path / "o")]) == 2
    assert "learning_rate" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_nan_exits_3(seg_dir, tmp_path):
    assert main(["train", "--task", "seg", "--data", str(seg_dir), "--out", str(tmp_path), "--epochs", "1",
                 "--lr", "1e300", "--optimizer", "sgd-momentum", *TOY]) == 3


def test_eval_reports_metrics(seg_dir, trained, tmp_path):
    out = tmp_path / "m.csv"
    assert main(["eval", "--ckpt", str(trained / "model.ckpt"), "--data", str(seg_dir), "--out", str(out)]) == 0
    got = dict(rows(out)[1:])
    assert set(got) == {"loss", "instance_miou"}
    assert 0.0 <= float(got["instance_miou"]) <= 1.0


def test_edge_experiment_csv(tmp_path):
    out = tmp_path / "e.csv"
    assert main(["edge-experiment", "--weights=-0.5,0,0.5", "--out", str(out)]) == 0
    table = rows(out)
    assert table[0] == ["w", "delta_grad", "sign"]
    assert [r[2] for r in table[1:]] == ["1", "0", "-1"]
    assert float(table[1][1]) > 0 and float(table[2][1]) == 0.0


def test_diffuse_csv_and_instability(tmp_path):
    out = tmp_path / "d.csv"
    assert main(["diffuse", "--diffusivity", "const", "--steps", "5", "--points", "128", "--out", str(out)]) == 0
    table = rows(out)
    assert table[0] == ["step", "ratio"] and table[1] == ["0", "1.0"] and len(table) == 7
    assert main(["diffuse", "--diffusivity", "const", "--tau", "1.5", "--out", str(tmp_path / "x.csv")]) == 3
    assert not (tmp_path / "x.csv").exists()


def test_diffuse_needs_labeled_cloud(seg_dir, tmp_path):
    assert main(["diffuse", "--diffusivity", "pm", "--cloud", str(seg_dir / "capsule_0000.duc"),
                 "--out", str(tmp_path / "d.csv")]) == 2


def test_smoothness_outputs(seg_dir, trained, tmp_path):
    prefix = tmp_path / "s" / "cap"
    cloud = seg_dir / "capsule_0000.duc"
    assert main(["smoothness", "--ckpt", str(trained / "model.ckpt"), "--cloud", str(cloud),
                 "--out", str(prefix)]) == 0
    for which in ("before", "after"):
        table = rows(f"{prefix}_{which}.csv")
        assert table[0] == ["x", "y", "z", "smoothness", "label"]
        assert len(table) - 1 == 128
        root = ET.parse(f"{prefix}_{which}.svg").getroot()
        text = open(f"{prefix}_{which}.svg").read()
        assert root.tag.endswith("svg") and "href" not in text
        assert len([e for e in root.iter() if e.tag.endswith("circle")]) == 128
    # both plots label the same shared scale
    lo_hi = [[e.text for e in ET.parse(f"{prefix}_{w}.svg").getroot().iter() if e.tag.endswith("text")][-2:]
             for w in ("before", "after")]
    assert lo_hi[0] == lo_hi[1]


def test_smoothness_constant_field_is_zero(seg_dir, trained, tmp_path):
    ck = load_checkpoint(trained / "model.ckpt")
    # zero fusion weights feed the last unit relu(beta): the same vector at every point
    ck.model.get("decoder/stage4/fuse/linear").weight.data[...] = 0.0
    save_checkpoint(tmp_path / "flat.ckpt", ck.model)
    prefix = tmp_path / "flat"
    assert main(["smoothness", "--ckpt", str(tmp_path / "flat.ckpt"), "--cloud", str(seg_dir / "rocket_0000.duc"),
                 "--out", str(prefix)]) == 0
    for which in ("before", "after"):
        assert all(float(r[3]) == 0.0 for r in rows(f"{prefix}_{which}.csv")[1:])


def test_smoothness_unknown_layer_lists_paths(seg_dir, trained, tmp_path, capsys):
    assert main(["smoothness", "--ckpt", str(trained / "model.ckpt"), "--cloud", str(seg_dir / "capsule_0000.duc"),
                 "--layer", "decoder/stage7/du", "--out", str(tmp_path / "x")]) == 2
    err = capsys.readouterr().err
    assert "encoder/stage1/du" in err and "decoder/stage4/du" in err


def test_seeded_reruns_give_identical_csvs(tmp_path):
    outs = []
    for i in range(2):
        d, e = tmp_path / f"d{i}.csv", tmp_path / f"e{i}.csv"
        assert main(["diffuse", "--diffusivity", "pm", "--steps", "10", "--seed", "3", "--out", str(d)]) == 0
        assert main(["edge-experiment", "--out", str(e)]) == 0
        outs.append((d.read_bytes(), e.read_bytes()))
    assert outs[0] == outs[1]


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "dunet", "edge-experiment", "--out", str(tmp_path / "e.csv")],
                         capture_output=True, text=True)
    assert res.returncode == 0
    assert "weights = " in res.stdout
    res = subprocess.run([sys.executable, "-m", "dunet", "frobnicate"], capture_output=True, text=True)
    assert res.returncode == 2
