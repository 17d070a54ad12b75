import hashlib
import json

import pytest
import yaml

from crossmatch.cli import main
from crossmatch.datasets import fingerprint, load_dataset

TINY = {
    "data": {"labeled_fraction": 0.25, "val_count": 4},
    "net": {"base_width": 8, "depth": 2},
    "train": {"iterations": 3, "batch_size": 4, "checkpoint_every": 2},
}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.yaml"
    spec.write_text(yaml.safe_dump({"count": 20, "height": 32, "width": 32, "seed": 3}))
    assert main(["synth", "--spec", str(spec), "--out", str(root / "data")]) == 0
    return root / "data"


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "cfg.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def test_synth_round_trip(data_dir, tmp_path):
    from crossmatch.datasets import SynthSpec, synth_generate

    loaded = load_dataset(data_dir)
    assert len(loaded) == 20
    assert fingerprint(loaded) == fingerprint(synth_generate(SynthSpec(count=20, height=32, width=32, seed=3)))
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["dataset_fingerprint"] == fingerprint(loaded)


def test_train_eval_plot(data_dir, cfg_file, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg_file), "--data", str(data_dir), "--out", str(run)]) == 0
    manifest = json.loads((run / "manifest.json").read_text())
    assert {"config", "config_hash", "dataset_fingerprint", "seed", "environment"} <= set(manifest)
    assert (run / "ckpt_2").exists() and (run / "ckpt_3").exists()
    assert (run / "losses.csv").read_text().count("\n") == 4

    assert main(["eval", "--ckpt", str(run / "ckpt_3"), "--data", str(data_dir)]) == 0
    table = (run / "ckpt_3" / "eval_table.txt").read_text().splitlines()[0].split()
    assert table == ["Dice(%)", "Jaccard(%)", "95HD(px)", "ASD(px)"]

    plots_a, plots_b = tmp_path / "pa", tmp_path / "pb"
    assert main(["plot", "--run", str(run), "--out", str(plots_a)]) == 0
    assert main(["plot", "--run", str(run), "--out", str(plots_b)]) == 0
    names = sorted(p.name for p in plots_a.iterdir())
    assert "curve_total.png" in names and "curve_val_dice_pct.png" in names
    digest = lambda d: [hashlib.sha256((d / n).read_bytes()).hexdigest() for n in names]
    assert digest(plots_a) == digest(plots_b)


def test_train_resume_and_naive(data_dir, cfg_file, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg_file), "--data", str(data_dir), "--out", str(run)]) == 0
    again = tmp_path / "again"
    assert main(["train", "--config", str(cfg_file), "--data", str(data_dir), "--out", str(again),
                 "--resume", str(run / "ckpt_2")]) == 0
    assert (again / "losses.csv").read_text().splitlines()[1:] != []
    # a different method changes the config hash, so resuming is refused
    assert main(["train", "--config", str(cfg_file), "--data", str(data_dir), "--out", str(tmp_path / "x"),
                 "--resume", str(run / "ckpt_2"), "--method", "fixmatch"]) == 2
    assert main(["train", "--config", str(cfg_file), "--data", str(data_dir), "--out", str(tmp_path / "n"),
                 "--naive"]) == 0


def test_ablate(data_dir, tmp_path):
    grid = tmp_path / "grid.yaml"
    grid.write_text(yaml.safe_dump({"config": TINY, "grids": ["gap"], "data": str(data_dir), "iterations": 1}))
    assert main(["ablate", "--grid", str(grid), "--out", str(tmp_path / "abl")]) == 0
    rows = (tmp_path / "abl" / "ablation.jsonl").read_text().splitlines()
    assert len(rows) == 4
    assert (tmp_path / "abl" / "manifest.json").exists()


def test_exit_codes(data_dir, cfg_file, tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "missing"), "--data", str(data_dir)]) == 3
    assert "does not exist" in capsys.readouterr().err
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"loss": {"eta": 3}}))
    assert main(["train", "--config", str(bad), "--data", str(data_dir), "--out", str(tmp_path / "r")]) == 2
    assert main(["train", "--config", str(cfg_file), "--data", str(tmp_path / "nodata"),
                 "--out", str(tmp_path / "r2")]) == 3
    assert main(["synth", "--spec", str(tmp_path / "nospec.yaml"), "--out", str(tmp_path / "s")]) == 2
    with pytest.raises(SystemExit):
        main(["bogus"])
