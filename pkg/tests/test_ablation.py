import pytest

from crossmatch.ablation import GRIDS, AblationTable, grid_rows, run_ablation
from crossmatch.datasets import holdout
from crossmatch.errors import ConfigError

EXPECTED = {"dkd": 12, "tkd": 7, "ip": 12, "sup_type": 3, "loss_type": 12, "eta": 9, "tau": 9, "gap": 4,
            "dropout_kind": 9}


@pytest.mark.parametrize("grid", GRIDS)
def test_row_counts_and_full_rows(grid):
    rows = grid_rows(grid)
    assert len(rows) == EXPECTED[grid]
    fracs = sorted({r.axes["labeled_fraction"] for r in rows})
    assert sum(r.full for r in rows) == len(fracs)
    assert len({tuple(sorted(r.axes.items())) for r in rows}) == len(rows)


def test_axes_exact():
    assert [r.axes["eta"] for r in grid_rows("eta")] == [0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5]
    assert [(r.axes["weak_rate"], r.axes["strong_rate"], r.axes["gap"]) for r in grid_rows("gap")] == [
        (0.5, 0.5, 0.0), (0.375, 0.625, 0.25), (0.25, 0.75, 0.5), (0.125, 0.875, 0.75)]
    assert [r.axes["sup_kind"] for r in grid_rows("sup_type")] == ["ce", "dice", "mix"]
    tkd = [tuple(k[4:] for k, v in r.axes.items() if k.startswith("tkd_") and v) for r in grid_rows("tkd")]
    assert tkd[0] == ("p_w_w", "p_s_s") and tkd[1] == ("p_s_w", "p_w_s") and len(tkd[-1]) == 4
    lt = [(r.axes["h_kind"], r.axes["temperature"]) for r in grid_rows("loss_type")[:4]]
    assert lt == [("kl", 1.0), ("kl", 2.0), ("ce", 1.0), ("dice", 1.0)]


def test_unknown_grid():
    with pytest.raises(ConfigError):
        grid_rows("nope")


def test_run_ablation_rows(tiny_records, tiny_config):
    train, val = holdout(tiny_records, 4, 0)
    table = run_ablation(["gap", "sup_type"], tiny_config, train, val, iterations=2)
    assert len(table.rows) == 7
    assert len({r["seed"] for r in table.rows}) == 1
    for r in table.rows:
        assert r["affine_residual"] < 1e-6
        assert r["dice_pct"] is not None
    assert "[gap]" in table.format() and "Dice(%)" in table.format()


def test_table_write(tmp_path):
    t = AblationTable([{"grid": "eta", "axis.eta": 0.3, "full": True, "dice_pct": 1.0, "jaccard_pct": 0.5,
                        "hd95": None, "asd": 2.0}])
    t.write(tmp_path)
    assert {p.name for p in tmp_path.iterdir()} == {"ablation.csv", "ablation.jsonl", "ablation.txt"}
    assert "n/a" in (tmp_path / "ablation.txt").read_text()
