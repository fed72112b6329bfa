import pytest
from conftest import tiny_config

from dfgp.sweep import SWEEP_COLUMNS, sensitivity_sweep


def test_single_cell_gives_one_row(tiny_scene):
    stack, target, mask = tiny_scene
    rows = sensitivity_sweep(["GPs"], [80], ["grid"], [0], stack, mask, target, tiny_config())
    assert len(rows) == 1
    assert set(rows[0]) == set(SWEEP_COLUMNS)
    assert rows[0]["status"] == "ok" and rows[0]["mae"] > 0


def test_row_order_and_skips(tiny_scene):
    stack, target, mask = tiny_scene
    rows = sensitivity_sweep(["LR", "CNN"], [50, 10**6], ["random", "grid"], [0, 1], stack, mask, target,
                             tiny_config())
    assert len(rows) == 2 * 2 * 2 * 2
    assert [r["scenario"] for r in rows[:8]] == ["random"] * 8
    skipped = [r for r in rows if r["n_train"] == 10**6]
    assert all(r["status"] == "skipped" and r["mae"] is None for r in skipped)
    assert all(r["status"] == "ok" for r in rows if r["n_train"] == 50)


def test_rejects_unknown_inputs(tiny_scene):
    stack, target, mask = tiny_scene
    with pytest.raises(ValueError):
        sensitivity_sweep(["LR"], [50], ["stripes"], [0], stack, mask, target, tiny_config())
    with pytest.raises(ValueError):
        sensitivity_sweep(["RF"], [50], ["grid"], [0], stack, mask, target, tiny_config())
