import math

import pytest
import torch

from crossmatch.datasets import SplitSpec, batch_schedule, make_split
from crossmatch.errors import ConfigError, NumericError
from crossmatch.trainer import (
    build_state, fit, load_checkpoint, parameter_vector, step_rng, step_seed, train_step,
)


def _cfg(base, **train):
    return base.with_overrides(train=train) if train else base


def test_step_seeds_distinct_and_stable():
    assert step_seed(0, 5) == step_seed(0, 5)
    assert len({step_seed(s, k) for s in range(3) for k in range(50)}) == 150
    assert step_rng(1, 2).random() == step_rng(1, 2).random()


def test_supervised_only_has_no_unlabeled_terms(tiny_records, tiny_config):
    _, log = fit(_cfg(tiny_config, method="supervised_only"), tiny_records)
    for row in log.losses:
        assert row["ip"] == row["tkd"] == row["dkd"] == 0.0
        assert row["total"] == row["sup"]
        assert (row["encoder_calls"], row["decoder_calls"]) == (1, 1)


def test_fixmatch_single_strong_stream(tiny_records, tiny_config):
    _, log = fit(_cfg(tiny_config, method="fixmatch"), tiny_records)
    for row in log.losses:
        assert row["tkd"] == row["dkd"] == 0.0
        assert (row["encoder_calls"], row["decoder_calls"]) == (1, 1)
        assert "coverage_ip_s1" in row and "coverage_ip_s2" not in row


def test_crossmatch_rows(tiny_records, tiny_config):
    _, log = fit(tiny_config, tiny_records)
    for row in log.losses:
        assert (row["encoder_calls"], row["decoder_calls"]) == (2, 3)
        assert math.isfinite(row["total"])
        assert abs(row["total"] - (row["sup"] + row["ip"] + 0.7 * row["tkd"] + 0.3 * row["dkd"])) < 1e-6


def test_dualstream_trains(tiny_records, tiny_config):
    _, log = fit(_cfg(tiny_config, method="dualstream"), tiny_records)
    assert set(k for k in log.losses[0] if k.startswith("coverage_tkd")) == {"coverage_tkd_p_w_w", "coverage_tkd_p_s_s"}


def test_replay_is_bit_identical(tiny_records, tiny_config):
    a_state, a = fit(tiny_config, tiny_records, tiny_records[:4])
    b_state, b = fit(tiny_config, tiny_records, tiny_records[:4])
    assert a.deterministic_losses() == b.deterministic_losses()
    assert a.metrics == b.metrics
    assert torch.equal(parameter_vector(a_state.model), parameter_vector(b_state.model))


def test_seed_changes_run(tiny_records, tiny_config):
    _, a = fit(tiny_config, tiny_records)
    _, b = fit(_cfg(tiny_config, seed=1), tiny_records)
    assert a.deterministic_losses() != b.deterministic_losses()


def test_zero_iterations_leave_weights(tiny_records, tiny_config):
    cfg = _cfg(tiny_config, iterations=0)
    state, log = fit(cfg, tiny_records)
    assert log.losses == []
    assert torch.equal(parameter_vector(state.model), parameter_vector(build_state(cfg).model))


def test_resume_equals_uninterrupted(tiny_records, tiny_config, tmp_path):
    cfg = _cfg(tiny_config, iterations=6)
    full_state, full = fit(cfg, tiny_records, tiny_records[:4])
    fit(cfg, tiny_records, tiny_records[:4], out_dir=tmp_path, stop_at=3)
    res_state, res = fit(cfg, tiny_records, tiny_records[:4], resume=tmp_path / "ckpt_3")
    assert res.deterministic_losses() == full.deterministic_losses()
    assert res.metrics == full.metrics
    assert torch.equal(parameter_vector(res_state.model), parameter_vector(full_state.model))


def test_resume_refuses_other_config(tiny_records, tiny_config, tmp_path):
    fit(tiny_config, tiny_records, out_dir=tmp_path, stop_at=2)
    with pytest.raises(ConfigError):
        fit(tiny_config.with_overrides(loss={"eta": 0.5}), tiny_records, resume=tmp_path / "ckpt_2")
    state, _ = load_checkpoint(tmp_path / "ckpt_2" / "checkpoint.pt")
    assert state.step == 2


def test_non_finite_loss_raises(tiny_records, tiny_config):
    state = build_state(tiny_config)
    with torch.no_grad():
        state.model.head.weight.fill_(float("nan"))
    lab, unl = make_split(tiny_records, SplitSpec(0.25, 0))
    lb, ub = next(iter(batch_schedule(lab, unl, 4, 1, 0)))
    with pytest.raises(NumericError) as err:
        train_step(state, lb, ub)
    assert not math.isfinite(err.value.terms["total"])


def test_float64_training(tiny_records, tiny_config):
    state, log = fit(_cfg(tiny_config, dtype="float64", iterations=2), tiny_records)
    assert next(state.model.parameters()).dtype == torch.float64
    assert len(log.losses) == 2


def test_outputs_written(tiny_records, tiny_config, tmp_path):
    fit(_cfg(tiny_config, eval_every=2), tiny_records, tiny_records[:4], out_dir=tmp_path)
    assert (tmp_path / "losses.csv").exists() and (tmp_path / "metrics.jsonl").exists()
    assert (tmp_path / "ckpt_4" / "checkpoint.pt").exists()
    rows = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert len(rows) == 2
