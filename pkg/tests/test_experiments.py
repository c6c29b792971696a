import json
from dataclasses import replace

import pytest

from ropedistill.experiments import FlagshipResults, desk_run_config, flagship_configs, main, run_flagship
from ropedistill.model import ModelConfig
from ropedistill.trainer import compute_matched_steps


def _small_base(steps=3):
    base = desk_run_config(steps)
    base.model = ModelConfig(d_model=16, n_heads=2, n_layers=1, mlp_hidden=32, max_len=256)
    base.task = replace(base.task, L=96, key_len=1, n_distractor_keys=2, n_copy_spans=1, n_pairs=3, n_queries=2)
    base.train = replace(base.train, batch_size=2)
    return base


def test_flagship_configs_differ_only_where_intended():
    runs = flagship_configs(100, 1.6)
    std, matched, ours = runs["standard"], runs["matched"], runs["ours"]
    assert matched.train.steps == compute_matched_steps(100, 1.6) == 160
    assert std.objective.variant == matched.objective.variant == "standard_clm"
    assert ours.objective.variant == "ours_reverse_kl" and ours.objective.lam == 1.0
    assert ours.sampler.kind == "skip" and ours.sampler.Y == ours.task.L
    assert std.model == ours.model and std.task == ours.task and std.train == ours.train
    assert len({std.hash(), matched.hash(), ours.hash()}) == 3


def test_small_flagship_end_to_end(tmp_path):
    res = run_flagship(tmp_path, steps=3, overhead=1.6, per_bin=20, eval_lens=(192,), attention_len=192,
                       base=_small_base())
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary["checks"]) == {"positional_robustness", "extrapolation", "attention_distance", "ordinal"}
    for name in ("standard", "matched", "ours"):
        assert len(res.position[name]["bin_accuracy"]) == 10
        assert 0.0 <= res.attention_beyond[name] <= 1.0
        assert set(res.extrapolation[name]) == {192}
        assert (tmp_path / name / "final.bin").is_file()
    assert res.step_time_ratio > 0
    # cached runs are reused, so a second call gives identical results
    again = run_flagship(tmp_path, steps=3, overhead=1.6, per_bin=20, eval_lens=(192,), attention_len=192,
                         base=_small_base())
    assert again.position == res.position and again.ordinal == res.ordinal


def test_directional_checks():
    r = FlagshipResults(
        position={"standard": {"mean_accuracy": 0.5, "positional_std": 0.2},
                  "matched": {"mean_accuracy": 0.6, "positional_std": 0.15},
                  "ours": {"mean_accuracy": 0.6, "positional_std": 0.1}},
        extrapolation={"standard": {512: 0.3}, "ours": {512: 0.4}},
        attention_beyond={"standard": 0.01, "ours": 0.02},
        ordinal={"standard": 0.5, "ours": 0.485},
        step_ms={"standard": 100.0, "ours": 170.0},
    )
    assert r.positional_robustness() and r.extrapolation_holds() and r.attention_reaches_further()
    assert r.ordinal_preserved(0.02) and not r.ordinal_preserved(0.01)
    assert r.step_time_ratio == pytest.approx(1.7)
    # equal std is not strictly lower
    r.position["ours"]["positional_std"] = 0.15
    assert not r.positional_robustness()
    # all-zero accuracy cannot show degradation beyond the window
    r.position["standard"]["mean_accuracy"] = 0.0
    r.extrapolation = {"standard": {512: 0.0}, "ours": {512: 0.0}}
    assert not r.extrapolation_holds()


def test_main_rejects_bad_arguments():
    with pytest.raises(SystemExit):
        main(["--steps", "x"])
