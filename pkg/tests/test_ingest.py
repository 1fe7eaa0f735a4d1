import logging

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from venteval import mdp
from venteval.dataset import EpisodeRecord, RawEpisode
from venteval.ingest import (
    SEPSIS_ICD9,
    Excluded,
    KnnReference,
    apply_winsor,
    build_reference,
    build_transitions,
    fill_gaps,
    fit_winsor,
    flag_sepsis,
    impute_episode,
    normalize_icd9,
    preprocess,
    read_episodes,
    transitions_from_frame,
    transitions_to_frame,
    write_episodes,
)
from venteval.schema import DYNAMIC_FEATURES, STATE_FEATURES, STEP_COLUMNS, Z_IDX

POS = {c: i for i, c in enumerate(STEP_COLUMNS)}
STATIC = {"sex": 1.0, "sepsis": 0.0, "weight": 70.0, "age": 60.0, "mortality_90d": 0.0, "icu_readmission": 0.0}


def _raw(eid, T, rng, **overrides):
    steps = rng.normal(50, 10, (T, len(STEP_COLUMNS)))
    steps[:, POS["vt_set"]] = rng.uniform(4, 9, T)
    steps[:, POS["peep"]] = rng.uniform(3, 14, T)
    steps[:, POS["fio2"]] = rng.uniform(0.3, 0.8, T)
    steps[:, POS["spo2"]] = rng.uniform(85, 99, T)
    static = {**STATIC, **overrides}
    return RawEpisode(eid, static, steps)


def test_flag_sepsis_examples():
    assert flag_sepsis(["038.9"])
    assert not flag_sepsis([])
    assert not flag_sepsis(["410.1"])
    assert flag_sepsis(["0389"])  # undotted form normalizes
    assert normalize_icd9("99591") == "995.91"


def test_sepsis_code_list():
    assert len(SEPSIS_ICD9) == 47
    assert {"995.92", "785.52", "038.0", "630"} <= SEPSIS_ICD9


def test_winsor_order_statistic():
    x = np.arange(1, 1001, dtype=float)
    ep = RawEpisode("a", dict(STATIC), np.tile(x[:, None], (1, len(STEP_COLUMNS))))
    lim = fit_winsor([ep])
    # linear-interpolation quantile written out by hand
    h = (len(x) - 1) * 0.997
    expected = x[int(np.floor(h))] + (h - np.floor(h)) * (x[int(np.floor(h)) + 1] - x[int(np.floor(h))])
    assert lim.high["heart_rate"] == pytest.approx(expected, rel=1e-15)
    out = apply_winsor(ep, lim)
    assert out.column("heart_rate")[-1] == pytest.approx(expected, rel=1e-15)
    assert out.column("heart_rate")[500] == 501.0


def test_winsor_constant_and_idempotent():
    rng = np.random.default_rng(0)
    eps = [_raw(f"e{i}", 6, rng) for i in range(4)]
    for ep in eps:
        ep.steps[:, POS["gcs"]] = 9.0
    lim = fit_winsor(eps)
    assert lim.low["gcs"] == lim.high["gcs"] == 9.0
    once = apply_winsor(eps[0], lim)
    twice = apply_winsor(once, lim)
    np.testing.assert_array_equal(once.steps, twice.steps)
    # order preserving per feature
    col = eps[0].column("heart_rate")
    order = np.argsort(col, kind="stable")
    assert np.all(np.diff(once.column("heart_rate")[order]) >= 0)


def test_winsor_keeps_missing_and_errors_when_empty():
    rng = np.random.default_rng(1)
    ep = _raw("a", 5, rng)
    ep.steps[2, POS["pao2"]] = np.nan
    lim = fit_winsor([ep])
    assert np.isnan(apply_winsor(ep, lim).column("pao2")[2])
    ep.steps[:, POS["pao2"]] = np.nan
    with pytest.raises(ValueError, match="pao2"):
        fit_winsor([ep])


def test_fill_gap_of_five_forward_fills():
    col = np.array([1.0, np.nan, np.nan, np.nan, np.nan, np.nan, 7.0])
    np.testing.assert_array_equal(fill_gaps(col), [1, 1, 1, 1, 1, 1, 7])


def test_fill_gap_longer_than_five_left_alone():
    col = np.array([1.0] + [np.nan] * 6 + [8.0])
    np.testing.assert_array_equal(np.isnan(fill_gaps(col)), np.isnan(col))


def test_leading_gap_back_fills():
    np.testing.assert_array_equal(fill_gaps(np.array([np.nan, np.nan, 3.0])), [3, 3, 3])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.one_of(st.none(), st.floats(-5, 5)), min_size=1, max_size=30))
def test_fill_never_bridges_long_gaps(values):
    col = np.array([np.nan if v is None else v for v in values])
    out = fill_gaps(col)
    miss = np.isnan(col)
    # every run longer than five stays entirely missing; shorter runs close when any value exists
    i = 0
    while i < len(col):
        if not miss[i]:
            assert out[i] == col[i]
            i += 1
            continue
        j = i
        while j < len(col) and miss[j]:
            j += 1
        if j - i > 5 or (i == 0 and j == len(col)):
            assert np.isnan(out[i:j]).all()
        else:
            assert not np.isnan(out[i:j]).any()
        i = j


def test_fully_observed_unchanged():
    rng = np.random.default_rng(2)
    ep = _raw("a", 8, rng)
    rec = impute_episode(ep, build_reference([ep]))
    np.testing.assert_array_equal(rec.steps, ep.steps)
    assert rec.imputation_fraction == {"vt_set": 0.0, "peep": 0.0, "fio2": 0.0}


def test_excluded_when_vent_setting_mostly_imputed():
    rng = np.random.default_rng(3)
    ep = _raw("a", 10, rng)
    ep.steps[[1, 2, 4, 5, 7, 9], POS["vt_set"]] = np.nan
    ref = build_reference([_raw(f"r{i}", 10, rng) for i in range(5)])
    assert isinstance(impute_episode(ep, ref), Excluded)
    ep.steps[[1, 2], POS["vt_set"]] = 6.0  # 4 of 10 now missing
    rec = impute_episode(ep, ref)
    assert isinstance(rec, EpisodeRecord)
    assert rec.imputation_fraction["vt_set"] == 0.4
    assert not np.isnan(rec.steps).any()


def test_knn_fills_long_gaps_from_donors():
    rng = np.random.default_rng(4)
    donors = [_raw(f"r{i}", 12, rng) for i in range(6)]
    for d in donors:
        d.steps[:, POS["temperature"]] = 37.0
    ep = _raw("a", 12, rng)
    ep.steps[:, POS["temperature"]] = np.nan
    rec = impute_episode(ep, build_reference(donors))
    np.testing.assert_allclose(rec.column("temperature"), 37.0)


def test_knn_errors():
    with pytest.raises(ValueError):
        KnnReference(np.ones((3, 2)), k=0)
    rng = np.random.default_rng(5)
    ep = _raw("a", 8, rng)
    ep.steps[:, POS["gcs"]] = np.nan
    with pytest.raises(ValueError, match="empty"):
        impute_episode(ep, KnnReference(np.empty((0, len(STEP_COLUMNS) + 2))))
    with pytest.raises(ValueError):
        impute_episode(ep, build_reference([ep]), k=0)


def test_icd9_codes_set_sepsis():
    rng = np.random.default_rng(6)
    ep = _raw("a", 4, rng)
    ep = RawEpisode(ep.episode_id, ep.static, ep.steps, ("995.92",))
    assert impute_episode(ep, build_reference([ep])).static["sepsis"] == 1.0


def test_preprocess_truncates_and_reports():
    rng = np.random.default_rng(7)
    train = [_raw(f"t{i}", 25, rng) for i in range(5)] + [_raw("short", 1, rng)]
    bad = _raw("bad", 10, rng)
    bad.steps[:8, POS["fio2"]] = np.nan
    recs, test, lim, report = preprocess(train, [bad])
    assert all(r.length == 18 for r in recs)
    assert report["too_short"] == ["short"]
    assert report["excluded"][0]["episode_id"] == "bad"
    assert test == []
    assert all(max(r.imputation_fraction.values()) <= 0.5 for r in recs)


def test_build_transitions_contract(small_cohort, caplog):
    _, eps, prop, ts = small_cohort
    assert len(ts) == sum(e.length - 1 for e in eps)
    for eid, ix in ts.episode_slices().items():
        assert len(np.unique(ts.states[ix, Z_IDX])) == 1
        np.testing.assert_array_equal(ts.t[ix], np.arange(1, len(ix) + 1))
        assert ts.dones[ix[-1]] and not ts.dones[ix[:-1]].any()
    assert ts.targets.shape[1] == len(STATE_FEATURES) - 3 == len(DYNAMIC_FEATURES)
    long = [e for e in eps if e.length == 18]
    if long:
        assert len(build_transitions(long[:1], mdp.RewardParams(), prop)) == 17
    one = EpisodeRecord("one", eps[0].static, eps[0].steps[:1])
    with caplog.at_level(logging.WARNING):
        ts2 = build_transitions([one, eps[0]], mdp.RewardParams(), prop)
    assert "one" in caplog.text and len(ts2) == eps[0].length - 1


def test_rewards_follow_reward_function(small_cohort):
    _, _, _, ts = small_cohort
    p = mdp.RewardParams(*mdp.SELECTED_PENALTIES)
    i = STATE_FEATURES.index("spo2")
    for k in range(0, len(ts), 37):
        assert ts.rewards[k] == mdp.reward(ts.states[k], ts.next_states[k], tuple(ts.bins[k]), p, spo2_idx=i)


def test_episode_csv_round_trip(tmp_path, small_cohort):
    _, eps, _, ts = small_cohort
    write_episodes(eps[:5], tmp_path / "steps.csv", tmp_path / "static.csv")
    raw = read_episodes(tmp_path / "steps.csv", tmp_path / "static.csv")
    assert [r.episode_id for r in raw] == [e.episode_id for e in eps[:5]]
    for r, e in zip(raw, eps[:5]):
        np.testing.assert_array_equal(r.steps, e.steps)
    df = transitions_to_frame(ts)
    df.to_csv(tmp_path / "tr.csv", index=False, float_format="%.17g")
    back = transitions_from_frame(pd.read_csv(tmp_path / "tr.csv", dtype={"episode_id": str}, float_precision="round_trip"))
    np.testing.assert_array_equal(back.states, ts.states)
    np.testing.assert_array_equal(back.rewards, ts.rewards)
    np.testing.assert_array_equal(back.dones, ts.dones)


def test_missing_cells_read_as_nan(tmp_path):
    rng = np.random.default_rng(8)
    ep = _raw("x", 3, rng)
    ep.steps[1, POS["pao2"]] = np.nan
    write_episodes([ep], tmp_path / "s.csv", tmp_path / "st.csv")
    text = (tmp_path / "s.csv").read_text()
    assert ",," in text
    back = read_episodes(tmp_path / "s.csv", tmp_path / "st.csv")[0]
    assert np.isnan(back.column("pao2")[1])


def test_winsor_limits_ignore_excluded_episodes():
    rng = np.random.default_rng(0)
    good = [_raw(f"g{i}", 6, rng) for i in range(3)]
    bad = _raw("b", 6, rng)
    bad.steps[:, POS["heart_rate"]] = 1e4  # extreme values that would move the limits
    bad.steps[:4, POS["peep"]] = np.nan  # excluded: PEEP missing at 4 of 6 steps
    _, _, limits, report = preprocess(good + [bad])
    assert [e["episode_id"] for e in report["excluded"]] == ["b"]
    assert limits.to_dict() == fit_winsor(good).to_dict()
