from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tqd.metrics import (
    amota_amotp,
    clear_mot,
    count_errors,
    evaluate,
    match_frame,
    read_track_results,
    recall_sweep,
    write_track_results,
)
from support import clear_mot_case, gt, perfect_case, pred, sweep_case


def test_clear_mot_hand_case():
    results, scenes = clear_mot_case()
    m = clear_mot(results, scenes)
    assert (m["TP"], m["FP"], m["FN"], m["IDS"]) == (5, 1, 1, 1)
    assert m["MOTA"] == 0.5
    assert count_errors(results, scenes).distance_sum == 0.5


def test_switch_back_counts_twice_and_gaps_keep_identity():
    scene = [[gt(1, 0.0)]] * 4
    res = [[pred(7, 0.0, 0.9)], [pred(8, 0.0, 0.9)], [], [pred(7, 0.0, 0.9)]]
    assert count_errors([res], [scene]).ids == 2
    res = [[pred(7, 0.0, 0.9)], [], [pred(7, 0.0, 0.9)], [pred(7, 0.0, 0.9)]]
    assert count_errors([res], [scene]).ids == 0


def test_greedy_matching_order_and_threshold():
    gts = [gt(1, 0.0), gt(2, 3.0)]
    m = match_frame([pred(5, -0.5, 0.4), pred(6, 1.4, 0.9)], gts)
    # the confident prediction takes its closest ground truth first, which
    # leaves the other prediction without a partner inside the threshold
    assert m.pairs == [(1, 0, 1.4)]
    assert m.false_positives == [0] and m.misses == [1]
    m = match_frame([pred(5, 2.5, 0.9)], [gt(1, 0.0)])
    assert m.pairs == [] and m.false_positives == [0] and m.misses == [0]
    m = match_frame([pred(5, 2.0, 0.9)], [gt(1, 0.0)])
    assert len(m.pairs) == 1  # exactly at the threshold still matches
    with pytest.raises(ValueError):
        match_frame([], [], threshold=0.0)


def test_distance_tie_prefers_previous_assignment():
    gts = [gt(1, -1.0), gt(2, 1.0)]
    m = match_frame([pred(9, 0.0, 0.9)], gts, last_track={2: 9})
    assert m.pairs[0][1] == 1
    m = match_frame([pred(9, 0.0, 0.9)], gts)
    assert m.pairs[0][1] == 0


def test_amota_sweep_golden():
    results, scenes = sweep_case()
    rows = recall_sweep(results, scenes)
    assert len(rows) == 40
    cutoffs = [r["cutoff"] for r in rows]
    assert cutoffs == [0.9] * 10 + [0.8] * 10 + [0.7] * 10 + [0.6] * 10
    motar = [r["MOTAR"] for r in rows]
    assert motar[:20] == [1.0] * 20
    assert all(abs(v - 2.0 / 3.0) < 1e-15 for v in motar[20:30])
    assert motar[30:] == [0.5] * 10
    amota, amotp = amota_amotp(results, scenes)
    assert abs(amota - 19.0 / 24.0) < 1e-12
    assert abs(amotp - 0.35) < 1e-12


def test_unreached_recall_scores_zero_and_threshold_precision():
    scene = [[gt(1, 0.0), gt(2, 10.0)]]
    res = [[pred(1, 0.0, 0.9)]]
    rows = recall_sweep([res], [scene])
    assert all(r["achieved"] for r in rows[:20])
    assert all(not r["achieved"] and r["MOTAR"] == 0.0 and r["MOTP"] == 2.0 for r in rows[20:])
    amota, amotp = amota_amotp([res], [scene])
    assert amota == 0.5 and amotp == 1.0


def test_perfect_tracker():
    results, scenes = perfect_case()
    rep = evaluate(results, scenes)
    assert (rep.AMOTA, rep.MOTA, rep.IDS, rep.FP, rep.FN, rep.AMOTP) == (1.0, 1.0, 0, 0, 0, 0.0)


def test_empty_results():
    scene = [[gt(1, 0.0)], [gt(1, 0.0)]]
    rep = evaluate([[[], []]], [scene])
    assert (rep.AMOTA, rep.Recall, rep.FN, rep.AMOTP) == (0.0, 0.0, 2, 2.0)


def test_shape_mismatch_is_an_error():
    with pytest.raises(ValueError):
        count_errors([[[]]], [[[gt(1, 0.0)], [gt(1, 0.0)]]])
    with pytest.raises(ValueError):
        count_errors([], [[[gt(1, 0.0)]]])


def test_result_file_round_trip(tmp_path):
    results, scenes = sweep_case()
    write_track_results(tmp_path / "t.csv", results)
    back = read_track_results(tmp_path / "t.csv", [4])
    assert evaluate(back, scenes) == evaluate(results, scenes)
    (tmp_path / "bad.csv").write_text("nope\n")
    with pytest.raises(ValueError):
        read_track_results(tmp_path / "bad.csv", [1])


frame_strategy = st.lists(st.tuples(st.integers(0, 4), st.floats(-5, 5), st.floats(0.01, 1.0)), max_size=5)


@settings(max_examples=100, deadline=None)
@given(st.lists(frame_strategy, min_size=1, max_size=5), st.integers(0, 10_000))
def test_metric_invariants(pred_frames, seed):
    rng = np.random.default_rng(seed)
    scene = [[gt(i, float(rng.uniform(-5, 5))) for i in range(int(rng.integers(0, 4)))] for _ in pred_frames]
    res = [[pred(t, x, s) for t, x, s in f] for f in pred_frames]
    c = count_errors([res], [scene])
    assert c.tp + c.fn == c.n_gt
    assert c.tp + c.fp == sum(len(f) for f in res)
    assert c.ids <= max(0, c.tp - 1)
    rep = evaluate([res], [scene])
    assert 0.0 <= rep.AMOTA <= 1.0
    assert rep.MOTA <= 1.0
    assert 0.0 <= rep.AMOTP <= 2.0
