import itertools

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.interpolate import make_smoothing_spline

from diffeo_pa import prep
from diffeo_pa.errors import DegenerateDataError, NumericError, ValidationError
from diffeo_pa.prep import (
    N_MINUTES,
    WINDOW_START,
    DiurnalCurve,
    MinuteRecord,
    ScalingParams,
    Stage,
    average_daily_profile,
    compute_vm,
    delta_net_auc,
    filter_valid_days,
    fit_scaling,
    minute_grid,
    net_auc,
    scale_curve,
    scaled_grid,
    smooth_curve,
    unscale_curve,
)


def day_frame(day, nonwear=0, value=10.0, pid="P1", visit="Baseline"):
    """One in-window day with the first ``nonwear`` minutes flagged non-wear."""
    wear = np.ones(N_MINUTES, dtype=int)
    wear[:nonwear] = 0
    return pd.DataFrame(
        {
            "participant_id": pid,
            "visit": visit,
            "day": day,
            "minute": np.arange(WINDOW_START, WINDOW_START + N_MINUTES),
            "va": value * wear,
            "ha": 0.0,
            "ppa": 0.0,
            "wear": wear,
        }
    )


def curve(values, stage=Stage.SCALED):
    grid = scaled_grid() if stage is Stage.SCALED else minute_grid()
    return DiurnalCurve("P1", "Baseline", grid, np.broadcast_to(values, (N_MINUTES,)).astype(float), stage)


# --- vector magnitude -------------------------------------------------------


@pytest.mark.parametrize("axes, expected", [((3, 4, 0), 5.0), ((0, 0, 0), 0.0), ((1, 2, 2), 3.0)])
def test_vm_examples(axes, expected):
    assert compute_vm(*axes) == expected


@pytest.mark.parametrize("bad", [(-1, 0, 0), (np.nan, 1, 1), (np.inf, 0, 0)])
def test_vm_rejects_invalid(bad):
    with pytest.raises(ValidationError):
        compute_vm(*bad)


@given(
    st.tuples(*[st.floats(0, 1e4, allow_nan=False)] * 3),
    st.floats(0, 100, allow_nan=False),
)
def test_vm_permutation_and_homogeneity(axes, alpha):
    base = compute_vm(*axes)
    for perm in itertools.permutations(axes):
        assert compute_vm(*perm) == pytest.approx(base, rel=1e-12, abs=1e-12)
    scaled = compute_vm(*(alpha * a for a in axes))
    assert scaled == pytest.approx(alpha * base, rel=1e-12, abs=1e-9)


def test_vm_vectorised():
    out = compute_vm(np.array([3.0, 1.0]), np.array([4.0, 2.0]), np.array([0.0, 2.0]))
    np.testing.assert_array_equal(out, [5.0, 3.0])


# --- valid days -------------------------------------------------------------


def test_full_wear_day_retained():
    res = filter_valid_days(pd.concat([day_frame(d) for d in range(1, 5)]))
    assert res.days == [1, 2, 3, 4]
    assert not res.excluded


def test_three_retained_days_excluded():
    res = filter_valid_days(pd.concat([day_frame(d) for d in range(1, 4)]))
    assert res.excluded
    assert res.reason == "too few valid days"


@pytest.mark.parametrize("nonwear, kept", [(239, True), (240, False), (241, False)])
def test_nonwear_boundary(nonwear, kept):
    df = pd.concat([day_frame(1, nonwear)] + [day_frame(d) for d in range(2, 6)])
    assert (1 in filter_valid_days(df).days) is kept


def test_rule_conflict_at_exactly_four_hours():
    # 240 non-wear minutes means 840 wear minutes: the wear rule alone would keep it
    df = day_frame(1, 240)
    assert df["wear"].sum() == 840
    assert filter_valid_days(pd.concat([df] + [day_frame(d) for d in range(2, 6)])).days == [2, 3, 4, 5]


def test_missing_minutes_count_as_nonwear():
    df = day_frame(1)
    df = df[df["minute"] >= WINDOW_START + 300]  # 300 minutes never recorded
    full = [day_frame(d) for d in range(2, 6)]
    assert 1 not in filter_valid_days(pd.concat([df] + full)).days


def test_out_of_window_minutes_ignored():
    extra = day_frame(1).assign(minute=lambda d: d["minute"] - WINDOW_START)  # 0..1079, mostly before 6:00
    extra = extra[extra["minute"] < WINDOW_START]
    df = pd.concat([day_frame(d) for d in range(1, 5)] + [extra])
    assert filter_valid_days(df).days == [1, 2, 3, 4]


def test_empty_records_rejected():
    with pytest.raises(ValidationError):
        filter_valid_days(day_frame(1).iloc[:0])


def test_duplicate_minute_rejected():
    df = pd.concat([day_frame(1), day_frame(1).iloc[:1]])
    with pytest.raises(ValidationError):
        filter_valid_days(df)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_verdict_ignores_record_order(seed):
    gaps = [0, 250, 100, 0, 500, 30]
    df = pd.concat([day_frame(d + 1, g) for d, g in enumerate(gaps)], ignore_index=True)
    order = np.random.default_rng(seed).permutation(len(df))
    a = filter_valid_days(df)
    b = filter_valid_days(df.iloc[order])
    assert a.days == b.days and a.reason == b.reason
    np.testing.assert_array_equal(a.vm, b.vm)


def test_minute_record_validation():
    MinuteRecord("P", "W1", 1, 0, (0.0, 1.0, 2.0), True)
    with pytest.raises(ValidationError):
        MinuteRecord("P", "W1", 1, 1440, (0.0, 1.0, 2.0), True)
    with pytest.raises(ValidationError):
        MinuteRecord("P", "W3", 1, 10, (0.0, 1.0, 2.0), True)
    with pytest.raises(ValidationError):
        MinuteRecord("P", "W1", 1, 10, (0.0, -1.0, 2.0), True)


def test_records_as_dataclasses():
    recs = [
        MinuteRecord("P", "W1", d, WINDOW_START + m, (3.0, 4.0, 0.0), True)
        for d in range(1, 5)
        for m in range(N_MINUTES)
    ]
    res = filter_valid_days(recs)
    assert res.days == [1, 2, 3, 4]
    np.testing.assert_array_equal(average_daily_profile(res).values, 5.0)


# --- daily profile ----------------------------------------------------------


def test_profile_mean_of_constants():
    vm = np.vstack([np.full(N_MINUTES, 10.0), np.full(N_MINUTES, 20.0)])
    out = average_daily_profile((vm, np.ones_like(vm, dtype=bool)))
    np.testing.assert_array_equal(out.values, 15.0)
    assert out.stage is Stage.RAW_MEAN


def test_profile_wear_weighted():
    vm = np.zeros((3, N_MINUTES))
    vm[:, 100] = [0.0, 0.0, 30.0]
    wear = np.ones((3, N_MINUTES), dtype=bool)
    wear[0, 100] = False
    assert average_daily_profile((vm, wear)).values[100] == 15.0


def test_profile_single_day_rejected():
    with pytest.raises(ValidationError):
        average_daily_profile((np.ones((1, N_MINUTES)), np.ones((1, N_MINUTES), dtype=bool)))


def test_profile_interpolates_uncovered_minutes():
    vm = np.tile(np.arange(N_MINUTES, dtype=float), (2, 1))
    wear = np.ones_like(vm, dtype=bool)
    wear[:, 500:510] = False
    wear[:, :3] = False
    out = average_daily_profile((vm, wear)).values
    np.testing.assert_allclose(out[500:510], np.arange(500, 510))
    np.testing.assert_array_equal(out[:3], 3.0)  # flat extrapolation at the edge


# --- smoothing --------------------------------------------------------------


def test_constant_and_line_pass_through():
    t = minute_grid()
    for values in (np.full(N_MINUTES, 7.5), 0.3 * t - 2.0):
        out = smooth_curve(curve(values, Stage.RAW_MEAN))
        np.testing.assert_allclose(out.values, values, rtol=0, atol=1e-8 * max(1, np.abs(values).max()))
        assert out.stage is Stage.SMOOTHED


@pytest.mark.parametrize("lam", [1e-2, 1e3, 1e8])
def test_null_space_for_any_lambda(lam):
    t = minute_grid()
    sm = prep.get_smoother(t)
    line = -1.5 * t + 40.0
    np.testing.assert_allclose(sm.smooth(line, lam), line, atol=1e-7)


def test_smoother_trace_hits_target_df():
    grid = minute_grid()
    lam = prep.smoothing_lambda(grid, 25.0)
    S = prep.get_smoother(grid).matrix(lam)
    assert abs(np.trace(S) - 25.0) < 0.01


def test_fit_matches_scipy_smoothing_spline():
    # same penalised criterion, independently implemented
    rng = np.random.default_rng(3)
    grid = minute_grid()
    y = np.sin(grid / 120.0) * 50 + rng.normal(0, 10, grid.size)
    lam = prep.smoothing_lambda(grid, 25.0)
    ours = smooth_curve(curve(y, Stage.RAW_MEAN)).values
    ref = make_smoothing_spline(grid, y, lam=lam)(grid)
    np.testing.assert_allclose(ours, ref, rtol=0, atol=1e-8 * np.abs(y).max())


def test_trace_matches_scipy_smoother_matrix_small_grid():
    x = np.linspace(0.0, 1.0, 120)
    sm = prep.SplineSmoother(x)
    lam = sm.lambda_for_df(10.0)
    S = np.column_stack([make_smoothing_spline(x, e, lam=lam)(x) for e in np.eye(x.size)])
    assert np.trace(S) == pytest.approx(10.0, abs=0.01)
    np.testing.assert_allclose(sm.matrix(lam), S, atol=1e-9)


def test_unattainable_df_reports_bracket():
    with pytest.raises(NumericError, match="not bracketed"):
        prep.SplineSmoother(minute_grid()).lambda_for_df(1.5)


# --- scaling ----------------------------------------------------------------


def test_scaling_two_constant_curves():
    # 2160 values, half 0 and half 2: mean 1, sample variance 2160 / 2159
    p = fit_scaling([curve(0.0, Stage.SMOOTHED), curve(2.0, Stage.SMOOTHED)])
    assert p.grand_mean == 1.0
    assert p.grand_sd == pytest.approx(np.sqrt(2160 / 2159), rel=1e-14)
    assert p.grand_sd == pytest.approx(1.0, abs=3e-4)


def test_scaling_degenerate():
    with pytest.raises(DegenerateDataError):
        fit_scaling([curve(3.0, Stage.SMOOTHED), curve(3.0, Stage.SMOOTHED)])


def test_scaling_symmetric_pattern_has_zero_mean():
    v = np.tile([-1.0, 1.0], N_MINUTES // 2)
    assert fit_scaling([curve(v, Stage.SMOOTHED), curve(-v, Stage.SMOOTHED)]).grand_mean == 0.0


def test_scale_examples():
    params = ScalingParams(100.0, 25.0)
    values = np.full(N_MINUTES, 100.0)
    values[1] = 200.0
    out = scale_curve(curve(values, Stage.SMOOTHED), params)
    assert out.values[0] == 0.0 and out.values[1] == 1.0
    assert out.grid[0] == -1.0 and out.grid[-1] == 1.0
    assert out.stage is Stage.SCALED


@given(st.floats(-1e3, 1e3), st.floats(0.1, 1e3), st.integers(0, 2**32 - 1))
def test_scale_round_trip(mean, sd, seed):
    y = np.random.default_rng(seed).normal(mean, sd, N_MINUTES)
    c = curve(y, Stage.SMOOTHED)
    back = unscale_curve(scale_curve(c, ScalingParams(mean, sd)), ScalingParams(mean, sd))
    np.testing.assert_allclose(back.values, y, rtol=1e-12, atol=1e-12 * max(1.0, abs(mean)))
    np.testing.assert_allclose(back.grid, c.grid, rtol=1e-12)


# --- net AUC ----------------------------------------------------------------


@pytest.mark.parametrize("values, expected", [(0.0, 0.0), (0.7, 1.4), (scaled_grid(), 0.0)])
def test_net_auc_examples(values, expected):
    assert net_auc(curve(values)) == pytest.approx(expected, abs=1e-12)


def test_net_auc_requires_scaled():
    with pytest.raises(ValidationError):
        net_auc(curve(1.0, Stage.SMOOTHED))


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1000))
def test_net_auc_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    f, g = rng.normal(size=N_MINUTES), rng.normal(size=N_MINUTES)
    lhs = net_auc(curve(a * f + b * g))
    rhs = a * net_auc(curve(f)) + b * net_auc(curve(g))
    assert lhs == pytest.approx(rhs, abs=1e-10)


@pytest.mark.parametrize("earlier, later, expected", [(0.3, 0.3, 0.0), (0.0, 0.5, 1.0), (0.5, 0.0, -1.0)])
def test_delta_net_auc_examples(earlier, later, expected):
    assert delta_net_auc(curve(earlier), curve(later)) == pytest.approx(expected, abs=1e-12)


def test_delta_net_auc_grid_mismatch():
    other = DiurnalCurve("P1", "W1", scaled_grid() * 0.5, np.zeros(N_MINUTES), Stage.SCALED)
    with pytest.raises(ValidationError):
        delta_net_auc(curve(0.0), other)


def test_curve_invariants():
    with pytest.raises(ValidationError):
        DiurnalCurve("P", "W1", np.arange(10.0), np.zeros(10), Stage.RAW_MEAN)
    with pytest.raises(ValidationError):
        DiurnalCurve("P", "W1", minute_grid(), np.zeros(N_MINUTES), Stage.SCALED)


# --- whole stage ------------------------------------------------------------


def test_preprocess_end_to_end():
    frames = []
    for pid, level in (("A", 50.0), ("B", 150.0)):
        for visit in ("Baseline", "W1"):
            frames += [day_frame(d, value=level + d, pid=pid, visit=visit) for d in range(1, 6)]
    frames += [day_frame(d, pid="C") for d in range(1, 3)]  # too few days
    scaled, smoothed, params, excl = prep.preprocess(pd.concat(frames))
    assert sorted(scaled) == [("A", "Baseline"), ("A", "W1"), ("B", "Baseline"), ("B", "W1")]
    assert [e["participant_id"] for e in excl] == ["C"]
    assert params.grand_mean == pytest.approx(103.0)
    assert all(c.stage is Stage.SCALED for c in scaled.values())
    assert prep.transition_pairs(scaled) == [("A", 0, "Baseline", "W1"), ("B", 0, "Baseline", "W1")]


def test_transition_pairs_skip_gaps():
    keys = [("P", "Baseline"), ("P", "W2"), ("Q", "W1"), ("Q", "W2")]
    assert prep.transition_pairs(keys) == [("Q", 1, "W1", "W2")]
