from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_dataset
from dropout_risk.datamodel import Measurement, SyntheticConfig, generate_synthetic
from dropout_risk.preprocess import (
    BinnedSample,
    BinSpec,
    BinTooSmallError,
    DegenerateRangeError,
    EmptyBinsError,
    bin_membership,
    binned_arrays,
    build_binned_dataset,
    choose_group_size,
    median_of_means,
    read_binned_csv,
    sample_bin_spec,
    write_binned_csv,
)


def mom_oracle(values, q):
    """Explicit partition, exact group sums, sorted medians."""
    groups = []
    i = 0
    while i + q <= len(values):
        groups.append(values[i:i + q])
        i += q
    # exact sum rounded once, divided by q, kept inside the group's range
    means = sorted(min(max(float(sum(Fraction(v) for v in g)) / q, min(g)), max(g)) for g in groups)
    n = len(means)
    return means[n // 2] if n % 2 else (means[n // 2 - 1] + means[n // 2]) / 2


def test_sample_bin_spec_width():
    ds = make_dataset([[0.0], [12.0]])
    assert sample_bin_spec(ds, [0], 0).widths == (1.0,)


def test_sample_bin_spec_degenerate_names_parameter():
    with pytest.raises(DegenerateRangeError, match="p1"):
        sample_bin_spec(make_dataset([[0.0, 3.0], [1.0, 3.0]]), [0, 1], 0)


def test_sample_bin_spec_uniform_centres():
    ds = make_dataset([[0.0], [1.0]])
    rng = np.random.default_rng(0)
    centres = [sample_bin_spec(ds, [0], rng).centers[0] for _ in range(10_000)]
    assert abs(np.mean(centres) - 0.5) < 0.02
    assert min(centres) >= 0.0 and max(centres) <= 1.0


def test_membership_centre_and_boundary():
    spec = BinSpec((1.0, 5.0), (2.0, 4.0))
    assert bin_membership(Measurement("X", (1.0, 5.0), 1, 0), spec, [0, 1])
    assert bin_membership(Measurement("X", (2.0, 7.0), 1, 0), spec, [0, 1])  # closed
    eps = 1e-9 * 2.0
    assert not bin_membership(Measurement("X", (2.0 + eps, 5.0), 1, 0), spec, [0, 1])


def test_membership_is_conjunction():
    spec = BinSpec((0.0, 0.0), (1.0, 1.0))
    assert not bin_membership(Measurement("X", (0.1, 0.9), 1, 0), spec, [0, 1])


@pytest.mark.parametrize("N,q", [(4000, 166), (4800, 200)])
def test_choose_group_size(N, q):
    assert choose_group_size(N) == q
    assert N // q - 1 == 23


def test_choose_group_size_too_small():
    with pytest.raises(BinTooSmallError):
        choose_group_size(3999)


@pytest.mark.parametrize("values,q,expected", [
    ([1, 1, 1, 1], 2, 1.0),
    ([0, 0, 0, 0, 10, 10], 2, 0.0),
])
def test_median_of_means_examples(values, q, expected):
    assert median_of_means(values, q) == expected


def test_median_of_means_discards_remainder():
    vals = [0, 0, 1, 1, 5, 5, 1000]  # 3 groups; the 7th value is dropped
    assert median_of_means(vals, 2) == mom_oracle(vals, 2) == 1.0


def test_median_of_means_even_group_count():
    assert median_of_means([1, 2, 3, 4], 1) == 2.5


def test_median_of_means_errors():
    with pytest.raises(ValueError):
        median_of_means([1.0, 2.0], 3)
    with pytest.raises(ValueError):
        median_of_means([1.0], 0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=200), st.integers(1, 50))
def test_median_of_means_within_value_range(values, q):
    q = min(q, len(values))
    m = median_of_means(values, q)
    assert min(values) <= m <= max(values)
    assert m == mom_oracle(values, q)


def test_robust_to_outliers():
    # one contiguous outage burst, as outliers arrive in the generator
    vals = np.full(1000, 0.1)
    start = np.random.default_rng(0).integers(0, 950)
    vals[start:start + 50] = 1.0
    q = 1000 // 24
    assert abs(median_of_means(vals, q) - 0.1) <= 0.02
    assert vals.mean() - 0.1 == pytest.approx(0.045, abs=1e-12)


def test_binned_sample_invariants_asserted():
    with pytest.raises(AssertionError):
        BinnedSample((0.0,), 0.1, 3999, 166)
    with pytest.raises(AssertionError):
        BinnedSample((0.0,), 0.1, 4000, 200)  # only 20 groups


def test_build_zero_target():
    ds = make_dataset([[0.0], [1.0]])
    assert build_binned_dataset(ds, [0], 0) == []


def test_build_no_bins_reports_diagnostics():
    ds = make_dataset(np.linspace(0, 1, 50)[:, None])
    with pytest.raises(EmptyBinsError, match="acceptance rate"):
        build_binned_dataset(ds, [0], 5, max_attempts=100)


def test_build_constant_truth():
    cfg = SyntheticConfig(ground_truth="constant", level=0.1, noise_scale=0.05, n_measurements=200_000, seed=3)
    ds = generate_synthetic(cfg)
    bins = build_binned_dataset(ds, [0, 1, 2], 40, seed=0, max_attempts=20_000)
    assert len(bins) == 40
    assert all(abs(b.p_D - 0.1) < 0.01 for b in bins)


def test_build_matches_brute_force(smooth_state):
    """Sorted-index membership and grouping agree with a full rescan per bin."""
    _, ds = smooth_state
    bins = build_binned_dataset(ds, [0, 1, 2], 10, seed=4)
    p = ds.dropout_probabilities()
    widths = np.array([(hi - lo) / 12 for lo, hi in ds.param_ranges])
    for b in bins:
        c = np.array(b.centers)
        inside = np.all((ds.params >= c - widths / 2) & (ds.params <= c + widths / 2), axis=1)
        vals = p[inside]
        assert b.n_members == len(vals)
        assert b.q == len(vals) // 24
        assert b.p_D == mom_oracle(vals.tolist(), b.q)


def test_build_deterministic_and_batch_independent(smooth_state):
    _, ds = smooth_state
    a = build_binned_dataset(ds, [0, 1, 2], 15, seed=9)
    b = build_binned_dataset(ds, [0, 1, 2], 15, seed=9, batch_size=7)
    assert a == b


def test_shuffle_is_seeded(smooth_state):
    _, ds = smooth_state
    a = build_binned_dataset(ds, [0, 1, 2], 5, seed=2, shuffle=True)
    b = build_binned_dataset(ds, [0, 1, 2], 5, seed=2, shuffle=True)
    plain = build_binned_dataset(ds, [0, 1, 2], 5, seed=2)
    assert a == b
    assert [x.centers for x in a] == [x.centers for x in plain]


def test_median_of_means_beats_mean_on_outlier_bursts(smooth_state):
    cfg, ds = smooth_state
    bins = build_binned_dataset(ds, [0, 1, 2], 60, seed=1)
    p = ds.dropout_probabilities()
    widths = np.array([(hi - lo) / 12 for lo, hi in ds.param_ranges])
    err_mom, err_mean = [], []
    for b in bins:
        c = np.array(b.centers)
        inside = np.all(np.abs(ds.params - c) <= widths / 2, axis=1)
        truth = cfg.truth(c[None])[0]
        err_mom.append(abs(b.p_D - truth) / truth)
        err_mean.append(abs(p[inside].mean() - truth) / truth)
    assert np.mean(err_mom) < np.mean(err_mean)


def test_binned_csv_round_trip(tmp_path):
    samples = [BinnedSample((0.1, 2.0), 0.25, 4000, 166), BinnedSample((1 / 3, -2.5), 0.5, 4800, 200)]
    write_binned_csv(tmp_path / "b.csv", samples)
    assert (tmp_path / "b.csv").read_text().splitlines()[0] == "a_1,a_2,p_D,n_members,q"
    assert read_binned_csv(tmp_path / "b.csv") == samples
    X, y = binned_arrays(samples)
    assert X.shape == (2, 2) and y.tolist() == [0.25, 0.5]
