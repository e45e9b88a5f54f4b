import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.special import erf, erfinv

from qpgamma.analysis import (compute_psd, detect_jumps_threshold, digitize, detect_steps_singleshot, diff_series,
                              fit_lorentzian, fit_tomography, hmm_decode, lorentzian, mask_alpha, mask_trace,
                              read_jumps_csv, shortest_from_bias, tomography_response, wrap, write_jumps_csv)
from qpgamma.errors import DataError, NumericalError
from qpgamma.stats import jump_rate
from qpgamma.synth import synth_parity_trace, synth_singleshot_series, synth_tomography_stream

N_EXT = np.arange(40) / 40


# ---------------------------------------------------------------------------
# tomography


@pytest.mark.parametrize("delta", [0.0, 0.05, 0.3, 0.4999])
def test_noiseless_fit_recovers_offset(delta):
    fit = fit_tomography(N_EXT, tomography_response(N_EXT + delta, 0.95, 0.8))
    err = abs(wrap((fit.delta - delta) / 0.5)) * 0.5
    assert err < 1e-6
    assert fit.nu == pytest.approx(0.8, abs=1e-6) and fit.d == pytest.approx(0.95, abs=1e-6)


def test_zero_modulation_fails():
    with pytest.raises(NumericalError):
        fit_tomography(N_EXT, np.full(40, 0.4) + 1e-3 * np.sin(np.arange(40)))


def test_short_scan_rejected():
    with pytest.raises(DataError):
        fit_tomography(np.linspace(0, 0.2, 10), np.zeros(10))


def test_wrap_examples():
    assert wrap(0.7) == pytest.approx(-0.3)
    assert diff_series([0.0, 0.7])[0] == pytest.approx(-0.3)
    assert wrap(0.5) == 0.5 and wrap(-0.5) == 0.5


@settings(max_examples=1000, deadline=None)
@given(st.floats(-100, 100))
def test_wrap_idempotent_and_odd(x):
    w = wrap(x)
    assert wrap(w) == w
    if abs(abs(w) - 0.5) > 1e-9:
        assert wrap(-x) == pytest.approx(-w, abs=1e-9)


def test_threshold_examples():
    assert [j.index for j in detect_jumps_threshold([0.20, 0.10, 0.7])] == [0, 2]
    j = detect_jumps_threshold([0.7])[0]
    assert j.magnitude == pytest.approx(-0.3)
    assert all(0.15 < abs(j.magnitude) <= 0.5 for j in detect_jumps_threshold(np.linspace(-3, 3, 601)))


@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), shift=st.integers(-5, 5))
def test_jumps_invariant_under_integer_offsets(seed, shift):
    r = np.random.default_rng(seed)
    raw = np.cumsum(r.uniform(-0.6, 0.6, 50))
    k = r.integers(-3, 4, 50)
    a = detect_jumps_threshold(np.diff(raw))
    b = detect_jumps_threshold(np.diff(raw + k + shift))
    assert [(j.index, round(j.magnitude, 9)) for j in a] == [(j.index, round(j.magnitude, 9)) for j in b]


def test_jump_csv_round_trip(tmp_path):
    jumps = detect_jumps_threshold([0.2, -0.4, 0.01], qubit="Q2")
    write_jumps_csv(jumps, tmp_path / "j.csv")
    assert read_jumps_csv(tmp_path / "j.csv") == jumps


@pytest.mark.parametrize("gamma_c,duration", [(0.01, 3000.0), (0.1, 1000.0)])
def test_tomography_jump_rate_closed_loop(gamma_c, duration):
    # the response is 0.5-periodic, so planted sizes are chosen to alias above threshold
    sizes = np.array([-0.3, -0.2, 0.2, 0.3, 0.7, -0.8])
    assert np.all(np.abs(0.5 * wrap(sizes / 0.5)) > 0.15)
    s = synth_tomography_stream(gamma_c, duration, seed=3, scan_period=0.5, magnitudes=sizes)
    deltas = [fit_tomography(sc.n_ext, sc.p1).delta for sc in s.scans]
    jumps = detect_jumps_threshold(diff_series(deltas, period=0.5))
    est = jump_rate(jumps, duration)
    # jumps sharing one scan interval add up before the next scan sees them
    truth = detect_jumps_threshold(diff_series([sc.true_delta for sc in s.scans], period=0.5))
    assert [j.index for j in jumps] == [j.index for j in truth]
    assert len(truth) >= 0.9 * len(s.jump_times)
    assert est.lower <= gamma_c <= est.upper


# ---------------------------------------------------------------------------
# single-shot step detection


def test_step_detected_at_index():
    errs, mags = [], []
    for seed in range(100):
        k = 400 + 41 * seed
        s = synth_singleshot_series(5000, 1e-3, [k], [0.2], seed=seed)
        found = detect_steps_singleshot(s.samples, 1.0, 0.8)
        errs.append(min((abs(f.index - k) for f in found), default=10**6))
        mags.extend(f.magnitude for f in found if abs(f.index - k) <= 10)
    errs = np.array(errs)
    # single-shot outcomes are binary, so the location is statistical
    assert np.mean(errs <= 10) >= 0.95
    assert np.median(errs) <= 3
    assert np.mean(mags) == pytest.approx(0.2, abs=0.01)


def test_step_magnitude_is_shortest_distance():
    mags = []
    for seed in range(30):
        s = synth_singleshot_series(5000, 1e-3, [2000], [0.3], seed=seed)
        mags.extend(f.magnitude for f in detect_steps_singleshot(s.samples, 1.0, 0.8))
    assert shortest_from_bias(0.3) == pytest.approx(0.2)
    assert all(0 < m <= 0.25 for m in mags)
    assert np.mean(mags) == pytest.approx(0.2, abs=0.01)


def test_step_false_alarm_rate():
    n = 2_000_000
    s = synth_singleshot_series(n, 1e-3, [], [], seed=11)
    assert len(detect_steps_singleshot(s.samples, 1.0, 0.8)) < n * 1e-5


def test_steps_stay_inside_reset_segments():
    s = synth_singleshot_series(15_000, 1e-3, [7000], [0.2], seed=5)
    found = detect_steps_singleshot(s.samples, 1.0, 0.8)
    # the bias reset at 10000 re-zeroes the offset but is not a jump
    assert [abs(f.index - 7000) <= 10 for f in found] == [True]


# ---------------------------------------------------------------------------
# PSD


def _digital(gamma, F, n=1_000_000, dt=1e-3, seed=0):
    return synth_parity_trace(gamma, F, dt, n, seed=seed).samples


def test_psd_recovers_rate():
    fit = fit_lorentzian(compute_psd(_digital(10.0, 0.9), 1e-3))
    assert fit.gamma == pytest.approx(10.0, rel=0.10)
    assert fit.resolvable
    assert 0 < fit.fidelity <= 1


def test_white_noise_not_resolvable():
    x = np.random.default_rng(2).standard_normal(200_000)
    spec = compute_psd(x, 1e-3)
    try:
        fit = fit_lorentzian(spec, strict=False)
    except NumericalError:
        return
    assert not fit.resolvable
    with pytest.raises(NumericalError):
        fit_lorentzian(spec, strict=True)


def test_psd_parseval():
    x = _digital(10.0, 0.9, n=400_000, seed=3)
    dt = 1e-3
    spec = compute_psd(x, dt)
    fit = fit_lorentzian(spec)
    fn = 0.5 / dt
    area, _ = integrate.quad(lorentzian, 0, fn, args=(fit.gamma, fit.A, fit.B), limit=200)
    var = np.var(digitize(x))
    assert area == pytest.approx(var, rel=0.05)


def test_psd_needs_enough_samples():
    with pytest.raises(DataError):
        compute_psd(np.zeros(1000), 1e-3)


# ---------------------------------------------------------------------------
# masking and HMM


def _alpha_oracle(F, n=40, s=3.29):
    mpmath.mp.dps = 40
    e = mpmath.erfinv(mpmath.mpf(F))
    return float(mpmath.sqrt((1 + mpmath.mpf(s) ** 2 / 4) / (1 + 2 * (e * mpmath.sqrt(n)) ** 2)))


def test_alpha_reference_value():
    assert _alpha_oracle(0.9) == pytest.approx(0.184, abs=5e-4)
    assert mask_alpha(0.9) == pytest.approx(_alpha_oracle(0.9), abs=1e-12)


def test_alpha_matches_oracle_over_range():
    for F in np.linspace(0.5, 0.999, 500):
        assert abs(mask_alpha(F) - _alpha_oracle(F)) < 1e-6


EPISODES = [(200_000, 230_000), (600_000, 630_000)]


@pytest.mark.parametrize("gamma_p", [1.0, 2.0])
def test_degeneracy_masked_and_good_data_kept(gamma_p):
    for seed in range(3):
        tr = synth_parity_trace(gamma_p, 0.9, 1e-3, 1_000_000, seed=seed, degeneracy=EPISODES)
        m = mask_trace(tr.samples, gamma_p, 1e-3, 0.9)
        assert m[tr.degenerate].mean() >= 0.90
        assert (~m[~tr.degenerate]).mean() >= 0.95


def test_masking_monotone_in_noise():
    F = 0.9
    for seed in range(3):
        fr = []
        for noise in (1.0, 1.25, 1.5, 2.0, 3.0, 5.0):
            tr = synth_parity_trace(1.0, F, 1e-3, 1_000_000, seed=seed, degeneracy=EPISODES, noise=noise)
            # fidelity of the noisier readout at the same state separation
            f_eff = float(erf(erfinv(F) / noise))
            fr.append((~mask_trace(tr.samples, 1.0, 1e-3, f_eff)).mean())
        assert np.all(np.diff(fr) <= 0), fr


def test_mask_window_too_long():
    with pytest.raises(DataError):
        mask_trace(np.zeros(100), 1.0, 1e-3, 0.9)


def test_hmm_identity_on_noiseless_states():
    tr = synth_parity_trace(20.0, 1.0, 1e-3, 50_000, seed=6)
    dec = hmm_decode(tr.states.astype(float), None, 1e-3)
    assert np.array_equal(dec.states, tr.states)


def test_hmm_alternating_trace():
    x = np.tile(np.r_[np.zeros(50), np.ones(50)], 100)
    dec = hmm_decode(x, None, 1e-3)
    assert np.array_equal(dec.states, x.astype(np.int8))
    assert dec.switching_rate == pytest.approx(199 / (x.size * 1e-3))


def test_hmm_recovers_rate():
    tr = synth_parity_trace(20.0, 0.95, 1e-3, 500_000, seed=7)
    dec = hmm_decode(tr.samples, None, 1e-3, gamma_prior=15.0)
    assert dec.corrected_rate == pytest.approx(20.0, rel=0.10)


def test_hmm_masked_segments_decoded_separately():
    tr = synth_parity_trace(5.0, 0.99, 1e-3, 20_000, seed=8)
    mask = np.zeros(tr.samples.size, bool)
    mask[5000:8000] = True
    dec = hmm_decode(tr.samples, mask, 1e-3)
    assert np.all(dec.states[mask] == -1)
    assert dec.unmasked_samples == 17_000


def test_hmm_fully_masked():
    with pytest.raises(DataError):
        hmm_decode(np.zeros(100), np.ones(100, bool), 1e-3)
