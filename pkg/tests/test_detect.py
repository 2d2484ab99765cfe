import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aqualoc import detect
from aqualoc.detect import ChannelEstimate, DirectPath, NoDirectPathError
from aqualoc.physics import ChannelProfile, ChannelSynthConfig, propagate, synth_channel


def embed_at(preamble, offset, total, noise_std=0.0, seed=0):
    x = np.zeros(total)
    x[offset:offset + preamble.size] = preamble
    if noise_std:
        x += np.random.default_rng(seed).normal(0, noise_std, total)
    return x


def estimate_from(mag, noise=0.0):
    taps = np.asarray(mag, dtype=complex)
    return ChannelEstimate(taps=taps, noise_floor=noise)


def test_cross_correlate_clean(preamble):
    x = embed_at(preamble, 5000, 20000)
    curve, cands = detect.cross_correlate(x, preamble)
    assert cands[0] == 5000
    assert curve[5000] == pytest.approx(1.0)


def test_cross_correlate_low_snr(preamble):
    # -5 dB: noise power 10^0.5 times the preamble power
    noise_std = np.sqrt(np.mean(preamble ** 2) * 10 ** 0.5)
    hits = 0
    for seed in range(500):
        x = embed_at(preamble, 3000, 16000, noise_std, seed)
        _, cands = detect.cross_correlate(x, preamble)
        hits += 3000 in cands[:5].tolist()
    assert hits >= 475


def test_cross_correlate_short_stream(preamble):
    with pytest.raises(ValueError):
        detect.cross_correlate(preamble[:100], preamble)


def test_auto_correlate_clean_and_room(config, preamble):
    x = embed_at(preamble, 1000, 12000)
    assert detect.auto_correlate(x, 1000, config) >= 0.99
    with pytest.raises(ValueError):
        detect.auto_correlate(x, 5000, config)


def test_auto_correlate_noise_rejected(config):
    passes = sum(detect.auto_correlate(np.random.default_rng(s).normal(size=config.length), 0, config) > 0.35
                 for s in range(1000))
    assert passes <= 10


def test_auto_correlate_multipath_low_snr(config, preamble):
    prof = synth_channel(5, ChannelSynthConfig(num_taps=5))
    noise_std = np.sqrt(np.mean(preamble ** 2))
    for seed in range(20):
        y = propagate(preamble, 0.0, ChannelProfile(prof.taps, noise_std=noise_std), seed=seed)
        assert detect.auto_correlate(y, 0, config) > 0.35


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=200).filter(lambda h: np.abs(h).max() > 0.1))
def test_auto_correlate_channel_invariant(config, preamble, h):
    y = np.convolve(preamble, h)
    assert detect.auto_correlate(y, 0, config) >= 0.99


def test_pure_noise_not_detected(config, preamble):
    for seed in range(50):
        x = np.random.default_rng(seed).normal(size=20000)
        assert detect.detect_preamble(x, config, preamble) is None


def test_estimate_identity(config, preamble):
    x = embed_at(preamble, 0, preamble.size + 10)
    est = detect.estimate_channel(x, 0, config)
    assert np.allclose(est.freq_response[config.zc_bins], 1.0)
    assert np.argmax(est.magnitude) == 0
    assert est.magnitude.max() == pytest.approx(1.0)
    assert est.taps.size == 1920
    assert est.noise_floor == pytest.approx(np.mean(est.magnitude[-100:] ** 2))


def test_estimate_two_tap_ratio(config, preamble):
    y = propagate(preamble, 0.0, ChannelProfile(taps=((0, 1.0), (50, 0.5))))
    est = detect.estimate_channel(y, 0, config)
    mag = est.magnitude
    assert np.argmax(mag) == 0
    assert mag[50] == pytest.approx(0.5, rel=0.05)
    assert detect.is_peak(mag, 50)


def test_estimate_shift(config, preamble):
    x = embed_at(preamble, 300, 12000)
    a = detect.estimate_channel(x, 300, config)
    b = detect.estimate_channel(x, 290, config)
    assert np.argmax(b.magnitude) - np.argmax(a.magnitude) == 10


def test_estimate_out_of_range(config, preamble):
    with pytest.raises(ValueError):
        detect.estimate_channel(preamble, 5, config)


def test_ls_resynthesis_exact(config, preamble):
    y = propagate(preamble, 0.0, ChannelProfile(taps=((0, 0.7), (13, -0.4), (120, 0.3))))
    est = detect.estimate_channel(y, 0, config)
    X = config.reference_spectrum()
    bins = config.zc_bins
    for k, sign in enumerate(config.pn_signs):
        start = k * config.block_len + config.cp_len
        Y = np.fft.fft(y[start:start + config.symbol_len])
        assert np.allclose(Y[bins], sign * X[bins] * est.freq_response[bins], atol=1e-9)


def test_is_peak_examples():
    delta = np.zeros(20)
    delta[0] = 1
    assert detect.is_peak(delta, 0)
    flat = np.ones(20)
    assert not any(detect.is_peak(flat, n) for n in range(20))
    tie = np.zeros(20)
    tie[5] = tie[6] = 1
    assert detect.is_peak(tie, 5) and not detect.is_peak(tie, 6)
    assert detect.is_peak(np.r_[0, 0, 0, 0, 1.0], 4)


def peaks_at(positions, size=400, height=0.9):
    mag = np.zeros(size)
    for p in positions:
        mag[p] = height
    mag[300] = 1.0
    return mag


def test_find_direct_path_examples():
    assert detect.max_mic_offset() == pytest.approx(4.704)
    path = detect.find_direct_path(estimate_from(peaks_at([100])), estimate_from(peaks_at([103])))
    assert (path.n, path.m, path.tau_los) == (100, 103, 101.5)
    path = detect.find_direct_path(estimate_from(peaks_at([90, 200])), estimate_from(peaks_at([120, 202])))
    assert (path.n, path.m) == (200, 202)


def test_find_direct_path_threshold_and_noise():
    weak = peaks_at([100], height=0.25)
    path = detect.find_direct_path(estimate_from(weak, noise=0.1), estimate_from(weak, noise=0.1))
    assert path.n == 300
    with pytest.raises(NoDirectPathError):
        detect.find_direct_path(estimate_from(np.full(400, 0.1), 0.01), estimate_from(np.full(400, 0.1), 0.01))


def test_find_direct_path_prefers_small_offset_on_tie():
    h1 = estimate_from(peaks_at([100, 104]))
    h2 = estimate_from(peaks_at([102]))
    path = detect.find_direct_path(h1, h2)
    assert (path.n, path.m) == (100, 102)


channel_mags = st.lists(st.floats(0, 1), min_size=30, max_size=200)


@settings(max_examples=200)
@given(channel_mags, channel_mags, st.floats(0, 0.3))
def test_direct_path_respects_mic_constraint(a, b, lam):
    h1, h2 = estimate_from(a, 0.01), estimate_from(b, 0.01)
    try:
        path = detect.find_direct_path(h1, h2, lam=lam)
    except NoDirectPathError:
        return
    assert abs(path.n - path.m) <= detect.max_mic_offset()
    assert detect.is_peak(a, path.n) and detect.is_peak(b, path.m)


@pytest.mark.parametrize("distance", [10.0, 15.0, 22.7, 35.0])
def test_end_to_end_single_tap(config, preamble, distance):
    y = propagate(preamble, distance, ChannelProfile())
    y = np.pad(y, (0, 2000))
    hit = detect.locate([y], config)
    assert abs(hit.arrival - round(distance * 44100 / 1500)) <= 1


def test_end_to_end_dual_mic(config, preamble):
    d1, d2 = 20.0, 20.0 + 0.12
    s1 = propagate(preamble, d1, ChannelProfile())
    s2 = propagate(preamble, d2, ChannelProfile())
    n = max(s1.size, s2.size) + 500
    hit = detect.locate([np.pad(s1, (0, n - s1.size)), np.pad(s2, (0, n - s2.size))], config)
    true = (round(d1 * 44100 / 1500) + round(d2 * 44100 / 1500)) / 2
    assert abs(hit.arrival - true) <= 1
    assert hit.direct_path.m - hit.direct_path.n == round(d2 * 44100 / 1500) - round(d1 * 44100 / 1500)


@pytest.mark.parametrize("seed", range(10))
def test_attenuated_direct_path_found(config, preamble, seed):
    prof = synth_channel(seed, ChannelSynthConfig(num_taps=5, direct_attenuation=0.4, min_gap=15, noise_std=0.02))
    y = np.pad(propagate(preamble, 12.0, prof, seed=seed), (0, 3000))
    hit = detect.locate([y], config)
    assert abs(hit.arrival - round(12.0 * 44100 / 1500)) <= 1


def test_buffer_examples():
    assert detect.calibrate_offset(1000, 400).offset_samples == 600
    assert detect.calibrate_offset(7, 7).offset_samples == 0
    cal = detect.calibrate_offset(1000, 400)
    assert detect.reply_index(10000, cal, 1.0) == 54700
    assert detect.reply_index(123, detect.calibrate_offset(5, 5), 0.0) == 123
    assert detect.reply_index(0, detect.calibrate_offset(0, 300), 0.5) == 21750


def test_drift_examples():
    assert detect.drift_error(50e-6, 50e-6, 1.0, 12345) == pytest.approx(-50e-6)
    assert detect.drift_error(0, 0, 1.0, 99999) == 0
    assert detect.drift_error(0, 10e-6, 1.0, 44100 * 60) == pytest.approx(600e-6)


@given(st.floats(-1e-4, 1e-4), st.floats(-1e-4, 1e-4), st.floats(0, 10), st.floats(0, 1e7), st.floats(0.5, 3))
def test_drift_linear(alpha, beta, t, elapsed, k):
    base = detect.drift_error(alpha, beta, t, elapsed)
    assert detect.drift_error(k * alpha, k * beta, t, elapsed) == pytest.approx(k * base, abs=1e-15)
    assert detect.drift_error(alpha, alpha, k * t, elapsed) == pytest.approx(-alpha * k * t, abs=1e-15)
