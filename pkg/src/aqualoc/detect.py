"""Receiver pipeline: preamble detection, LS channel estimation, dual-mic
direct-path selection, and speaker/microphone buffer timing."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.signal import correlate, find_peaks

from .physics import DEFAULT_SOUND_SPEED
from .waveform import PreambleConfig, generate_preamble

DETECTION_THRESHOLD = 0.35
DIRECT_PATH_LAMBDA = 0.2
MIC_SEPARATION_M = 0.16
NOISE_TAPS = 100


class NoDirectPathError(RuntimeError):
    """No tap pair satisfies the direct-path constraints; the link is missing."""


@dataclass
class ChannelEstimate:
    taps: np.ndarray            # complex, max |tap| == 1
    noise_floor: float          # mean power of the last NOISE_TAPS taps
    mic_index: int = 0
    freq_response: np.ndarray | None = None   # raw LS estimate, zero out of band

    @property
    def magnitude(self) -> np.ndarray:
        return np.abs(self.taps)


@dataclass(frozen=True)
class DirectPath:
    n: int      # tap index, mic 1
    m: int      # tap index, mic 2

    @property
    def tau_los(self) -> float:
        return (self.n + self.m) / 2


@dataclass(frozen=True)
class BufferCalibration:
    offset_samples: int
    alpha: float = 0.0
    beta: float = 0.0


def cross_correlate(stream, preamble, threshold_sigma: float = 5.0, min_separation: int = 540):
    """Normalized cross-correlation of ``stream`` against ``preamble``.

    Returns ``(curve, candidates)``. ``curve[k]`` is the correlation
    coefficient of the preamble with ``stream[k:k + len(preamble)]``;
    candidates are local maxima of ``|curve|`` above mean + ``threshold_sigma``
    standard deviations, best first.
    """
    x = np.asarray(stream, dtype=float)
    p = np.asarray(preamble, dtype=float)
    if x.size <= p.size:
        raise ValueError("stream must be longer than the preamble")
    raw = correlate(x, p, mode="valid", method="fft")
    csum = np.concatenate([[0.0], np.cumsum(x * x)])
    local = csum[p.size:] - csum[: -p.size]
    denom = np.sqrt(np.clip(local, 0.0, None)) * np.linalg.norm(p)
    curve = np.divide(raw, denom, out=np.zeros_like(raw), where=denom > 1e-12)

    mag = np.abs(curve)
    height = mag.mean() + threshold_sigma * mag.std()
    peaks, _ = find_peaks(mag, height=height, distance=max(1, min_separation))
    order = np.argsort(-mag[peaks], kind="stable")
    return curve, peaks[order]


def _symbol_segments(stream: np.ndarray, start: int, config: PreambleConfig) -> np.ndarray:
    if start < 0 or start + config.length > stream.size:
        raise ValueError(f"index {start} leaves no room for {config.num_symbols} symbols")
    L, cp = config.symbol_len, config.cp_len
    return np.stack([
        stream[start + k * config.block_len + cp : start + k * config.block_len + cp + L]
        for k in range(config.num_symbols)
    ])


def auto_correlate(stream, candidate_index: int, config: PreambleConfig = PreambleConfig()) -> float:
    """Mean pairwise correlation coefficient of the PN-corrected symbols."""
    segs = _symbol_segments(np.asarray(stream, dtype=float), candidate_index, config)
    segs = segs * np.asarray(config.pn_signs, dtype=float)[:, None]
    norms = np.linalg.norm(segs, axis=1)
    if np.any(norms < 1e-12):
        return 0.0
    unit = segs / norms[:, None]
    gram = unit @ unit.T
    iu = np.triu_indices(len(segs), 1)
    return float(np.clip(gram[iu].mean(), -1.0, 1.0))


def estimate_channel(stream, coarse_index: int, config: PreambleConfig = PreambleConfig(),
                     mic_index: int = 0) -> ChannelEstimate:
    """LS channel estimate averaged over the PN-signed symbols.

    Only the positive in-band bins carrying the ZC sequence are estimated,
    so the time-domain taps are the complex baseband-equivalent response and
    ``|taps|`` is its envelope. A Hamming taper across the band keeps
    sidelobes of strong paths from posing as earlier peaks.
    """
    x = np.asarray(stream, dtype=float)
    if not 0 <= coarse_index <= x.size - config.length:
        raise ValueError(f"coarse index {coarse_index} out of range")
    segs = _symbol_segments(x, coarse_index, config)
    Y = np.fft.fft(segs, axis=1)
    X = config.reference_spectrum()
    bins = config.zc_bins
    pn = np.asarray(config.pn_signs, dtype=float)[:, None]

    H = np.zeros(config.symbol_len, dtype=complex)
    H[bins] = np.mean(Y[:, bins] / (pn * X[bins]), axis=0)

    shaped = np.zeros_like(H)
    shaped[bins] = H[bins] * np.hamming(bins.size)
    taps = np.fft.ifft(shaped)
    peak = np.max(np.abs(taps))
    if peak > 0:
        taps = taps / peak
    noise = float(np.mean(np.abs(taps[-NOISE_TAPS:]) ** 2))
    return ChannelEstimate(taps=taps, noise_floor=noise, mic_index=mic_index, freq_response=H)


def is_peak(taps, n: int, window: int = 3) -> bool:
    """Strict local maximum of ``|taps|`` within +/-``window``.

    Equal values tie-break toward the earlier index; a flat window is never
    a peak. The window is truncated at the sequence ends.
    """
    mag = np.abs(np.asarray(taps))
    lo, hi = max(0, n - window), min(mag.size, n + window + 1)
    v = mag[n]
    before, after = mag[lo:n], mag[n + 1:hi]
    if before.size and np.any(before >= v):
        return False
    if after.size and np.any(after > v):
        return False
    return bool(v > mag[lo:hi].min())


def _admissible(est: ChannelEstimate, lam: float, window: int) -> list[int]:
    mag = est.magnitude
    above = np.flatnonzero(mag > est.noise_floor + lam)
    return [int(k) for k in above if is_peak(mag, int(k), window)]


def max_mic_offset(d: float = MIC_SEPARATION_M, c: float = DEFAULT_SOUND_SPEED, fs: float = 44100.0) -> float:
    return d * fs / c


def find_direct_path(h1: ChannelEstimate, h2: ChannelEstimate, lam: float = DIRECT_PATH_LAMBDA,
                     d: float = MIC_SEPARATION_M, c: float = DEFAULT_SOUND_SPEED, fs: float = 44100.0,
                     window: int = 3) -> DirectPath:
    """Earliest pair of admissible peaks across the two mics whose offset fits
    the microphone spacing. Pairs are ranked by ``n + m`` then ``|n - m|``."""
    limit = max_mic_offset(d, c, fs)
    ns = _admissible(h1, lam, window)
    ms = _admissible(h2, lam, window)
    best = None
    for n in ns:
        for m in ms:
            if abs(n - m) > limit:
                continue
            key = (n + m, abs(n - m), n)
            if best is None or key < best[0]:
                best = (key, n, m)
    if best is None:
        raise NoDirectPathError("no admissible peak pair within the microphone constraint")
    path = DirectPath(n=best[1], m=best[2])
    assert abs(path.n - path.m) <= limit
    return path


@dataclass
class Detection:
    """Result of running the full receiver pipeline on one capture."""

    offset: int                 # coarse preamble start (CP of symbol 0)
    score: float                # auto-correlation score
    window_start: int           # stream index of channel tap 0
    estimates: list[ChannelEstimate]
    direct_path: DirectPath

    @property
    def arrival(self) -> float:
        """Direct-path arrival as a (possibly half-integer) stream index."""
        return self.window_start + self.direct_path.tau_los


def detect_preamble(stream, config: PreambleConfig = PreambleConfig(), preamble=None,
                    threshold: float = DETECTION_THRESHOLD, max_candidates: int = 5):
    """Coarse detection: the best cross-correlation candidate that passes
    the auto-correlation gate. Returns ``(index, score)`` or ``None``."""
    x = np.asarray(stream, dtype=float)
    if preamble is None:
        preamble = generate_preamble(config)
    if x.size <= len(preamble):
        return None
    _, candidates = cross_correlate(x, preamble, min_separation=config.cp_len)
    for idx in candidates[:max_candidates]:
        idx = int(idx)
        if idx + config.length > x.size:
            continue
        score = auto_correlate(x, idx, config)
        if score > threshold:
            return idx, score
    return None


def locate(streams, config: PreambleConfig = PreambleConfig(), c: float = DEFAULT_SOUND_SPEED,
           lam: float = DIRECT_PATH_LAMBDA, d: float = MIC_SEPARATION_M,
           backoff: int | None = None) -> Detection | None:
    """Run detection, channel estimation and direct-path search.

    ``streams`` is one capture per microphone, sample-aligned. Detection runs
    on the first microphone. The estimation window starts ``backoff``
    samples (default half the CP) before the coarse index so a direct path
    weaker than a later reflection still lands inside it. With a single
    microphone the earliest admissible peak is returned (n == m).
    Returns ``None`` when no preamble passes the gate.
    """
    streams = [np.asarray(s, dtype=float) for s in streams]
    if not streams or len(streams) > 2:
        raise ValueError("expected one or two microphone streams")
    hit = detect_preamble(streams[0], config)
    if hit is None:
        return None
    idx, score = hit
    if backoff is None:
        backoff = config.cp_len // 2
    start = max(0, idx - backoff)
    estimates = [estimate_channel(s, start, config, mic_index=k) for k, s in enumerate(streams)]
    h1 = estimates[0]
    h2 = estimates[1] if len(estimates) > 1 else estimates[0]
    path = find_direct_path(h1, h2, lam=lam, d=d, c=c, fs=config.fs)
    return Detection(offset=idx, score=score, window_start=start, estimates=estimates, direct_path=path)


def write_channel_csv(path, estimates: list[ChannelEstimate]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tap"] + [f"mic{e.mic_index}_magnitude" for e in estimates])
        for k in range(len(estimates[0].taps)):
            writer.writerow([k] + [f"{e.magnitude[k]:.6f}" for e in estimates])


# Buffer timing.

def calibrate_offset(n1: int, m1: int, alpha: float = 0.0, beta: float = 0.0) -> BufferCalibration:
    """Speaker/microphone buffer offset from a self-heard calibration signal
    written at speaker index ``n1`` and detected at microphone index ``m1``."""
    return BufferCalibration(offset_samples=int(n1) - int(m1), alpha=alpha, beta=beta)


def reply_index(m2: int, cal: BufferCalibration, t_reply: float, fs: float = 44100.0) -> int:
    """Speaker index at which to write a reply to a preamble detected at
    microphone index ``m2`` so it goes out ``t_reply`` seconds later."""
    return int(round(m2 + cal.offset_samples + fs * t_reply))


def drift_error(alpha: float, beta: float, t_reply0: float, elapsed_samples: float,
                fs: float = 44100.0) -> float:
    """Actual minus intended reply interval (s) caused by speaker (alpha) and
    microphone (beta) sample-rate errors."""
    return -alpha * t_reply0 + elapsed_samples * (beta - alpha) / fs
