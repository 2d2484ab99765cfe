"""Ranging preamble, MFSK device-ID symbols, payload bit codec and the
per-device FSK uplink."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.io import wavfile

# Timestamp-diff field: 10-bit codes at 2-sample resolution covering
# [0, 2*tau_max) = 42 ms = 1852 samples. All-ones is the "not heard" code.
DIFF_BITS = 10
DIFF_RESOLUTION = 2
DIFF_SENTINEL = (1 << DIFF_BITS) - 1
MAX_DIFF_SAMPLES = 1852

DEPTH_BITS = 8
DEPTH_STEP_M = 0.2
MAX_DEPTH_M = 40.0

BIT_RATE = 100.0


def _largest_prime_at_most(n: int) -> int:
    for p in range(n, 1, -1):
        if all(p % q for q in range(2, int(p**0.5) + 1)):
            return p
    raise ValueError(f"no prime <= {n}")


def zadoff_chu(length: int, root: int = 1) -> np.ndarray:
    """Zadoff-Chu sequence of odd ``length``: unit modulus and zero circular
    autocorrelation at every nonzero lag when gcd(root, length) == 1."""
    if length % 2 == 0:
        raise ValueError("ZC length must be odd")
    if math.gcd(root, length) != 1:
        raise ValueError("ZC root must be coprime with the length")
    n = np.arange(length)
    return np.exp(-1j * np.pi * root * n * (n + 1) / length)


@dataclass(frozen=True)
class PreambleConfig:
    fs: float = 44100.0
    symbol_len: int = 1920
    cp_len: int = 540
    band: tuple[float, float] = (1000.0, 5000.0)
    pn_signs: tuple[int, ...] = (1, 1, -1, 1)
    zc_root: int = 1
    zc_length: int | None = None  # default: largest prime <= in-band bin count

    def __post_init__(self):
        object.__setattr__(self, "pn_signs", tuple(int(s) for s in self.pn_signs))
        object.__setattr__(self, "band", tuple(float(b) for b in self.band))
        if any(s not in (-1, 1) for s in self.pn_signs):
            raise ValueError("pn_signs must be +/-1")
        lo, hi = self.band
        if not 0 < lo < hi < self.fs / 2:
            raise ValueError("band must satisfy 0 < low < high < fs/2")
        if self.cp_len >= self.symbol_len:
            raise ValueError("cyclic prefix must be shorter than the symbol")
        if self.zc_len > self.inband_bins.size:
            raise ValueError("ZC sequence longer than the in-band bin count")
        if math.gcd(self.zc_root, self.zc_len) != 1:
            raise ValueError("zc_root must be coprime with zc_length")

    @property
    def num_symbols(self) -> int:
        return len(self.pn_signs)

    @property
    def bin_hz(self) -> float:
        return self.fs / self.symbol_len

    @property
    def inband_bins(self) -> np.ndarray:
        lo, hi = self.band
        return np.arange(math.ceil(lo / self.bin_hz), math.floor(hi / self.bin_hz) + 1)

    @property
    def zc_len(self) -> int:
        if self.zc_length is not None:
            return self.zc_length
        return _largest_prime_at_most(self.inband_bins.size)

    @property
    def zc_bins(self) -> np.ndarray:
        """FFT bins carrying the ZC sequence (the lowest ``zc_len`` in-band bins)."""
        return self.inband_bins[: self.zc_len]

    @property
    def block_len(self) -> int:
        return self.cp_len + self.symbol_len

    @property
    def length(self) -> int:
        return self.num_symbols * self.block_len

    @cached_property
    def _symbol(self) -> np.ndarray:
        spectrum = np.zeros(self.symbol_len // 2 + 1, dtype=complex)
        spectrum[self.zc_bins] = zadoff_chu(self.zc_len, self.zc_root)
        sym = np.fft.irfft(spectrum, n=self.symbol_len)
        return sym / np.max(np.abs(sym))

    def reference_symbol(self) -> np.ndarray:
        """One OFDM symbol before PN signing, peak-normalized, without CP."""
        return self._symbol.copy()

    def reference_spectrum(self) -> np.ndarray:
        """Full-length FFT of :meth:`reference_symbol`."""
        return np.fft.fft(self._symbol)


def add_cp(symbol: np.ndarray, cp_len: int) -> np.ndarray:
    return np.concatenate([symbol[-cp_len:], symbol]) if cp_len else symbol.copy()


def generate_preamble(config: PreambleConfig = PreambleConfig()) -> np.ndarray:
    """PN-signed repetition of the ZC-OFDM symbol, each copy with its own CP."""
    sym = config.reference_symbol()
    return np.concatenate([add_cp(s * sym, config.cp_len) for s in config.pn_signs])


def subband_bins(group_size: int, config: PreambleConfig = PreambleConfig()) -> list[np.ndarray]:
    """In-band FFT bins split into ``group_size`` contiguous sub-bands."""
    if group_size < 1:
        raise ValueError("group size must be positive")
    return np.array_split(config.inband_bins, group_size)


def encode_id(device_id: int, group_size: int, config: PreambleConfig = PreambleConfig()) -> np.ndarray:
    """MFSK symbol lighting every bin of sub-band ``device_id``; CP included."""
    if not 0 <= device_id < group_size:
        raise ValueError(f"id {device_id} outside [0, {group_size})")
    spectrum = np.zeros(config.symbol_len // 2 + 1)
    spectrum[subband_bins(group_size, config)[device_id]] = 1.0
    sym = np.fft.irfft(spectrum, n=config.symbol_len)
    sym /= np.max(np.abs(sym))
    return add_cp(sym, config.cp_len)


def subband_energies(samples, group_size: int, config: PreambleConfig = PreambleConfig()) -> np.ndarray:
    """Energy per sub-band over the first ``symbol_len`` samples.

    Any window inside a CP-prefixed symbol is a cyclic shift of the symbol,
    so bin magnitudes do not depend on where in the CP the window starts.
    """
    x = np.asarray(samples, dtype=float)
    if x.size < config.symbol_len:
        raise ValueError("need at least one symbol of samples")
    spec = np.abs(np.fft.rfft(x[: config.symbol_len])) ** 2
    return np.array([spec[b].sum() for b in subband_bins(group_size, config)])


def decode_id(samples, group_size: int, config: PreambleConfig = PreambleConfig()) -> tuple[int, float]:
    """Maximum-likelihood ID: the sub-band with the most energy.

    Returns ``(id, confidence)`` where confidence is the winning band's share
    of in-band energy (0 for silent input).
    """
    energies = subband_energies(samples, group_size, config)
    total = energies.sum()
    best = int(np.argmax(energies))
    if total <= 0:
        return best, 0.0
    return best, float(energies[best] / total)


@dataclass
class PayloadPacket:
    """Timestamp report one device sends to the leader after a round.

    ``timestamp_codes`` has one entry per other device in ascending id order;
    ``None`` means that device was not heard.
    """

    device_id: int
    depth_code: int
    timestamp_codes: list[int | None] = field(default_factory=list)


def payload_bits(group_size: int) -> int:
    return DIFF_BITS * (group_size - 1) + DEPTH_BITS


def quantize_depth(depth_m: float) -> int:
    if not 0.0 <= depth_m <= MAX_DEPTH_M:
        raise ValueError(f"depth {depth_m} m outside [0, {MAX_DEPTH_M}]")
    return int(math.floor(depth_m / DEPTH_STEP_M + 0.5))


def dequantize_depth(code: int) -> float:
    return code * DEPTH_STEP_M


def quantize_diff(diff_samples: float | None) -> int:
    if diff_samples is None:
        return DIFF_SENTINEL
    if not 0 <= diff_samples < MAX_DIFF_SAMPLES:
        raise ValueError(f"timestamp diff {diff_samples} outside [0, {MAX_DIFF_SAMPLES})")
    return int(math.floor(diff_samples / DIFF_RESOLUTION + 0.5))


def dequantize_diff(code: int | None) -> int | None:
    if code is None or code == DIFF_SENTINEL:
        return None
    return code * DIFF_RESOLUTION


def _to_bits(value: int, width: int) -> list[int]:
    return [(value >> (width - 1 - k)) & 1 for k in range(width)]


def _from_bits(bits) -> int:
    value = 0
    for b in bits:
        value = (value << 1) | int(b)
    return value


def pack_payload(packet: PayloadPacket, group_size: int) -> np.ndarray:
    """Serialize to ``10*(N-1) + 8`` bits, MSB first: depth, then diffs.

    No FEC is applied; a coder would wrap the returned bit array.
    """
    if not 1 <= packet.device_id < group_size:
        raise ValueError(f"device id {packet.device_id} outside [1, {group_size})")
    if not 0 <= packet.depth_code < (1 << DEPTH_BITS):
        raise ValueError("depth code does not fit in 8 bits")
    if len(packet.timestamp_codes) != group_size - 1:
        raise ValueError(f"expected {group_size - 1} timestamp codes")
    bits = _to_bits(packet.depth_code, DEPTH_BITS)
    for code in packet.timestamp_codes:
        code = DIFF_SENTINEL if code is None else code
        if not 0 <= code <= DIFF_SENTINEL:
            raise ValueError(f"timestamp code {code} does not fit in {DIFF_BITS} bits")
        bits += _to_bits(code, DIFF_BITS)
    return np.array(bits, dtype=np.uint8)


def unpack_payload(bits, group_size: int, device_id: int) -> PayloadPacket:
    """Inverse of :func:`pack_payload`. The sender id is known from its band."""
    bits = np.asarray(bits, dtype=np.uint8)
    if bits.size != payload_bits(group_size):
        raise ValueError(f"expected {payload_bits(group_size)} bits, got {bits.size}")
    depth = _from_bits(bits[:DEPTH_BITS])
    codes: list[int | None] = []
    for k in range(group_size - 1):
        start = DEPTH_BITS + k * DIFF_BITS
        code = _from_bits(bits[start : start + DIFF_BITS])
        codes.append(None if code == DIFF_SENTINEL else code)
    return PayloadPacket(device_id=device_id, depth_code=depth, timestamp_codes=codes)


def bits_to_hex(bits) -> str:
    bits = [int(b) for b in bits]
    bits += [0] * (-len(bits) % 4)
    return "".join(f"{_from_bits(bits[k:k + 4]):x}" for k in range(0, len(bits), 4))


def fsk_tones(band_index: int, group_size: int, config: PreambleConfig = PreambleConfig(),
              bit_rate: float = BIT_RATE) -> tuple[float, float]:
    """Mark/space tones for a device band, snapped to multiples of the bit
    rate so tones of every device are orthogonal over one bit period."""
    if not 0 <= band_index < group_size:
        raise ValueError(f"band {band_index} outside [0, {group_size})")
    lo_band, hi_band = config.band
    width = (hi_band - lo_band) / group_size
    lo = lo_band + band_index * width
    f0 = round((lo + 0.25 * width) / bit_rate) * bit_rate
    f1 = round((lo + 0.75 * width) / bit_rate) * bit_rate
    if f0 == f1 or f0 < lo or f1 > lo + width:
        raise ValueError(f"band {band_index} of {group_size} too narrow for {bit_rate} bps FSK")
    return f0, f1


def fsk_modulate(bits, band_index: int, group_size: int, config: PreambleConfig = PreambleConfig(),
                 bit_rate: float = BIT_RATE) -> np.ndarray:
    f0, f1 = fsk_tones(band_index, group_size, config, bit_rate)
    spb = int(round(config.fs / bit_rate))
    bits = np.asarray(bits, dtype=int)
    freqs = np.repeat(np.where(bits > 0, f1, f0), spb)
    t = np.arange(freqs.size) / config.fs
    return np.cos(2 * np.pi * freqs * t)


def fsk_demodulate(samples, band_index: int, group_size: int, config: PreambleConfig = PreambleConfig(),
                   bit_rate: float = BIT_RATE, num_bits: int | None = None) -> np.ndarray:
    """Non-coherent binary FSK detector: tone energy per bit window."""
    f0, f1 = fsk_tones(band_index, group_size, config, bit_rate)
    spb = int(round(config.fs / bit_rate))
    x = np.asarray(samples, dtype=float)
    if num_bits is None:
        num_bits = x.size // spb
    x = x[: num_bits * spb].reshape(num_bits, spb)
    t = (np.arange(num_bits * spb) / config.fs).reshape(num_bits, spb)
    e0 = np.abs(np.sum(x * np.exp(-2j * np.pi * f0 * t), axis=1))
    e1 = np.abs(np.sum(x * np.exp(-2j * np.pi * f1 * t), axis=1))
    return (e1 > e0).astype(np.uint8)


def airtime(num_bits: int, bit_rate: float = BIT_RATE) -> float:
    """Raw-bit airtime in seconds (no coding overhead)."""
    return num_bits / bit_rate


def write_wav(path, samples, fs: float = 44100.0) -> None:
    """Write mono (1-D) or multichannel (samples x channels) 16-bit PCM."""
    x = np.asarray(samples, dtype=float)
    peak = np.max(np.abs(x)) if x.size else 0.0
    if peak > 1.0:
        x = x / peak
    wavfile.write(path, int(fs), np.round(x * 32767).astype(np.int16))


def read_wav(path) -> tuple[float, np.ndarray]:
    """Read a PCM file as floats in [-1, 1]; shape (samples,) or (samples, channels)."""
    fs, data = wavfile.read(path)
    if np.issubdtype(data.dtype, np.integer):
        data = data.astype(float) / np.iinfo(data.dtype).max
    return float(fs), np.asarray(data, dtype=float)
