"""Environmental models: speed of sound, pressure-to-depth, and a synthetic
multipath channel used by the end-to-end simulator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_SOUND_SPEED = 1500.0

WATER_DENSITY = 997.0
GRAVITY = 9.81
SEA_LEVEL_PRESSURE = 101325.0

# Parameter box over which the sound speed polynomial is used.
TEMPERATURE_RANGE = (0.0, 35.0)
SALINITY_RANGE = (0.0, 45.0)
DEPTH_RANGE = (0.0, 100.0)


class DomainError(ValueError):
    """Input outside the physical range a model is defined on."""


@dataclass(frozen=True)
class WaterParams:
    temperature_c: float = 10.0
    salinity_ppt: float = 35.0
    depth_m: float = 0.0

    def validate(self) -> None:
        for name, value, (lo, hi) in (
            ("temperature_c", self.temperature_c, TEMPERATURE_RANGE),
            ("salinity_ppt", self.salinity_ppt, SALINITY_RANGE),
            ("depth_m", self.depth_m, DEPTH_RANGE),
        ):
            if not (lo <= value <= hi):
                raise DomainError(f"{name}={value} outside [{lo}, {hi}]")


def sound_speed(params: WaterParams) -> float:
    """Speed of sound in water (m/s) from temperature, salinity and depth."""
    params.validate()
    t = params.temperature_c
    return (
        1449.0
        + 4.6 * t
        - 0.055 * t**2
        + 0.0003 * t**3
        + 1.39 * (params.salinity_ppt - 35.0)
        + 0.017 * params.depth_m
    )


def pressure_to_depth(
    pressure_pa: float,
    water_density: float = WATER_DENSITY,
    g: float = GRAVITY,
    p0: float = SEA_LEVEL_PRESSURE,
) -> float:
    """Hydrostatic depth in meters below the surface for an absolute pressure."""
    if pressure_pa < p0:
        raise DomainError(f"pressure {pressure_pa} Pa is below surface pressure {p0} Pa")
    return (pressure_pa - p0) / (water_density * g)


@dataclass(frozen=True)
class ChannelProfile:
    """Tapped delay line. ``taps`` holds ``(delay_samples, amplitude)`` pairs
    sorted by delay; nothing may arrive before the direct tap."""

    taps: tuple[tuple[int, float], ...] = ((0, 1.0),)
    noise_std: float = 0.0
    direct_tap_index: int = 0

    def __post_init__(self):
        taps = tuple((int(d), float(a)) for d, a in self.taps)
        object.__setattr__(self, "taps", taps)
        if not taps:
            raise ValueError("channel needs at least one tap")
        delays = [d for d, _ in taps]
        if any(d < 0 for d in delays):
            raise ValueError("tap delays must be non-negative")
        if delays != sorted(delays):
            raise ValueError("taps must be sorted by delay")
        if not 0 <= self.direct_tap_index < len(taps):
            raise ValueError("direct_tap_index out of range")
        if delays[self.direct_tap_index] != delays[0]:
            raise ValueError("no channel tap may precede the direct path")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @property
    def direct_delay(self) -> int:
        return self.taps[self.direct_tap_index][0]

    def impulse_response(self) -> np.ndarray:
        """Dense impulse response, index 0 = direct tap delay."""
        base = self.direct_delay
        h = np.zeros(self.taps[-1][0] - base + 1)
        for d, a in self.taps:
            h[d - base] += a
        return h


@dataclass(frozen=True)
class ChannelSynthConfig:
    num_taps: int = 5
    decay_rate: float = 0.3
    direct_attenuation: float = 1.0
    min_gap: int = 5
    max_gap: int = 40
    noise_std: float = 0.0


def propagate(
    signal,
    distance_m: float,
    profile: ChannelProfile,
    fs: float = 44100.0,
    c: float = DEFAULT_SOUND_SPEED,
    seed: int | None = 0,
) -> np.ndarray:
    """Send ``signal`` over ``distance_m`` of water through ``profile``.

    The output starts at the transmit instant: the direct path lands at
    ``round(distance_m * fs / c) + profile.direct_delay``. Noise covers the
    whole output, including the stretch before the direct path.
    """
    x = np.asarray(signal, dtype=float)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("signal must be a non-empty 1-D sequence")
    if distance_m < 0:
        raise DomainError("distance must be non-negative")
    if fs <= 0 or c <= 0:
        raise DomainError("fs and c must be positive")

    delay = int(round(distance_m * fs / c)) + profile.direct_delay
    y = np.convolve(x, profile.impulse_response())
    out = np.zeros(delay + y.size)
    out[delay:] = y
    if profile.noise_std > 0:
        rng = np.random.default_rng(seed)
        out += rng.normal(0.0, profile.noise_std, out.size)
    return out


def synth_channel(seed: int, config: ChannelSynthConfig = ChannelSynthConfig()) -> ChannelProfile:
    """Random exponentially decaying multipath profile.

    The direct tap sits at delay 0 with amplitude ``direct_attenuation``;
    every later tap k has magnitude ``exp(-decay_rate * (k - 1)) * U(0.6, 1)``
    and a random sign, so an attenuated direct path is weaker than the
    first reflection.
    """
    if config.num_taps < 1:
        raise ValueError("num_taps must be >= 1")
    rng = np.random.default_rng(seed)
    taps = [(0, float(config.direct_attenuation))]
    delay = 0
    for k in range(1, config.num_taps):
        delay += int(rng.integers(config.min_gap, config.max_gap + 1))
        amp = np.exp(-config.decay_rate * (k - 1)) * rng.uniform(0.6, 1.0)
        amp *= rng.choice((-1.0, 1.0))
        taps.append((delay, float(amp)))
    return ChannelProfile(taps=tuple(taps), noise_std=config.noise_std)


# One water body over a recreational dive (0-40 m): seasonal thermocline of
# 10-18 C and +/-1 ppt salinity around seawater.
RECREATIONAL_BOX = {
    "temperature_c": (10.0, 18.0),
    "salinity_ppt": (34.0, 36.0),
    "depth_m": (0.0, 40.0),
}


def sound_speed_span(box: dict = RECREATIONAL_BOX) -> tuple[float, float]:
    """(min, max) sound speed over a parameter box.

    The polynomial is monotone in each argument on the valid box, so the
    extremes sit on corners.
    """
    corners = [
        sound_speed(WaterParams(t, s, d))
        for t in box["temperature_c"]
        for s in box["salinity_ppt"]
        for d in box["depth_m"]
    ]
    return min(corners), max(corners)
