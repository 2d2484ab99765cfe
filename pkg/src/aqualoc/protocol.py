"""Distributed TDM timestamp protocol.

The leader (id 0) opens a round; every device that hears it replies in its
slot ``delta0 + (i - 1) * delta1`` measured on its own clock from the
leader's arrival. A device out of the leader's range syncs on the first
message it hears and derives its slot from the sender's id. Each device
logs the local time every message reached its microphone; the leader turns
those logs into pairwise distances.
"""

from __future__ import annotations

import heapq
import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from . import detect, physics, waveform
from .physics import DEFAULT_SOUND_SPEED, ChannelProfile, ChannelSynthConfig
from .topology import LEADER, POINTED, TopologyProblem
from .waveform import PayloadPacket, PreambleConfig

log = logging.getLogger(__name__)

MAX_CLOCK_PPM = 80.0


class ProtocolViolation(RuntimeError):
    """Two packets overlapped at some receiver."""


@dataclass(frozen=True)
class SlotConfig:
    """TDM timing, all in seconds."""

    delta0: float = 0.600
    delta1: float = 0.320
    t_packet: float = 0.278
    t_guard: float = 0.042
    group_size: int = 5

    def __post_init__(self):
        if abs(self.delta1 - (self.t_packet + self.t_guard)) > 1e-9:
            raise ValueError("delta1 must equal t_packet + t_guard")
        if self.group_size < 2:
            raise ValueError("group needs a leader and at least one device")

    def max_range(self, c: float = DEFAULT_SOUND_SPEED) -> float:
        """Largest device spacing the guard interval tolerates."""
        return self.t_guard * c / 2


@dataclass
class DeviceAgent:
    id: int
    position: np.ndarray
    clock_ppm: float = 0.0
    depth: float | None = None          # measured depth; defaults to the true z
    range_set: frozenset[int] | None = None
    heading: np.ndarray | None = None   # leader only: unit 2D facing direction

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        if self.position.shape != (3,):
            raise ValueError("position must be (x, y, z)")
        if abs(self.clock_ppm) > MAX_CLOCK_PPM:
            raise ValueError(f"clock skew {self.clock_ppm} ppm beyond +/-{MAX_CLOCK_PPM}")
        if self.depth is None:
            self.depth = float(self.position[2])
        if self.range_set is not None:
            self.range_set = frozenset(int(j) for j in self.range_set)
        if self.heading is not None:
            self.heading = np.asarray(self.heading, dtype=float)
            self.heading = self.heading / np.linalg.norm(self.heading)


@dataclass
class Environment:
    c: float = DEFAULT_SOUND_SPEED
    fs: float = 44100.0
    max_range_m: float | None = None        # used when agents carry no range_set
    link_loss: float = 0.0                  # independent per-reception drop probability
    jitter_s: float = 0.0                   # timestamp fidelity: Gaussian arrival jitter
    quantize: bool = False                  # timestamp fidelity: round timestamps to samples
    channel: ChannelProfile | ChannelSynthConfig | None = None   # audio fidelity
    mic_separation: float = detect.MIC_SEPARATION_M
    preamble: PreambleConfig = field(default_factory=PreambleConfig)


@dataclass
class ReceptionLog:
    device_id: int
    times: dict[int, float] = field(default_factory=dict)   # j -> T^i_j, local seconds
    sync_source: int | None = None
    slot_local: float | None = None


@dataclass
class Event:
    time_s: float
    kind: str            # tx | rx | sync | drop | miss
    sender: int
    receiver: int | None = None
    local_time_s: float | None = None
    note: str = ""

    def to_dict(self) -> dict:
        out = {"time_s": self.time_s, "kind": self.kind, "sender": self.sender}
        if self.receiver is not None:
            out["receiver"] = self.receiver
        if self.local_time_s is not None:
            out["local_time_s"] = self.local_time_s
        if self.note:
            out["note"] = self.note
        return out


@dataclass
class RoundResult:
    logs: dict[int, ReceptionLog]
    events: list[Event]
    silent: list[int]
    round_time_s: float          # nominal: end of the last slot in the leader's frame
    completion_s: float          # simulated: last packet fully received anywhere, true time
    flip_evidence: dict[int, tuple[float, float]] = field(default_factory=dict)


def slot_time(i: int, cfg: SlotConfig) -> float:
    """Local transmit time of device ``i`` when synced on the leader."""
    if not 1 <= i < cfg.group_size:
        raise ValueError(f"device {i} outside [1, {cfg.group_size})")
    return cfg.delta0 + (i - 1) * cfg.delta1


def relay_sync(i: int, j: int, t_i_j: float, cfg: SlotConfig) -> float:
    """Transmit time of device ``i`` synced on a message from ``j`` heard at
    local time ``t_i_j``. If the slot is still ahead it is kept; otherwise
    the device waits for the wrap-around after everyone else."""
    if (i - j) * cfg.delta1 > cfg.delta0 + 1e-12:
        return t_i_j + (i - j) * cfg.delta1
    return t_i_j + (cfg.group_size - j + i) * cfg.delta1


def round_time(n: int, all_in_range: bool, cfg: SlotConfig) -> float:
    if all_in_range:
        return cfg.delta0 + (n - 1) * cfg.delta1
    return cfg.delta0 + 2 * (n - 1) * cfg.delta1


def range_graph(agents: list[DeviceAgent], env: Environment) -> dict[int, set[int]]:
    ids = [a.id for a in agents]
    if any(a.range_set is not None for a in agents):
        graph = {a.id: set(a.range_set or ()) - {a.id} for a in agents}
        for i, nbrs in graph.items():
            for j in nbrs:
                if j not in graph or i not in graph[j]:
                    raise ValueError(f"range relation not symmetric for ({i}, {j})")
        return graph
    pos = {a.id: a.position for a in agents}
    limit = np.inf if env.max_range_m is None else env.max_range_m
    return {i: {j for j in ids if j != i and np.linalg.norm(pos[i] - pos[j]) <= limit} for i in ids}


def leader_heading(agents: list[DeviceAgent]) -> np.ndarray:
    by_id = {a.id: a for a in agents}
    leader = by_id[LEADER]
    if leader.heading is not None:
        return leader.heading
    v = by_id[POINTED].position[:2] - leader.position[:2]
    norm = np.linalg.norm(v)
    if norm == 0:
        raise ValueError("leader and pointed device share a horizontal position")
    return v / norm


def leader_mics(leader: DeviceAgent, heading: np.ndarray, separation: float):
    """(right, left) microphone positions on the leader's device."""
    u = np.asarray(heading, dtype=float)
    right = np.array([u[1], -u[0], 0.0]) * separation / 2
    return leader.position + right, leader.position - right


class _Clock:
    """Free-running local clock at (1 + ppm) of true rate, zeroed on sync."""

    def __init__(self, ppm: float):
        self.rate = 1.0 + ppm * 1e-6
        self.t_zero: float | None = None

    def local(self, t: float) -> float:
        return (t - self.t_zero) * self.rate

    def true(self, local: float) -> float:
        return self.t_zero + local / self.rate


def _seed_for(seed: int, *parts: int) -> int:
    return int(np.random.SeedSequence([seed, *parts]).generate_state(1)[0])


def _link_profile(env: Environment, seed: int, tx: int, rx: int) -> ChannelProfile:
    if isinstance(env.channel, ChannelProfile):
        return env.channel
    if isinstance(env.channel, ChannelSynthConfig):
        return physics.synth_channel(_seed_for(seed, 7, tx, rx), env.channel)
    return ChannelProfile()


def _audio_arrival(message: np.ndarray, distances: list[float], env: Environment, profile: ChannelProfile,
                   seed: int, tx: int, rx: int, group_size: int):
    """Synthesize the capture at each microphone and run the receiver
    pipeline. Returns ``(arrival_samples, direct_path)`` or ``None``."""
    streams = [
        physics.propagate(message, d, profile, fs=env.fs, c=env.c, seed=_seed_for(seed, 11, tx, rx, k))
        for k, d in enumerate(distances)
    ]
    size = max(s.size for s in streams)
    streams = [np.pad(s, (0, size - s.size)) for s in streams]
    try:
        hit = detect.locate(streams, env.preamble, c=env.c, d=env.mic_separation)
    except detect.NoDirectPathError:
        return None
    if hit is None:
        return None
    id_start = int(round(hit.arrival)) + env.preamble.length
    id_samples = streams[0][id_start:id_start + env.preamble.block_len]
    if id_samples.size < env.preamble.symbol_len:
        return None
    sender, _ = waveform.decode_id(id_samples, group_size, env.preamble)
    if sender != tx:
        return None
    return hit.arrival, hit.direct_path


def run_round(agents: list[DeviceAgent], env: Environment, cfg: SlotConfig, seed: int = 0,
              fidelity: str = "timestamp") -> RoundResult:
    """Simulate one protocol round.

    ``timestamp`` fidelity computes arrivals from geometry (plus clock skew,
    optional jitter and sample quantization). ``audio`` fidelity synthesizes
    each message (preamble + MFSK id) through the channel model and times it
    with the detection pipeline, at both of the leader's microphones.
    Deterministic for a fixed seed. Raises :class:`ProtocolViolation` when
    two packets overlap at a receiver.
    """
    if fidelity not in ("timestamp", "audio"):
        raise ValueError(f"unknown fidelity {fidelity!r}")
    ids = sorted(a.id for a in agents)
    if ids != list(range(len(ids))) or len(ids) != cfg.group_size:
        raise ValueError("agent ids must be 0..N-1 with N == cfg.group_size")
    by_id = {a.id: a for a in agents}
    graph = range_graph(agents, env)
    rng = np.random.default_rng(seed)
    try:
        heading = leader_heading(agents)
    except ValueError:
        heading = np.array([1.0, 0.0])    # mic axis is arbitrary when the pointed device is overhead
    mic_right, mic_left = leader_mics(by_id[LEADER], heading, env.mic_separation)

    tau_max = max((np.linalg.norm(by_id[i].position - by_id[j].position) / env.c
                   for i in ids for j in graph[i]), default=0.0)
    if cfg.t_guard <= 2 * tau_max:
        log.warning("guard interval %.3f s does not exceed twice the max propagation %.3f s",
                    cfg.t_guard, 2 * tau_max)

    message = None
    if fidelity == "audio":
        message = {i: np.concatenate([waveform.generate_preamble(env.preamble),
                                      waveform.encode_id(i, cfg.group_size, env.preamble)])
                   for i in ids}

    clocks = {i: _Clock(by_id[i].clock_ppm) for i in ids}
    logs: dict[int, ReceptionLog] = {}
    events: list[Event] = []
    busy: dict[int, list[tuple[float, float, str]]] = {i: [] for i in ids}
    nominal: dict[int, float] = {}
    flip_evidence: dict[int, tuple[float, float]] = {}
    queue: list = []
    counter = itertools.count()

    def quantized(t_local: float) -> float:
        if env.quantize or fidelity == "audio":
            return round(t_local * env.fs) / env.fs
        return t_local

    def schedule_tx(i: int, local_time: float) -> None:
        heapq.heappush(queue, (clocks[i].true(local_time), next(counter), "tx", i, None))

    clocks[LEADER].t_zero = 0.0
    logs[LEADER] = ReceptionLog(LEADER, sync_source=LEADER, slot_local=0.0)
    nominal[LEADER] = 0.0
    schedule_tx(LEADER, 0.0)

    while queue:
        t, _, kind, who, payload = heapq.heappop(queue)
        if kind == "tx":
            log_i = logs[who]
            log_i.times[who] = log_i.slot_local
            note = "" if log_i.sync_source in (LEADER, who) else f"relay sync on {log_i.sync_source}"
            events.append(Event(t, "tx", who, local_time_s=log_i.slot_local, note=note))
            busy[who].append((t, t + cfg.t_packet, f"own tx {who}"))
            for rx in sorted(graph[who]):
                if env.link_loss > 0 and rng.random() < env.link_loss:
                    events.append(Event(t, "drop", who, rx))
                    continue
                src, dst = by_id[who].position, by_id[rx].position
                evidence = None
                if fidelity == "timestamp":
                    arrival = t + np.linalg.norm(dst - src) / env.c
                    if env.jitter_s > 0:
                        arrival += rng.normal(0.0, env.jitter_s)
                    if rx == LEADER and who >= 2:
                        left = np.linalg.norm(mic_left - src) / env.c * env.fs
                        right = np.linalg.norm(mic_right - src) / env.c * env.fs
                        evidence = (left, right)
                else:
                    profile = _link_profile(env, seed, who, rx)
                    if rx == LEADER:
                        dists = [np.linalg.norm(mic_right - src), np.linalg.norm(mic_left - src)]
                    else:
                        dists = [np.linalg.norm(dst - src)]
                    got = _audio_arrival(message[who], dists, env, profile, seed, who, rx, cfg.group_size)
                    if got is None:
                        events.append(Event(t, "miss", who, rx, note="not detected"))
                        continue
                    arrival = t + got[0] / env.fs
                    if rx == LEADER and who >= 2:
                        evidence = (float(got[1].m), float(got[1].n))
                heapq.heappush(queue, (arrival, next(counter), "rx", rx, (who, evidence)))
            continue

        # reception at device `who`
        sender, evidence = payload
        busy[who].append((t, t + cfg.t_packet, f"rx {sender}->{who}"))
        clock = clocks[who]
        if who not in logs:
            clock.t_zero = t
            rec = logs[who] = ReceptionLog(who, sync_source=sender)
            if sender == LEADER:
                rec.slot_local = slot_time(who, cfg)
                nominal[who] = slot_time(who, cfg)
            else:
                rec.slot_local = relay_sync(who, sender, 0.0, cfg)
                nominal[who] = nominal[sender] + rec.slot_local
            events.append(Event(t, "sync", sender, who, local_time_s=0.0))
            schedule_tx(who, rec.slot_local)
        rec = logs[who]
        if sender in rec.times:
            continue
        rec.times[sender] = quantized(clock.local(t))
        events.append(Event(t, "rx", sender, who, local_time_s=rec.times[sender]))
        if who == LEADER and evidence is not None:
            flip_evidence[sender] = evidence

    _check_overlaps(busy)
    silent = [i for i in ids if i not in logs]
    for i in silent:
        log.warning("device %d never heard any message and stayed silent", i)
    round_end = max(nominal.values()) + cfg.delta1 if len(nominal) > 1 else cfg.delta0
    completion = max(end for spans in busy.values() for _, end, _ in spans)
    events.sort(key=lambda e: (e.time_s, e.kind != "tx"))
    return RoundResult(logs, events, silent, round_end, completion, flip_evidence)


def _check_overlaps(busy: dict[int, list[tuple[float, float, str]]]) -> None:
    for device, spans in busy.items():
        spans = sorted(spans)
        for (s0, e0, what0), (s1, e1, what1) in zip(spans, spans[1:]):
            if s1 < e0 - 1e-12:
                raise ProtocolViolation(
                    f"device {device}: {what1} at {s1:.4f}s overlaps {what0} ending {e0:.4f}s")


def pairwise_distance(log_i: ReceptionLog, log_j: ReceptionLog, c: float = DEFAULT_SOUND_SPEED) -> float | None:
    """Two-way distance from the four timestamps of devices i and j.

    Returns ``None`` when any of them is missing.
    """
    i, j = log_i.device_id, log_j.device_id
    try:
        a = log_i.times[j] - log_i.times[i]
        b = log_j.times[j] - log_j.times[i]
    except KeyError:
        return None
    return c / 2 * (a - b)


def distance_via_listener(log_i: ReceptionLog, log_j: ReceptionLog, log_k: ReceptionLog,
                          d_ik: float, d_jk: float, c: float = DEFAULT_SOUND_SPEED) -> float | None:
    """Distance i-j when only one direction was heard, using a device k
    both of them heard whose distances to i and j are known."""
    i, j, k = log_i.device_id, log_j.device_id, log_k.device_id
    if j not in log_i.times and i in log_j.times:
        log_i, log_j, i, j = log_j, log_i, j, i
    ti, tj = log_i.times, log_j.times
    if j not in ti or i not in ti or j not in tj or k not in ti or k not in tj:
        return None
    # offsets between true transmit times, from k's message at both devices
    b = (ti[k] - ti[i]) - d_ik / c           # t_k - t_i
    a = b + d_jk / c - (tj[k] - tj[j])       # t_j - t_i
    return c * ((ti[j] - ti[i]) - a)


def distance_matrix(logs: dict[int, ReceptionLog], n: int, c: float = DEFAULT_SOUND_SPEED):
    """``(D, W)`` from reception logs; missing links get ``nan`` and weight 0.
    One-way links are recovered through a shared listener when possible."""
    D = np.full((n, n), np.nan)
    np.fill_diagonal(D, 0.0)
    W = np.zeros((n, n))
    for i, j in itertools.combinations(range(n), 2):
        if i in logs and j in logs:
            d = pairwise_distance(logs[i], logs[j], c)
            if d is not None:
                D[i, j] = D[j, i] = d
                W[i, j] = W[j, i] = 1.0
    for i, j in itertools.combinations(range(n), 2):
        if W[i, j] or i not in logs or j not in logs:
            continue
        for k in range(n):
            if k in (i, j) or k not in logs or not (W[i, k] and W[j, k]):
                continue
            d = distance_via_listener(logs[i], logs[j], logs[k], D[i, k], D[j, k], c)
            if d is not None:
                D[i, j] = D[j, i] = d
                W[i, j] = W[j, i] = 1.0
                break
    return D, W


def build_problem(logs: dict[int, ReceptionLog], agents: list[DeviceAgent], cfg: SlotConfig,
                  c: float = DEFAULT_SOUND_SPEED,
                  flip_evidence: dict[int, tuple[float, float]] | None = None) -> TopologyProblem:
    n = cfg.group_size
    D, W = distance_matrix(logs, n, c)
    by_id = {a.id: a for a in agents}
    depths = np.array([by_id[i].depth for i in range(n)], dtype=float)
    D = np.where(W > 0, D, 0.0)
    np.fill_diagonal(D, 0.0)
    return TopologyProblem(D=D, W=W, depths=depths, leader_heading=leader_heading(agents),
                           flip_evidence=flip_evidence or {})


def report_packet(log_i: ReceptionLog, cfg: SlotConfig, fs: float = 44100.0,
                  depth: float = 0.0) -> PayloadPacket:
    """Compress a leader-synced device's log into its uplink payload:
    per other device, the arrival offset from that device's nominal slot."""
    i = log_i.device_id
    if log_i.sync_source != LEADER:
        raise ValueError("only leader-synced logs fit the uplink timestamp format")
    codes: list[int | None] = []
    for j in range(cfg.group_size):
        if j == i:
            continue
        if j not in log_i.times:
            codes.append(None)
            continue
        nominal = 0.0 if j == LEADER else slot_time(j, cfg)
        diff = max(0.0, (log_i.times[j] - nominal) * fs)
        codes.append(waveform.quantize_diff(diff))
    return PayloadPacket(device_id=i, depth_code=waveform.quantize_depth(depth), timestamp_codes=codes)


def log_from_packet(packet: PayloadPacket, cfg: SlotConfig, fs: float = 44100.0) -> ReceptionLog:
    """Rebuild a reception log at the leader from an uplink payload."""
    i = packet.device_id
    others = [j for j in range(cfg.group_size) if j != i]
    rec = ReceptionLog(i, sync_source=LEADER, slot_local=slot_time(i, cfg))
    rec.times[i] = rec.slot_local
    for j, code in zip(others, packet.timestamp_codes):
        diff = waveform.dequantize_diff(code)
        if diff is None:
            continue
        nominal = 0.0 if j == LEADER else slot_time(j, cfg)
        rec.times[j] = nominal + diff / fs
    return rec
