"""Monte-Carlo evaluation of the topology solver on synthetic dive groups."""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .topology import LEADER, POINTED, TopologyProblem, is_uniquely_realizable, solve

log = logging.getLogger(__name__)

MAX_RESAMPLES = 50
SWEEP_HEADER = ["param", "mean_error_m", "std_error_m", "trials"]
SWEEPABLE = ("eps_1d", "eps_h", "eps_theta_deg", "n_devices", "link_drops", "outliers", "outlier_magnitude")


@dataclass(frozen=True)
class ScenarioConfig:
    n_devices: int = 6
    space: tuple[float, float, float] = (60.0, 60.0, 10.0)
    eps_1d: float = 0.8                 # half-width of pairwise distance error, m
    eps_h: float = 0.4                  # half-width of depth error, m
    eps_theta_deg: float = 0.0          # half-width of leader pointing error, degrees
    link_drops: int = 0
    outliers: int = 0
    outlier_magnitude: float = 6.0      # added to an outlier link, m
    pointed_range: tuple[float, float] = (4.0, 9.0)
    trials: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.n_devices < 3:
            raise ValueError("need at least 3 devices")
        if min(self.eps_1d, self.eps_h, self.eps_theta_deg) < 0:
            raise ValueError("error half-widths must be >= 0")
        if self.link_drops < 0 or self.outliers < 0 or self.trials < 1:
            raise ValueError("counts must be non-negative and trials positive")
        lo, hi = self.pointed_range
        if not 0 < lo <= hi:
            raise ValueError("pointed_range must be positive and ordered")

    def replace(self, **changes) -> ScenarioConfig:
        return dataclasses.replace(self, **changes)


@dataclass
class Scenario:
    positions: np.ndarray           # ground truth, N x 3
    problem: TopologyProblem
    outlier_links: list[tuple[int, int]]


def _place(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    X, Y, Z = cfg.space
    n = cfg.n_devices
    pos = np.column_stack([rng.uniform(0, X, n), rng.uniform(0, Y, n), rng.uniform(0, Z, n)])
    pos[LEADER, :2] = X / 2, Y / 2
    # pointed device: 3D distance to the leader drawn from pointed_range
    for _ in range(100):
        r = rng.uniform(*cfg.pointed_range)
        z = rng.uniform(0, Z)
        dz = z - pos[LEADER, 2]
        if abs(dz) >= r:
            continue
        phi = rng.uniform(0, 2 * np.pi)
        rho = np.sqrt(r * r - dz * dz)
        pos[POINTED] = pos[LEADER, 0] + rho * np.cos(phi), pos[LEADER, 1] + rho * np.sin(phi), z
        return pos
    raise RuntimeError("could not place the pointed device")


def _drop_links(W: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray | None:
    edges = [(i, j) for i, j in itertools.combinations(range(len(W)), 2) if W[i, j]]
    for _ in range(MAX_RESAMPLES):
        pick = rng.choice(len(edges), size=count, replace=False)
        Wd = W.copy()
        for k in pick:
            i, j = edges[k]
            Wd[i, j] = Wd[j, i] = 0.0
        if is_uniquely_realizable(Wd):
            return Wd
    return None


def geometric_flip_evidence(positions: np.ndarray, heading, separation: float = 0.16,
                            c: float = 1500.0, fs: float = 44100.0) -> dict[int, tuple[float, float]]:
    """Direct-path delays (samples) at the leader's left and right mics, with
    the mic axis perpendicular to ``heading``."""
    u = np.asarray(heading, dtype=float) / np.linalg.norm(heading)
    right = np.array([u[1], -u[0], 0.0]) * separation / 2
    out = {}
    for i in range(2, len(positions)):
        left_d = np.linalg.norm(positions[i] - (positions[LEADER] - right))
        right_d = np.linalg.norm(positions[i] - (positions[LEADER] + right))
        out[i] = (left_d / c * fs, right_d / c * fs)
    return out


def generate_scenario(cfg: ScenarioConfig, trial: int) -> Scenario:
    """Random group with noisy measurements; deterministic per (seed, trial)."""
    rng = np.random.default_rng([cfg.seed, trial])
    n = cfg.n_devices
    for _ in range(MAX_RESAMPLES):
        pos = _place(cfg, rng)
        D_true = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
        W = np.ones((n, n)) - np.eye(n)
        if cfg.link_drops:
            W = _drop_links(W, cfg.link_drops, rng)
            if W is None:
                continue
        noise = np.triu(rng.uniform(-cfg.eps_1d, cfg.eps_1d, (n, n)), 1)
        D = D_true + noise + noise.T
        outliers: list[tuple[int, int]] = []
        if cfg.outliers:
            edges = [(i, j) for i, j in itertools.combinations(range(n), 2) if W[i, j]]
            for k in rng.choice(len(edges), size=cfg.outliers, replace=False):
                i, j = edges[k]
                D[i, j] += cfg.outlier_magnitude
                D[j, i] = D[i, j]
                outliers.append((i, j))
        D = np.where(W > 0, np.abs(D), 0.0)
        depths = pos[:, 2] + rng.uniform(-cfg.eps_h, cfg.eps_h, n)
        true_dir = pos[POINTED, :2] - pos[LEADER, :2]
        theta = np.arctan2(true_dir[1], true_dir[0]) + np.deg2rad(rng.uniform(-cfg.eps_theta_deg, cfg.eps_theta_deg))
        heading = np.array([np.cos(theta), np.sin(theta)])
        problem = TopologyProblem(D=D, W=W, depths=depths, leader_heading=heading,
                                  flip_evidence=geometric_flip_evidence(pos, heading))
        return Scenario(pos, problem, outliers)
    raise RuntimeError(f"no uniquely realizable graph after {MAX_RESAMPLES} resamples")


def localization_error(solution_positions: np.ndarray, truth: np.ndarray) -> float:
    """Mean 2D error over non-leader devices, truth taken relative to the leader."""
    ref = truth[:, :2] - truth[LEADER, :2]
    err = np.linalg.norm(solution_positions[:, :2] - ref, axis=1)
    return float(np.mean(np.delete(err, LEADER)))


def run_trial(cfg: ScenarioConfig, trial: int) -> float:
    sc = generate_scenario(cfg, trial)
    sol = solve(sc.problem, seed=trial)
    return localization_error(sol.positions_3d, sc.positions)


def _trial_job(args) -> float:
    return run_trial(*args)


def run_trials(cfg: ScenarioConfig, jobs: int = 1) -> np.ndarray:
    tasks = [(cfg, t) for t in range(cfg.trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return np.array(list(pool.map(_trial_job, tasks, chunksize=8)))
    return np.array([_trial_job(t) for t in tasks])


def run_sweep(cfg: ScenarioConfig, param: str, values, jobs: int = 1) -> list[dict]:
    """Mean and std of the 2D error for each value of ``param``."""
    if param not in SWEEPABLE:
        raise ValueError(f"cannot sweep {param!r}; choose from {SWEEPABLE}")
    rows = []
    for v in values:
        v = int(v) if param in ("n_devices", "link_drops", "outliers") else float(v)
        errs = run_trials(cfg.replace(**{param: v}), jobs=jobs)
        rows.append({"param": v, "mean_error_m": float(errs.mean()),
                     "std_error_m": float(errs.std()), "trials": len(errs)})
        log.info("%s=%s mean error %.4f m", param, v, rows[-1]["mean_error_m"])
    return rows


def format_sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_HEADER, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({"param": r["param"], "mean_error_m": f"{r['mean_error_m']:.6f}",
                         "std_error_m": f"{r['std_error_m']:.6f}", "trials": r["trials"]})
    return buf.getvalue()


def write_sweep_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(format_sweep_csv(rows))


def smoothed_inversions(means, increasing: bool = True) -> int:
    """Adjacent-pair inversions of a curve after 3-point moving-average smoothing."""
    m = np.asarray(means, dtype=float)
    if m.size >= 3:
        padded = np.concatenate([[m[0]], m, [m[-1]]])
        m = np.convolve(padded, np.ones(3) / 3, mode="valid")
    diffs = np.diff(m)
    return int(np.sum(diffs < 0) if increasing else np.sum(diffs > 0))
