"""Positions from noisy, incomplete pairwise distances plus depths.

Pipeline: project to the horizontal plane, weighted SMACOF with outlier
link dropping, rotate onto the leader's heading, pick the mirror image the
leader's two microphones vote for, then lift back to 3D with the depths.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import least_squares
from scipy.sparse.csgraph import connected_components, shortest_path

log = logging.getLogger(__name__)

LEADER = 0
POINTED = 1
STRESS_THRESHOLD_M = 1.5
REDUCTION_RATIO = 0.9
MAX_OUTLIERS = 3


class DisconnectedGraphError(ValueError):
    pass


class DegenerateGeometryError(ValueError):
    pass


@dataclass
class TopologyProblem:
    D: np.ndarray
    W: np.ndarray
    depths: np.ndarray
    leader_heading: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0]))
    # device id (>= 2) -> (m, n): direct-path tap at the leader's left and right mic
    flip_evidence: dict[int, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        self.D = np.array(self.D, dtype=float)
        self.W = np.array(self.W, dtype=float)
        self.depths = np.array(self.depths, dtype=float)
        self.leader_heading = np.array(self.leader_heading, dtype=float)
        self.flip_evidence = {int(k): (float(v[0]), float(v[1])) for k, v in self.flip_evidence.items()}
        self.validate()

    @property
    def n(self) -> int:
        return self.D.shape[0]

    def validate(self) -> None:
        n = self.D.shape[0]
        if self.D.shape != (n, n) or self.W.shape != (n, n) or self.depths.shape != (n,):
            raise ValueError("D, W must be NxN and depths length N")
        if n < 2:
            raise ValueError("need at least a leader and a pointed device")
        if not np.allclose(self.W, self.W.T) or np.any(np.diag(self.W) != 0):
            raise ValueError("W must be symmetric with zero diagonal")
        if not set(np.unique(self.W)) <= {0.0, 1.0}:
            raise ValueError("W entries must be 0 or 1")
        linked = self.W > 0
        if not np.allclose(self.D[linked], self.D.T[linked]):
            raise ValueError("D must be symmetric on linked pairs")
        if np.any(np.diag(self.D)[np.isfinite(np.diag(self.D))] != 0):
            raise ValueError("D must have a zero diagonal")
        norm = np.linalg.norm(self.leader_heading)
        if self.leader_heading.shape != (2,) or norm == 0:
            raise ValueError("leader_heading must be a nonzero 2D vector")
        self.leader_heading = self.leader_heading / norm


@dataclass
class Solution:
    positions_3d: np.ndarray
    stress_m: float
    dropped_links: list[tuple[int, int]]
    flip_vote: int
    realizable: bool
    flip_confident: bool = True
    clamped_links: list[tuple[int, int]] = field(default_factory=list)
    error: str | None = None


def project_2d(D, h):
    """Horizontal distances from slant ranges and depths.

    Returns ``(D2D, clamped)``; entries whose depth difference exceeds the
    measured range are clamped to 0 and flagged in the boolean mask.
    """
    D = np.asarray(D, dtype=float)
    h = np.asarray(h, dtype=float)
    dh2 = (h[:, None] - h[None, :]) ** 2
    sq = D**2 - dh2
    clamped = sq < 0
    np.fill_diagonal(clamped, False)
    return np.sqrt(np.where(clamped, 0.0, sq)), clamped


def _sym_weights(W) -> np.ndarray:
    W = np.array(W, dtype=float)
    W = np.maximum(W, W.T)
    np.fill_diagonal(W, 0.0)
    return W


def is_connected(W) -> bool:
    W = np.asarray(W)
    if W.shape[0] <= 1:
        return True
    n_comp, _ = connected_components(W > 0, directed=False)
    return n_comp == 1


def _pairwise(X: np.ndarray) -> np.ndarray:
    diff = X[:, None, :] - X[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def raw_stress(X, D, W) -> float:
    """Sum over i < j of w_ij (D_ij - |X_i - X_j|)^2."""
    R = np.where(W > 0, D - _pairwise(np.asarray(X)), 0.0)
    return float(np.sum(np.triu(W * R * R, 1)))


def normalized_stress(positions, D2D, W) -> float:
    """RMS link residual in meters: sqrt(stress / number of links)."""
    W = _sym_weights(W)
    links = np.sum(np.triu(W, 1))
    if links == 0:
        return 0.0
    return float(np.sqrt(raw_stress(positions, np.nan_to_num(np.asarray(D2D, float)), W) / links))


def classical_mds(D, dim: int = 2) -> np.ndarray:
    """Torgerson embedding of a complete distance matrix."""
    D = np.asarray(D, dtype=float)
    n = D.shape[0]
    J = np.eye(n) - np.ones((n, n)) / n
    G = -0.5 * J @ (D**2) @ J
    vals, vecs = np.linalg.eigh(G)
    order = np.argsort(vals)[::-1][:dim]
    return vecs[:, order] * np.sqrt(np.clip(vals[order], 0.0, None))


def initial_layout(D, W, seed: int = 0, dim: int = 2) -> np.ndarray:
    """Classical MDS on the shortest-path completion of the link graph,
    falling back to a seeded random layout when that collapses."""
    D = np.nan_to_num(np.asarray(D, dtype=float))
    W = np.asarray(W)
    graph = np.where(W > 0, np.maximum(D, 1e-9), 0.0)
    full = shortest_path(graph, method="D", directed=False)
    if np.all(np.isfinite(full)):
        X = classical_mds(full, dim)
        if np.ptp(X, axis=0).max() > 1e-9:
            return X
    rng = np.random.default_rng(seed)
    scale = max(float(D[W > 0].mean()) if np.any(W > 0) else 1.0, 1.0)
    return rng.normal(0.0, scale, (D.shape[0], dim))


def smacof(D2D, W, init=None, tol: float = 1e-4, max_iter: int = 300, seed: int = 0,
           history: list | None = None):
    """Weighted SMACOF (Guttman transform iterations).

    Stops when the relative stress decrease drops below ``tol`` or after
    ``max_iter`` iterations. Raises if the stress ever increases, which the
    majorization guarantees cannot happen. Pass a list as ``history`` to
    collect the stress after every iteration (initial value first).

    Returns ``(positions, raw_stress)``.
    """
    W = _sym_weights(W)
    D = np.nan_to_num(np.asarray(D2D, dtype=float)) * (W > 0)
    n = D.shape[0]
    if not is_connected(W):
        raise DisconnectedGraphError("link graph is disconnected; solve components separately")
    if n == 1:
        return np.zeros((1, 2)), 0.0

    V = -W.copy()
    V[np.diag_indices(n)] = W.sum(axis=1)
    V_pinv = np.linalg.pinv(V)
    WD = W * D

    X = np.array(init if init is not None else initial_layout(D, W, seed), dtype=float)
    X = X - X.mean(axis=0)
    S = raw_stress(X, D, W)
    if history is not None:
        history.append(S)
    for _ in range(max_iter):
        dist = _pairwise(X)
        B = -np.divide(WD, dist, out=np.zeros_like(WD), where=dist > 1e-12)
        B[np.diag_indices(n)] = -B.sum(axis=1)
        X_new = V_pinv @ (B @ X)
        S_new = raw_stress(X_new, D, W)
        if history is not None:
            history.append(S_new)
        if S_new > S * (1 + 1e-9) + 1e-12:
            raise RuntimeError(f"SMACOF stress increased: {S} -> {S_new}")
        done = S - S_new < tol * S or S_new < 1e-20
        X, S = X_new, S_new
        if done:
            break
    return X, S


def _circle_points(p, q, rp: float, rq: float) -> list[np.ndarray]:
    """Intersections of two circles; the closest point on the center line
    when they miss each other."""
    d = np.linalg.norm(q - p)
    if d < 1e-12:
        return [p + np.array([rp, 0.0])]
    a = (rp**2 - rq**2 + d**2) / (2 * d)
    h = np.sqrt(max(rp**2 - a**2, 0.0))
    e = (q - p) / d
    base = p + a * e
    if h < 1e-12:
        return [base]
    perp = np.array([-e[1], e[0]])
    return [base + h * perp, base - h * perp]


def _multilaterate(x, anchors, ranges, steps: int = 5):
    for _ in range(steps):
        diff = x - anchors
        dist = np.maximum(np.linalg.norm(diff, axis=1), 1e-12)
        J = diff / dist[:, None]
        step, *_ = np.linalg.lstsq(J, dist - ranges, rcond=None)
        x = x - step
    return x, float(np.sum((np.linalg.norm(x - anchors, axis=1) - ranges) ** 2))


def trilateration_layouts(D, W, beam: int = 64) -> list[np.ndarray]:
    """Candidate layouts from incremental placement, best first.

    Starts from the best-connected triangle, then repeatedly places the
    unplaced node with the most placed neighbors (at least two). Each node
    has two mirror-image candidates from its two farthest-apart placed
    neighbors; both are kept as branches, ranked by accumulated residual.
    Returns an empty list when no such ordering exists.
    """
    D = np.nan_to_num(np.asarray(D, dtype=float))
    A = np.asarray(W) > 0
    n = D.shape[0]
    deg = A.sum(axis=1)
    best_tri = None
    for i, j, k in itertools.combinations(range(n), 3):
        if A[i, j] and A[i, k] and A[j, k]:
            score = deg[i] + deg[j] + deg[k]
            if best_tri is None or score > best_tri[0]:
                best_tri = (score, i, j, k)
    if best_tri is None:
        return []
    _, i, j, k = best_tri
    X = np.full((n, 2), np.nan)
    X[i] = 0.0
    X[j] = (D[i, j], 0.0)
    X[k] = _circle_points(X[i], X[j], D[i, k], D[j, k])[0]
    states = [(0.0, X)]
    placed = [i, j, k]
    while len(placed) < n:
        rest = [v for v in range(n) if v not in placed]
        v = max(rest, key=lambda u: (A[u, placed].sum(), -u))
        nb = [u for u in sorted(placed) if A[v, u]]
        if len(nb) < 2:
            return []
        expanded = []
        for cost, X in states:
            anchors, ranges = X[nb], D[v, nb]
            a, b = max(itertools.combinations(range(len(nb)), 2),
                       key=lambda ab: np.linalg.norm(anchors[ab[0]] - anchors[ab[1]]))
            for cand in _circle_points(anchors[a], anchors[b], ranges[a], ranges[b]):
                x, res = _multilaterate(cand, anchors, ranges) if len(nb) > 2 else (cand, 0.0)
                Y = X.copy()
                Y[v] = x
                expanded.append((cost + res, Y))
        expanded.sort(key=lambda t: t[0])
        states = expanded[:beam]
        placed.append(v)
    return [X for _, X in states]


def polish(positions, D2D, W) -> np.ndarray:
    """Finish a SMACOF layout with a trust-region least-squares solve of the
    same stress objective; majorization alone converges slowly near zero
    stress."""
    X = np.asarray(positions, dtype=float)
    edges = np.array(_edges(W))
    if edges.size == 0:
        return X
    D = np.nan_to_num(np.asarray(D2D, dtype=float))
    target = D[edges[:, 0], edges[:, 1]]

    def residuals(x):
        Y = x.reshape(-1, 2)
        return np.linalg.norm(Y[edges[:, 0]] - Y[edges[:, 1]], axis=1) - target

    fit = least_squares(residuals, X.ravel(), method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15)
    Y = fit.x.reshape(-1, 2)
    return Y if raw_stress(Y, D, W) <= raw_stress(X, D, W) else X


def embed(D2D, W, tol: float = 1e-4, max_iter: int = 300, seed: int = 0, starts: int = 3):
    """Best 2D layout over several SMACOF starts, polished.

    Starts: classical MDS on the shortest-path completion, plus (for
    incomplete graphs) the top ``starts`` trilateration layouts.
    Returns ``(positions, raw_stress)``.
    """
    W = _sym_weights(W)
    n = W.shape[0]
    inits = [None]
    if np.sum(W > 0) < n * (n - 1):
        inits += trilateration_layouts(D2D, W)[:starts]
    best = None
    for init in inits:
        X, S = smacof(D2D, W, init=init, tol=tol, max_iter=max_iter, seed=seed)
        if best is None or S < best[1]:
            best = (X, S)
    X = polish(best[0], D2D, W)
    return X, raw_stress(X, np.nan_to_num(np.asarray(D2D, float)), W)


def _edges(W) -> tuple[tuple[int, int], ...]:
    W = np.asarray(W)
    i, j = np.nonzero(np.triu(W > 0, 1))
    return tuple(zip(i.tolist(), j.tolist()))


def _rigidity_rank(n: int, edges, P: np.ndarray, skip: int | None = None) -> int:
    rows = []
    for k, (i, j) in enumerate(edges):
        if k == skip:
            continue
        row = np.zeros(2 * n)
        d = P[i] - P[j]
        row[2 * i : 2 * i + 2] = d
        row[2 * j : 2 * j + 2] = -d
        rows.append(row)
    if not rows:
        return 0
    return int(np.linalg.matrix_rank(np.array(rows)))


def _generic_configs(n: int, count: int = 3) -> list[np.ndarray]:
    rng = np.random.default_rng(20240611 + n)
    return [rng.uniform(-1.0, 1.0, (n, 2)) for _ in range(count)]


def is_rigid(n: int, edges) -> bool:
    """Generic 2D rigidity: rigidity-matrix rank 2n - 3 at random positions."""
    if n <= 1:
        return True
    target = 2 * n - 3
    return max(_rigidity_rank(n, edges, P) for P in _generic_configs(n)) == target


def is_redundantly_rigid(n: int, edges) -> bool:
    if len(edges) < 2 * n - 2:
        return False
    target = 2 * n - 3
    for k in range(len(edges)):
        if max(_rigidity_rank(n, edges, P, skip=k) for P in _generic_configs(n)) != target:
            return False
    return True


def is_three_connected(n: int, edges) -> bool:
    """Still connected after deleting any two nodes."""
    for a, b in itertools.combinations(range(n), 2):
        keep = [v for v in range(n) if v not in (a, b)]
        idx = {v: k for k, v in enumerate(keep)}
        A = np.zeros((len(keep), len(keep)), dtype=bool)
        for i, j in edges:
            if i in idx and j in idx:
                A[idx[i], idx[j]] = A[idx[j], idx[i]] = True
        if len(keep) > 1 and connected_components(A, directed=False)[0] != 1:
            return False
    return True


@lru_cache(maxsize=65536)
def _realizable(n: int, edges: tuple[tuple[int, int], ...]) -> bool:
    if n <= 1:
        return True
    if n == 2:
        return len(edges) == 1
    if n == 3:
        return len(edges) == 3
    return is_three_connected(n, edges) and is_redundantly_rigid(n, edges)


def is_uniquely_realizable(W) -> bool:
    """Whether link pattern ``W`` fixes the 2D layout up to a rigid motion
    and global reflection (redundantly rigid and 3-connected, for N >= 4)."""
    W = np.asarray(W)
    return _realizable(W.shape[0], _edges(W))


@dataclass
class OutlierResult:
    positions: np.ndarray
    dropped_links: list[tuple[int, int]]
    stress: float           # normalized, meters


def detect_outliers(D2D, W, o_max: int = MAX_OUTLIERS, threshold: float = STRESS_THRESHOLD_M,
                    reduction: float = REDUCTION_RATIO, tol: float = 1e-4, max_iter: int = 300,
                    seed: int = 0) -> OutlierResult:
    """Iterative link dropping.

    Solve with every link; if the normalized stress is under ``threshold``
    stop. Otherwise try every subset of 1, 2, ... ``o_max`` links whose
    removal keeps the graph uniquely realizable, keep the lowest-stress
    candidate that cuts stress by more than ``reduction`` of the current
    value, and stop once stress falls under ``threshold``.
    """
    W0 = _sym_weights(W)
    D2D = np.asarray(D2D, dtype=float)

    def run(Wk):
        X, _ = embed(D2D, Wk, tol=tol, max_iter=max_iter, seed=seed)
        return X, normalized_stress(X, D2D, Wk)

    P0, E0 = run(W0)
    dropped: list[tuple[int, int]] = []
    if E0 < threshold:
        return OutlierResult(P0, dropped, E0)

    links = _edges(W0)
    for n_drop in range(1, o_max + 1):
        E_min, P_min, drop_min = E0, P0, dropped
        for subset in itertools.combinations(links, n_drop):
            Wk = W0.copy()
            for i, j in subset:
                Wk[i, j] = Wk[j, i] = 0.0
            if not is_uniquely_realizable(Wk):
                continue
            P, E = run(Wk)
            if E0 - E > reduction * E0 and E < E_min:
                E_min, P_min, drop_min = E, P, list(subset)
        if E_min < threshold:
            return OutlierResult(P_min, drop_min, E_min)
        E0, P0, dropped = E_min, P_min, drop_min
    return OutlierResult(P0, dropped, E0)


def align_rotation(positions_2d, leader_heading, leader: int = LEADER, pointed: int = POINTED) -> np.ndarray:
    """Put the leader at the origin and rotate the pointed device onto the heading."""
    X = np.asarray(positions_2d, dtype=float)
    X = X - X[leader]
    v = X[pointed]
    if np.hypot(*v) < 1e-9:
        raise DegenerateGeometryError("leader and pointed device coincide in 2D")
    u = np.asarray(leader_heading, dtype=float)
    angle = np.arctan2(u[1], u[0]) - np.arctan2(v[1], v[0])
    c, s = np.cos(angle), np.sin(angle)
    R = np.array([[c, -s], [s, c]])
    return X @ R.T


def mirror(positions_2d, leader: int = LEADER, pointed: int = POINTED) -> np.ndarray:
    """Reflect across the line through the leader and the pointed device."""
    X = np.asarray(positions_2d, dtype=float)
    origin = X[leader]
    u = X[pointed] - origin
    norm = np.hypot(*u)
    if norm < 1e-9:
        raise DegenerateGeometryError("leader and pointed device coincide in 2D")
    u = u / norm
    R = X - origin
    return origin + 2 * np.outer(R @ u, u) - R


def flip_vote(positions_2d, flip_evidence, leader: int = LEADER, pointed: int = POINTED) -> int:
    """Sum over voters of sgn(m_i - n_i) * sgn(side of i w.r.t. leader->pointed)."""
    X = np.asarray(positions_2d, dtype=float)
    x0, y0 = X[leader]
    x1, y1 = X[pointed]
    vote = 0
    for i, (m, n) in flip_evidence.items():
        if i in (leader, pointed) or i >= len(X):
            continue
        side = (X[i, 0] - x0) * (y1 - y0) - (X[i, 1] - y0) * (x1 - x0)
        vote += int(np.sign(m - n) * np.sign(side))
    return vote


def resolve_flip(positions_2d, flip_evidence, leader: int = LEADER, pointed: int = POINTED):
    """Choose between the layout and its mirror image by majority vote.

    Returns ``(positions, vote, confident)``. A tied vote keeps the input
    layout and reports ``confident=False``.
    """
    X = np.asarray(positions_2d, dtype=float)
    Xm = mirror(X, leader, pointed)
    v, vm = flip_vote(X, flip_evidence, leader, pointed), flip_vote(Xm, flip_evidence, leader, pointed)
    if v > vm:
        return X, v, True
    if vm > v:
        return Xm, vm, True
    return X, v, False


def lift_3d(positions_2d, h) -> np.ndarray:
    return np.column_stack([np.asarray(positions_2d, dtype=float), np.asarray(h, dtype=float)])


def solve(problem: TopologyProblem, o_max: int = MAX_OUTLIERS, tol: float = 1e-4, max_iter: int = 300,
          seed: int = 0) -> Solution:
    """Full pipeline. Degenerate leader/pointed geometry is reported in
    ``Solution.error`` with the unaligned layout."""
    D2D, clamped = project_2d(problem.D, problem.depths)
    W = problem.W
    clamped_links = [e for e in _edges(W) if clamped[e]]
    realizable = is_uniquely_realizable(W)
    if realizable:
        res = detect_outliers(D2D, W, o_max=o_max, tol=tol, max_iter=max_iter, seed=seed)
        X, dropped, stress = res.positions, res.dropped_links, res.stress
    else:
        log.warning("link graph is not uniquely realizable; skipping outlier detection")
        X, _ = embed(D2D, W, tol=tol, max_iter=max_iter, seed=seed)
        dropped, stress = [], normalized_stress(X, D2D, W)

    try:
        X = align_rotation(X, problem.leader_heading)
        X, vote, confident = resolve_flip(X, problem.flip_evidence)
    except DegenerateGeometryError as exc:
        return Solution(lift_3d(X - X[LEADER], problem.depths), stress, dropped, 0, realizable,
                        False, clamped_links, error=str(exc))
    return Solution(lift_3d(X, problem.depths), stress, dropped, vote, realizable, confident, clamped_links)
