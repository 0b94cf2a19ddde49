"""Exact entropy oracles, curvature checks, non-colinearity and pure Nash equilibria.

All entropies are in nats.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

PROB_TOL = 1e-12


class ColinearityError(ValueError):
    """Two alphabet symbols share a ray (or one is zero); re-embed the alphabet."""

    def __init__(self, pair):
        self.pair = pair
        super().__init__(f"embeddings of {pair[0]!r} and {pair[1]!r} are colinear or zero; "
                         "re-embed the alphabet with pairwise non-colinear vectors")


@dataclass
class DiscreteJoint:
    """P(X_1..X_T, Y) as a dense table of shape (|A_1|, ..., |A_T|, |Y|)."""
    alphabets: list[list]
    labels: list
    table: np.ndarray

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=np.float64)
        want = tuple(len(a) for a in self.alphabets) + (len(self.labels),)
        if self.table.shape != want:
            raise ValueError(f"table shape {self.table.shape} does not match alphabets {want}")
        if np.any(self.table < 0):
            raise ValueError("negative probability")
        if abs(self.table.sum() - 1.0) > PROB_TOL:
            raise ValueError(f"probabilities sum to {self.table.sum()!r}, not 1")

    @property
    def num_positions(self) -> int:
        return len(self.alphabets)

    def marginal(self, keep) -> np.ndarray:
        """Marginal over the kept positions (0-based) and Y."""
        keep = sorted(set(keep))
        drop = tuple(t for t in range(self.num_positions) if t not in keep)
        return self.table.sum(axis=drop)


def _xlogx(p: np.ndarray) -> np.ndarray:
    out = np.zeros_like(p)
    nz = p > 0
    out[nz] = p[nz] * np.log(p[nz])
    return out


def entropy_y_given(groups: np.ndarray) -> float:
    """H(Y | G) for a table of shape (num_groups, |Y|) of joint probabilities."""
    groups = np.asarray(groups, dtype=np.float64)
    pg = groups.sum(axis=-1)
    return float(_xlogx(pg).sum() - _xlogx(groups).sum())


def conditional_entropy(joint: DiscreteJoint, visible) -> float:
    """Exact H(Y | X_visible); ``visible`` holds 0-based positions."""
    visible = sorted(set(visible))
    for t in visible:
        if not 0 <= t < joint.num_positions:
            raise ValueError(f"position {t} out of range")
    m = joint.marginal(visible)
    return entropy_y_given(m.reshape(-1, len(joint.labels)))


# -- landscapes ---------------------------------------------------------

@dataclass
class LandscapeGrid:
    grid: np.ndarray
    loss: np.ndarray
    kind: str
    failed: np.ndarray | None = None

    KINDS = ("rationale-oracle", "attention-oracle", "rationale-empirical", "attention-empirical")

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        self.loss = np.asarray(self.loss, dtype=np.float64)
        if self.failed is None:
            self.failed = np.zeros(len(self.grid), dtype=bool)
        self.failed = np.asarray(self.failed, dtype=bool)
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown landscape kind {self.kind!r}")
        if self.grid.shape != self.loss.shape or len(self.grid) < 2:
            raise ValueError("grid and loss must be equal-length with at least 2 points")
        if np.any(np.diff(self.grid) <= 0) or self.grid[0] != 0.0 or self.grid[-1] != 1.0:
            raise ValueError("grid must be strictly increasing from 0 to 1")

    def rows(self):
        for g, l, f in zip(self.grid, self.loss, self.failed):
            yield g, l, self.kind, bool(f)

    def interior_max_excess(self) -> float:
        """max over interior points of loss minus the larger corner."""
        ok = ~self.failed[1:-1]
        corner = max(self.loss[0], self.loss[-1])
        inner = self.loss[1:-1][ok]
        return float(inner.max() - corner) if inner.size else float("-inf")


def default_grid(n: int = 21) -> np.ndarray:
    if n < 2:
        raise ValueError("grid needs at least 2 points")
    return np.linspace(0.0, 1.0, n)


def _check_two(joint: DiscreteJoint):
    if joint.num_positions != 2:
        raise ValueError("landscape oracles cover the two-position setting")


def oracle_rationale_landscape(joint: DiscreteJoint, grid=None) -> LandscapeGrid:
    """L_r*(pi_1) = H(Y | Z) with Z = (selected position, its value).

    Enumerates Z directly; with a constant selection policy this is the
    affine blend of the two single-position entropies.
    """
    _check_two(joint)
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    per_pos = [joint.marginal([t]) for t in range(2)]  # (|A_t|, |Y|)
    loss = []
    for g in grid:
        groups = np.concatenate([g * per_pos[0], (1.0 - g) * per_pos[1]], axis=0)
        loss.append(entropy_y_given(groups))
    return LandscapeGrid(grid, np.array(loss), "rationale-oracle")


def one_hot_embeddings(joint: DiscreteJoint) -> dict:
    """Distinct one-hot vector per distinct symbol across all alphabets."""
    symbols = list(dict.fromkeys(s for a in joint.alphabets for s in a))
    eye = np.eye(len(symbols))
    return {s: eye[i] for i, s in enumerate(symbols)}


def check_noncolinearity(embeddings: dict, tol: float = 1e-9):
    """Return (True, None) or (False, offending pair).

    A pair fails when the vectors share a ray: cosine similarity 1 within
    ``tol``, or either vector is zero.
    """
    if len(embeddings) < 2:
        raise ValueError("need at least two symbols")
    items = [(k, np.asarray(v, dtype=np.float64)) for k, v in embeddings.items()]
    for (ka, a), (kb, b) in itertools.combinations(items, 2):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0.0 or nb == 0.0:
            return False, (ka, kb)
        if float(a @ b) / (na * nb) >= 1.0 - tol:
            return False, (ka, kb)
    return True, None


def oracle_attention_landscape(joint: DiscreteJoint, grid=None, embeddings: dict | None = None,
                               decimals: int = 9) -> LandscapeGrid:
    """L_a*(alpha_1) = H(Y | alpha ⊙ X), enumerating the position-preserving keys.

    Keys are rounded to ``decimals`` places so that equal vectors group
    together. Raises :class:`ColinearityError` if the embeddings fail the
    non-colinearity check.
    """
    _check_two(joint)
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    emb = one_hot_embeddings(joint) if embeddings is None else embeddings
    ok, pair = check_noncolinearity(emb)
    if not ok:
        raise ColinearityError(pair)
    a1, a2 = joint.alphabets
    loss = []
    for g in grid:
        groups: dict[tuple, np.ndarray] = {}
        for i, x1 in enumerate(a1):
            k1 = tuple(np.round(g * np.asarray(emb[x1], dtype=np.float64), decimals) + 0.0)
            for j, x2 in enumerate(a2):
                k2 = tuple(np.round((1.0 - g) * np.asarray(emb[x2], dtype=np.float64), decimals) + 0.0)
                key = k1 + k2
                acc = groups.get(key)
                if acc is None:
                    groups[key] = joint.table[i, j].copy()
                else:
                    acc += joint.table[i, j]
        loss.append(entropy_y_given(np.array(list(groups.values()))))
    return LandscapeGrid(grid, np.array(loss), "attention-oracle")


# -- curvature ---------------------------------------------------------

@dataclass
class CurvatureReport:
    second_differences: list[float]
    concave: bool
    convex: bool
    verdict: str
    tol: float
    midpoint_checks: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"second_differences": self.second_differences, "concave": self.concave,
                "convex": self.convex, "verdict": self.verdict, "tol": self.tol,
                "midpoint_checks": self.midpoint_checks}


def check_curvature(landscape: LandscapeGrid, tol: float = 1e-6,
                    betas=(0.25, 0.5, 0.75)) -> CurvatureReport:
    """Second differences plus midpoint inequalities on on-grid pairs.

    For each beta and each pair of grid points (a, b) whose blend
    beta*a + (1-beta)*b is itself a grid point, checks
    f(blend) >= beta f(a) + (1-beta) f(b) - tol (concave) and the reverse
    (convex). Uniform spacing is not required for the midpoint checks; the
    second differences assume it.
    """
    g, f = landscape.grid, landscape.loss
    if len(g) < 3:
        raise ValueError("curvature needs at least 3 grid points")
    d2 = [float(f[j - 1] - 2 * f[j] + f[j + 1]) for j in range(1, len(g) - 1)]
    concave = all(v <= tol for v in d2)
    convex = all(v >= -tol for v in d2)
    checks = []
    index = {round(float(x), 12): k for k, x in enumerate(g)}
    for beta in betas:
        for a, b in itertools.permutations(range(len(g)), 2):
            m = index.get(round(beta * g[a] + (1 - beta) * g[b], 12))
            if m is None:
                continue
            chord = beta * f[a] + (1 - beta) * f[b]
            cc = bool(f[m] >= chord - tol)
            cv = bool(f[m] <= chord + tol)
            concave &= cc
            convex &= cv
            checks.append({"beta": beta, "a": float(g[a]), "b": float(g[b]),
                           "value": float(f[m]), "chord": float(chord),
                           "concave_ok": cc, "convex_ok": cv})
    if concave:
        verdict = "concave"
    elif convex:
        verdict = "convex"
    else:
        verdict = "mixed"
    return CurvatureReport(d2, concave, convex, verdict, tol, checks)


# -- games -----------------------------------------------------------

@dataclass
class PayoffTable:
    """Payoffs as an (m, n, 2) array: [..., 0] row player, [..., 1] column player."""
    payoffs: np.ndarray
    row_labels: list[str] | None = None
    col_labels: list[str] | None = None

    def __post_init__(self):
        self.payoffs = np.asarray(self.payoffs, dtype=np.float64)
        if self.payoffs.ndim != 3 or self.payoffs.shape[2] != 2:
            raise ValueError("payoffs must have shape (rows, cols, 2)")
        if not np.all(np.isfinite(self.payoffs)):
            raise ValueError("payoffs must be finite")


def find_pure_nash(table: PayoffTable) -> list[tuple[int, int]]:
    """Cells where neither player gains by a unilateral deviation."""
    row, col = table.payoffs[..., 0], table.payoffs[..., 1]
    best_row = row >= row.max(axis=0, keepdims=True)
    best_col = col >= col.max(axis=1, keepdims=True)
    return [tuple(map(int, c)) for c in np.argwhere(best_row & best_col)]


def accordance_table() -> PayoffTable:
    """Generator picks X1/X2; predictor has overfit X1/X2. Payoffs are negative losses."""
    pay = np.array([[[-1, -1], [-10, -10]],
                    [[-20, -20], [-2, -2]]], dtype=np.float64)
    return PayoffTable(pay, ["select X1", "select X2"], ["overfit X1", "overfit X2"])
