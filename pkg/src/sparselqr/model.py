"""Problem data for sparse LQR synthesis: plants, costs, generators and files.

Problem files are JSON documents holding named dense matrices as row-major
nested lists. Any matrix may instead be given as a string path to a
header-free CSV file (resolved relative to the problem file). Infinite
entries of ``Lambda`` are written as the string ``"inf"``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.sparse.csgraph import connected_components

__all__ = [
    "Plant",
    "CostSpec",
    "Gain",
    "ProblemFile",
    "ProblemFormatError",
    "validate",
    "mass_spring",
    "random_network",
    "read_problem",
    "write_problem",
]

_SYM_TOL = 1e-10


class ProblemFormatError(ValueError):
    """A problem file could not be parsed; ``field`` names the culprit."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _frozen(a, name: str, ndim: int = 2, allow_inf: bool = False) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        raise ValueError(f"{name} must be a {ndim}-d array, got shape {arr.shape}")
    bad = np.isnan(arr) if allow_inf else ~np.isfinite(arr)
    if bad.any():
        raise ValueError(f"{name} has non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Plant:
    """Open-loop dynamics ``dx = (A x + B u) dt + W^{1/2} de``."""

    A: np.ndarray
    B: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        for name in ("A", "B", "W"):
            object.__setattr__(self, name, _frozen(getattr(self, name), name))
        n = self.A.shape[0]
        if self.A.shape != (n, n):
            raise ValueError(f"A must be square, got shape {self.A.shape}")
        if self.B.shape[0] != n:
            raise ValueError(f"B must have {n} rows to match A, got shape {self.B.shape}")
        if self.W.shape != (n, n):
            raise ValueError(f"W must be {n}x{n} to match A, got shape {self.W.shape}")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def shifted(self, nu: float) -> "Plant":
        """The plant with ``A - nu*I`` in place of ``A``."""
        return Plant(self.A - nu * np.eye(self.n), self.B, self.W)


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Quadratic weights ``Q``, ``R`` and the l1 weight matrix ``Lambda``.

    ``Lambda`` entries lie in ``[0, inf]``; an infinite entry pins the
    corresponding gain entry to zero.
    """

    Q: np.ndarray
    R: np.ndarray
    Lambda: np.ndarray

    def __post_init__(self):
        for name in ("Q", "R", "Lambda"):
            object.__setattr__(self, name, _frozen(getattr(self, name), name,
                                                   allow_inf=name == "Lambda"))
        n = self.Q.shape[0]
        m = self.R.shape[0]
        if self.Q.shape != (n, n):
            raise ValueError(f"Q must be square, got shape {self.Q.shape}")
        if self.R.shape != (m, m):
            raise ValueError(f"R must be square, got shape {self.R.shape}")
        if self.Lambda.shape != (m, n):
            raise ValueError(f"Lambda must be {m}x{n}, got shape {self.Lambda.shape}")
        if (self.Lambda < 0).any():
            raise ValueError("Lambda entries must be non-negative")

    def with_lambda(self, Lambda) -> "CostSpec":
        """Copy with a new penalty; a scalar expands to a uniform matrix."""
        Lam = np.asarray(Lambda, dtype=float)
        if Lam.ndim == 0:
            Lam = np.full(self.Lambda.shape, float(Lam))
        return CostSpec(self.Q, self.R, Lam)

    def with_pattern(self, pattern) -> "CostSpec":
        """Fixed-support cost: weight 0 on ``pattern`` and ``inf`` elsewhere."""
        mask = np.asarray(pattern, dtype=bool)
        return CostSpec(self.Q, self.R, np.where(mask, 0.0, np.inf))


@dataclass(frozen=True, eq=False)
class Gain:
    """Feedback gain ``u = K x`` with its cached closed-loop stability margin."""

    K: np.ndarray
    stability_margin: float

    def __post_init__(self):
        object.__setattr__(self, "K", _frozen(self.K, "K"))

    @classmethod
    def for_plant(cls, plant: Plant, K) -> "Gain":
        K = np.asarray(K, dtype=float)
        eigs = np.linalg.eigvals(plant.A + plant.B @ K)
        return cls(K, float(-np.max(eigs.real)))

    @property
    def stable(self) -> bool:
        return self.stability_margin > 0


@dataclass(frozen=True, eq=False)
class ProblemFile:
    plant: Plant
    cost: CostSpec
    K0: Optional[np.ndarray] = None
    lam: Optional[float] = None
    extra: dict = field(default_factory=dict)


def _psd_violation(M: np.ndarray, strict: bool) -> bool:
    eigs = np.linalg.eigvalsh((M + M.T) / 2)
    if strict:
        return eigs.size > 0 and eigs.min() <= 0
    scale = max(np.linalg.norm(M, 2), 1.0) if M.size else 1.0
    return eigs.size > 0 and eigs.min() < -_SYM_TOL * scale


def _asymmetric(M: np.ndarray) -> bool:
    scale = max(np.abs(M).max(), 1.0) if M.size else 1.0
    return np.abs(M - M.T).max(initial=0.0) > _SYM_TOL * scale


def validate(plant: Plant, cost: CostSpec) -> list[str]:
    """Return a list of violated problem invariants (empty when valid)."""
    report = []
    n, m = plant.n, plant.m
    if cost.Q.shape != (n, n):
        report.append(f"Q has shape {cost.Q.shape}, expected {(n, n)}")
    if cost.R.shape != (m, m):
        report.append(f"R has shape {cost.R.shape}, expected {(m, m)}")
    if cost.Lambda.shape != (m, n):
        report.append(f"Lambda has shape {cost.Lambda.shape}, expected {(m, n)}")
    if _asymmetric(plant.W):
        report.append("W not symmetric")
    elif _psd_violation(plant.W, strict=False):
        report.append("W not positive semidefinite")
    if cost.Q.shape == (n, n):
        if _asymmetric(cost.Q):
            report.append("Q not symmetric")
        elif _psd_violation(cost.Q, strict=False):
            report.append("Q not positive semidefinite")
    if cost.R.shape == (m, m):
        if _asymmetric(cost.R):
            report.append("R not symmetric")
        elif _psd_violation(cost.R, strict=True):
            report.append("R not positive definite")
    if np.isnan(cost.Lambda).any() or (cost.Lambda < 0).any():
        report.append("Lambda has negative or NaN entries")
    for name, M in (("A", plant.A), ("B", plant.B), ("W", plant.W), ("Q", cost.Q), ("R", cost.R)):
        if not np.isfinite(M).all():
            report.append(f"{name} has non-finite entries")
    return report


def mass_spring(N: int, R_scale: float = 10.0) -> tuple[Plant, CostSpec]:
    """Chain of ``N`` unit masses joined by unit springs.

    States are positions then velocities (``n = 2N``), one force input per
    mass (``m = N``). ``Q = I``, ``R = R_scale*I``, ``W = B B^T`` and the
    penalty starts at zero.
    """
    N = int(N)
    if N < 1:
        raise ValueError("mass_spring needs N >= 1")
    if R_scale <= 0:
        raise ValueError("R_scale must be positive")
    T = -2.0 * np.eye(N) + np.eye(N, k=1) + np.eye(N, k=-1)
    Z, I = np.zeros((N, N)), np.eye(N)
    A = np.block([[Z, I], [T, Z]])
    B = np.vstack([Z, I])
    plant = Plant(A, B, B @ B.T)
    cost = CostSpec(np.eye(2 * N), R_scale * np.eye(N), np.zeros((N, 2 * N)))
    return plant, cost


def random_network(n_nodes: int, density: float, seed: int) -> tuple[Plant, CostSpec]:
    """Second-order consensus network on a random connected graph.

    Each node has a position and velocity state and one input acting on its
    velocity; positions couple through the negated (unit-weight) Laplacian.
    Components left disconnected by the edge draw are chained together.
    """
    n_nodes = int(n_nodes)
    if n_nodes < 2:
        raise ValueError("random_network needs n_nodes >= 2")
    if not 0 < density <= 1:
        raise ValueError("density must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    upper = np.triu(rng.random((n_nodes, n_nodes)) < density, k=1)
    adj = (upper | upper.T).astype(float)
    ncomp, labels = connected_components(adj, directed=False)
    if ncomp > 1:
        reps = [int(rng.choice(np.flatnonzero(labels == c))) for c in range(ncomp)]
        for a, b in zip(reps[:-1], reps[1:]):
            adj[a, b] = adj[b, a] = 1.0
    lap = np.diag(adj.sum(axis=1)) - adj
    Z, I = np.zeros((n_nodes, n_nodes)), np.eye(n_nodes)
    A = np.block([[Z, I], [-lap, Z]])
    B = np.vstack([Z, I])
    plant = Plant(A, B, B @ B.T)
    cost = CostSpec(np.eye(2 * n_nodes), 10.0 * np.eye(n_nodes), np.zeros((n_nodes, 2 * n_nodes)))
    return plant, cost


# --- serialization ---------------------------------------------------------

def _encode(M: np.ndarray) -> list:
    return [[("inf" if np.isposinf(v) else float(v)) for v in row] for row in np.asarray(M)]


def _decode(value, name: str, base: Path, allow_inf: bool = False) -> np.ndarray:
    if isinstance(value, str):
        path = base / value
        try:
            rows = np.loadtxt(path, delimiter=",", ndmin=2, dtype=str)
        except OSError as exc:
            raise ProblemFormatError(name, f"cannot read CSV {path}: {exc}") from None
        value = rows.tolist()
    if not isinstance(value, list) or not all(isinstance(r, list) for r in value):
        raise ProblemFormatError(name, "expected a nested list of rows or a CSV path")
    if len({len(r) for r in value}) > 1:
        raise ProblemFormatError(name, "rows have unequal lengths")
    out = []
    for row in value:
        parsed = []
        for v in row:
            if isinstance(v, str) and v.strip().lower() in ("inf", "+inf", "infinity"):
                if not allow_inf:
                    raise ProblemFormatError(name, "infinite entries are only allowed in Lambda")
                parsed.append(np.inf)
                continue
            try:
                parsed.append(float(v))
            except (TypeError, ValueError):
                raise ProblemFormatError(name, f"non-numeric entry {v!r}") from None
        out.append(parsed)
    arr = np.array(out, dtype=float)
    if arr.size == 0:
        arr = arr.reshape(len(value), 0)
    return arr


def read_problem(path) -> ProblemFile:
    """Parse a problem file. Shape errors name the inconsistent matrix."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ProblemFormatError("document", f"invalid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ProblemFormatError("document", "top level must be an object")
    base = path.parent
    mats = {}
    for name in ("A", "B", "W", "Q", "R"):
        if name not in doc:
            raise ProblemFormatError(name, "missing")
        mats[name] = _decode(doc[name], name, base)

    n = mats["A"].shape[0]
    if mats["A"].shape != (n, n):
        raise ProblemFormatError("A", f"must be square, got {mats['A'].shape}")
    if mats["B"].shape[0] != n:
        raise ProblemFormatError("B", f"has {mats['B'].shape[0]} rows, A needs {n}")
    m = mats["B"].shape[1]
    for name, shape in (("W", (n, n)), ("Q", (n, n)), ("R", (m, m))):
        if mats[name].shape != shape:
            raise ProblemFormatError(name, f"has shape {mats[name].shape}, expected {shape}")

    lam = doc.get("lambda")
    if lam is not None:
        try:
            lam = float(lam)
        except (TypeError, ValueError):
            raise ProblemFormatError("lambda", f"not a number: {lam!r}") from None
    if "Lambda" in doc:
        Lam = _decode(doc["Lambda"], "Lambda", base, allow_inf=True)
        if Lam.shape != (m, n):
            raise ProblemFormatError("Lambda", f"has shape {Lam.shape}, expected {(m, n)}")
    else:
        Lam = np.full((m, n), lam if lam is not None else 0.0)
    if "pattern" in doc:
        pattern = _decode(doc["pattern"], "pattern", base)
        if pattern.shape != (m, n):
            raise ProblemFormatError("pattern", f"has shape {pattern.shape}, expected {(m, n)}")
        Lam = np.where(pattern != 0, Lam, np.inf)

    K0 = None
    if doc.get("K0") is not None:
        K0 = _decode(doc["K0"], "K0", base)
        if K0.shape != (m, n):
            raise ProblemFormatError("K0", f"has shape {K0.shape}, expected {(m, n)}")

    plant = Plant(mats["A"], mats["B"], mats["W"])
    cost = CostSpec(mats["Q"], mats["R"], Lam)
    extra = {k: v for k, v in doc.items()
             if k not in ("A", "B", "W", "Q", "R", "Lambda", "lambda", "pattern", "K0")}
    return ProblemFile(plant, cost, K0, lam, extra)


def write_problem(problem: ProblemFile, path) -> None:
    """Write ``problem`` as JSON. Floats are emitted with round-trip precision."""
    doc = {
        "A": _encode(problem.plant.A),
        "B": _encode(problem.plant.B),
        "W": _encode(problem.plant.W),
        "Q": _encode(problem.cost.Q),
        "R": _encode(problem.cost.R),
    }
    Lam = problem.cost.Lambda
    if problem.lam is not None and np.all(Lam == problem.lam):
        doc["lambda"] = float(problem.lam)
    else:
        doc["Lambda"] = _encode(Lam)
        if problem.lam is not None:
            doc["lambda"] = float(problem.lam)
    if problem.K0 is not None:
        doc["K0"] = _encode(problem.K0)
    doc.update(problem.extra)
    Path(path).write_text(json.dumps(doc))
