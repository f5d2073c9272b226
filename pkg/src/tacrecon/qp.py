"""Minimal latent-space perturbation forcing every reference latent into one class.

For a target class ``k`` the primal problem is::

    minimize   0.5 * ||s||^2
    subject to (w_k - w_j) . s >= m_j      for every j != k

where ``m_j`` is the worst-case (largest) required lift over the reference
latents. It is solved through its dual, a concave quadratic in ``C - 1``
nonnegative multipliers, by cyclic projected coordinate ascent; the primal
solution is recovered as ``s = V^T lambda`` and certified with the KKT
residuals.

Class indices are 0-based throughout.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from tacrecon import _backend
from tacrecon.core import RANK_TOL, ContractError, as_matrix, as_vector, matvec, row_rank

ZERO_ROW_TOL = 1e-14
KKT_TOL = 1e-6


class InfeasibleSystemError(RuntimeError):
    """A zero constraint row carries a positive margin: no perturbation can satisfy it."""

    def __init__(self, target_class: int, other_class: int, margin: float):
        self.target_class = target_class
        self.other_class = other_class
        self.margin = margin
        super().__init__(
            f"class {target_class}: weight columns of classes {target_class} and {other_class} "
            f"are identical but the required margin is {margin:.3g} > 0"
        )


@dataclass(frozen=True)
class FinalLayer:
    weights: np.ndarray  # (d_emb, C), column j is w_j
    bias: np.ndarray  # (C,)

    def __post_init__(self):
        W = as_matrix(self.weights)
        b = as_vector(self.bias)
        if W.shape[1] < 2 or W.shape[0] < 1:
            raise ContractError(f"final layer needs d_emb >= 1 and C >= 2, got {W.shape}")
        if b.shape[0] != W.shape[1]:
            raise ContractError("bias length must equal the number of classes")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ContractError("final layer contains non-finite values")
        object.__setattr__(self, "weights", W)
        object.__setattr__(self, "bias", b)

    @property
    def d_emb(self) -> int:
        return self.weights.shape[0]

    @property
    def n_classes(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class MarginSystem:
    target_class: int
    v: np.ndarray  # (C-1, d_emb); row for class j is (w_k - w_j)
    m: np.ndarray  # (C-1,) worst-case margins
    class_order: tuple[int, ...]


@dataclass
class SolverConfig:
    tol: float = 1e-8
    max_sweeps: int | None = None  # default 100 * (C-1)**2
    kkt_tol: float = KKT_TOL
    rank_tol: float = RANK_TOL
    include_bias_in_margins: bool = False
    trace: bool = False  # record the dual objective after every sweep
    workers: int = 1


@dataclass
class DualSolution:
    lam: np.ndarray
    objective: float
    iterations: int
    converged: bool
    residual: float = math.nan
    trace: list[float] = field(default_factory=list)


@dataclass
class KktReport:
    stationarity_resid: float
    primal_violation: float
    dual_violation: float
    comp_slack_resid: float
    duality_gap: float

    def certified(self, tol: float = KKT_TOL, dual_objective: float = 0.0) -> bool:
        return (
            self.stationarity_resid <= tol
            and self.primal_violation <= tol
            and self.dual_violation <= tol
            and self.comp_slack_resid <= tol
            and abs(self.duality_gap) <= tol * (1.0 + abs(dual_objective))
        )


@dataclass
class FeasibilityReport:
    rank_of_v: int
    full_row_rank: bool
    dim_condition: bool
    guaranteed_feasible: bool
    note: str = (
        "guaranteed_feasible=False only means the sufficient condition "
        "(full row rank and C-1 < d_emb) fails; the system may still be feasible"
    )


@dataclass
class PerturbationResult:
    target_class: int
    s: np.ndarray | None
    dual: DualSolution | None
    kkt: KktReport | None
    feasibility: FeasibilityReport
    certified: bool = False
    error: str | None = None

    @property
    def norm(self) -> float:
        if self.s is None:
            return math.inf
        return float(np.linalg.norm(self.s))

    def to_dict(self) -> dict:
        """JSON-ready summary; ``s`` and ``lam`` are kept at full precision."""
        return {
            "target_class": self.target_class,
            "norm": None if self.s is None else self.norm,
            "s": None if self.s is None else self.s.tolist(),
            "lam": None if self.dual is None else self.dual.lam.tolist(),
            "dual_objective": None if self.dual is None else self.dual.objective,
            "iterations": None if self.dual is None else self.dual.iterations,
            "converged": None if self.dual is None else self.dual.converged,
            "kkt": None if self.kkt is None else asdict(self.kkt),
            "feasibility": asdict(self.feasibility),
            "certified": self.certified,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PerturbationResult":
        dual = None
        if d.get("lam") is not None:
            dual = DualSolution(np.array(d["lam"], float), d["dual_objective"], d["iterations"], d["converged"])
        return cls(
            target_class=int(d["target_class"]),
            s=None if d["s"] is None else np.array(d["s"], float),
            dual=dual,
            kkt=None if d.get("kkt") is None else KktReport(**d["kkt"]),
            feasibility=FeasibilityReport(**d["feasibility"]),
            certified=bool(d["certified"]),
            error=d.get("error"),
        )


def build_margin_system(latents, layer: FinalLayer, k: int, include_bias: bool = False) -> MarginSystem:
    """Reduce the ``n * (C-1)`` per-sample constraints to one worst case per class pair."""
    X = as_matrix(latents)
    C = layer.n_classes
    if X.shape[0] < 1:
        raise ContractError("empty latent batch")
    if X.shape[1] != layer.d_emb:
        raise ContractError(f"latents have width {X.shape[1]}, final layer expects {layer.d_emb}")
    if not 0 <= k < C:
        raise ContractError(f"class index {k} out of range for {C} classes")
    order = tuple(j for j in range(C) if j != k)
    W = layer.weights
    V = np.ascontiguousarray((W[:, [k]] - W[:, list(order)]).T)
    # margins_ij = (w_k - w_j) . x_i ; the required lift is its negation
    m = np.max(-(X @ V.T), axis=0)
    if include_bias:
        b = layer.bias
        m = m - (b[k] - b[list(order)])
    return MarginSystem(k, V, np.ascontiguousarray(m), order)


def check_feasibility(system: MarginSystem, d_emb: int, tol: float = RANK_TOL) -> FeasibilityReport:
    n_con = system.v.shape[0]
    rank = row_rank(system.v, tol)
    full = rank == n_con
    dim_ok = n_con < d_emb
    return FeasibilityReport(rank, full, dim_ok, full and dim_ok)


def dual_objective(system: MarginSystem, lam) -> float:
    u = matvec(system.v.T, lam)
    return float(lam @ system.m - 0.5 * (u @ u))


def solve_dual(system: MarginSystem, cfg: SolverConfig | None = None) -> DualSolution:
    """Maximise ``lam.m - 0.5 ||V^T lam||^2`` over ``lam >= 0``.

    Each coordinate step is the exact maximiser along that coordinate,
    clipped at zero. Rows of ``V`` that vanish are frozen at zero; if such a
    row needs a positive margin the system is infeasible and
    :class:`InfeasibleSystemError` is raised.
    """
    cfg = cfg or SolverConfig()
    V, m = system.v, system.m
    n_con = V.shape[0]
    sqnorm = np.einsum("ij,ij->i", V, V)
    for j in range(n_con):
        if sqnorm[j] < ZERO_ROW_TOL and m[j] > cfg.tol:
            raise InfeasibleSystemError(system.target_class, system.class_order[j], float(m[j]))
    max_sweeps = cfg.max_sweeps if cfg.max_sweeps is not None else 100 * max(n_con, 1) ** 2
    lam = np.zeros(n_con)
    u = np.zeros(V.shape[1])
    trace = [0.0] if cfg.trace else []
    resid = _backend.complementarity_residual(V, m, sqnorm, lam, u, ZERO_ROW_TOL)
    done = 0
    if resid >= cfg.tol:
        if cfg.trace:
            while done < max_sweeps and resid >= cfg.tol:
                n, resid = _backend.cd_sweeps(V, m, sqnorm, lam, u, 1, cfg.tol, ZERO_ROW_TOL)
                done += n
                trace.append(dual_objective(system, lam))
        else:
            done, resid = _backend.cd_sweeps(V, m, sqnorm, lam, u, max_sweeps, cfg.tol, ZERO_ROW_TOL)
    return DualSolution(
        lam=lam,
        objective=dual_objective(system, lam),
        iterations=int(done),
        converged=bool(resid < cfg.tol),
        residual=float(resid),
        trace=trace,
    )


def recover_perturbation(system: MarginSystem, dual: DualSolution) -> np.ndarray:
    lam = as_vector(dual.lam)
    if lam.shape[0] != system.v.shape[0]:
        raise ContractError(f"multiplier length {lam.shape[0]} != {system.v.shape[0]} constraints")
    return matvec(system.v.T, lam)


def verify_kkt(system: MarginSystem, s, dual: DualSolution) -> KktReport:
    s = as_vector(s)
    lam = as_vector(dual.lam)
    V, m = system.v, system.m
    u = matvec(V.T, lam)
    Vs = matvec(V, s)
    slack = Vs - m
    primal_obj = 0.5 * float(s @ s)
    dual_obj = float(lam @ m - 0.5 * (u @ u))
    return KktReport(
        stationarity_resid=float(np.max(np.abs(s - u), initial=0.0)),
        primal_violation=float(max(0.0, np.max(-slack, initial=-math.inf))),
        dual_violation=float(max(0.0, -np.min(lam, initial=math.inf))),
        comp_slack_resid=float(np.max(np.abs(lam * slack), initial=0.0)),
        duality_gap=primal_obj - dual_obj,
    )


def solve_class(latents, layer: FinalLayer, k: int, cfg: SolverConfig | None = None) -> PerturbationResult:
    cfg = cfg or SolverConfig()
    system = build_margin_system(latents, layer, k, include_bias=cfg.include_bias_in_margins)
    feas = check_feasibility(system, layer.d_emb, cfg.rank_tol)
    try:
        dual = solve_dual(system, cfg)
    except InfeasibleSystemError as exc:
        return PerturbationResult(k, None, None, None, feas, certified=False, error=str(exc))
    s = recover_perturbation(system, dual)
    kkt = verify_kkt(system, s, dual)
    certified = kkt.certified(cfg.kkt_tol, dual.objective)
    error = None
    if not certified and kkt.primal_violation > cfg.kkt_tol and not feas.guaranteed_feasible:
        # dual ascent did not close the gap on a system without a feasibility guarantee:
        # treat it like an infeasible class rather than trusting a divergent norm
        error = f"class {k}: solver did not converge and the feasibility condition fails"
        return PerturbationResult(k, None, dual, kkt, feas, certified=False, error=error)
    return PerturbationResult(k, s, dual, kkt, feas, certified=certified, error=error)


def perturbations_for_all_classes(latents, layer: FinalLayer, cfg: SolverConfig | None = None) -> list[PerturbationResult]:
    """Solve every class independently; results come back ordered by class index."""
    cfg = cfg or SolverConfig()
    X = as_matrix(latents)
    classes = range(layer.n_classes)
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            return list(pool.map(lambda k: solve_class(X, layer, k, cfg), classes))
    return [solve_class(X, layer, k, cfg) for k in classes]
