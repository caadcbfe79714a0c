"""Influence scoring of training samples and the teacher/label data split.

Upweighting sample ``i`` by an infinitesimal ``eps`` moves the optimum by
``-H^{-1} g_i`` where ``H`` is the mean training Hessian and ``g_i`` the
sample's loss gradient. Everything here reduces to solving damped systems
``(H + damping * I) u = v``, either with a factorised dense Hessian or with
matrix-free conjugate gradients over Hessian-vector products.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg

from .data import Dataset, round_half_up
from .errors import ConvergenceError, InvalidArgument, NumericalError, ValidationError
from .losses import Batch, LossSpec
from .model import DEFAULT_HESSIAN_LIMIT, exact_hessian, hvp, params_checksum
from .numcore import make_rng

logger = logging.getLogger(__name__)

SOLVERS = ("exact", "conjugate_gradient")
SCALARIZATIONS = ("param_norm", "self_influence")
ORDERS = ("highest_first", "lowest_first", "random")


@dataclass(frozen=True)
class InfluenceConfig:
    solver: str = "exact"
    damping: float = 1e-3
    cg_max_iters: int = 100
    cg_tol: float = 1e-6
    scalarization: str = "param_norm"
    max_exact_params: int = DEFAULT_HESSIAN_LIMIT
    # L2 penalty of the teacher's training loss; part of every per-sample loss
    l2: float = 0.0

    def __post_init__(self):
        if self.solver not in SOLVERS:
            raise InvalidArgument(f"unknown solver {self.solver!r}")
        if self.scalarization not in SCALARIZATIONS:
            raise InvalidArgument(f"unknown scalarization {self.scalarization!r}")
        if not self.damping >= 0:
            raise InvalidArgument("damping must be non-negative")
        if not (self.cg_tol > 0 and self.cg_max_iters > 0):
            raise InvalidArgument("cg_tol and cg_max_iters must be positive")

    @property
    def loss(self) -> LossSpec:
        return LossSpec(kind="ce", l2=self.l2)

    def to_dict(self) -> dict:
        return {
            "solver": self.solver,
            "damping": self.damping,
            "cg_max_iters": self.cg_max_iters,
            "cg_tol": self.cg_tol,
            "scalarization": self.scalarization,
            "max_exact_params": self.max_exact_params,
            "l2": self.l2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InfluenceConfig":
        return cls(**d)


@dataclass
class InfluenceReport:
    scores: np.ndarray
    config: InfluenceConfig
    teacher_checksum: str
    dataset_checksum: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.all(np.isfinite(self.scores)):
            raise NumericalError("influence scores contain non-finite values")


@dataclass
class SplitPlan:
    dt_indices: np.ndarray
    ds_indices: np.ndarray
    pct: float
    order: str
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.dt_indices) + len(self.ds_indices)

    def to_dict(self) -> dict:
        return {
            "pct": self.pct,
            "order": self.order,
            "seed": self.seed,
            "dt_indices": [int(i) for i in self.dt_indices],
            "ds_indices": [int(i) for i in self.ds_indices],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(np.asarray(d["dt_indices"], dtype=np.int64), np.asarray(d["ds_indices"], dtype=np.int64),
                   float(d["pct"]), d["order"], int(d.get("seed", 0)))

    def validate(self, n: int) -> None:
        both = np.concatenate([self.dt_indices, self.ds_indices])
        if both.size != n or not np.array_equal(np.sort(both), np.arange(n)):
            raise ValidationError(f"split plan does not partition 0..{n - 1}")


def as_batch(data) -> Batch:
    if isinstance(data, Batch):
        return data
    if isinstance(data, Dataset):
        return Batch(data.features, data.labels)
    x, y = data
    return Batch(x, y)


# ---------------------------------------------------------------------------
# gradients and solvers


def per_sample_grad(teacher, sample, cfg: InfluenceConfig | None = None) -> np.ndarray:
    """Gradient of the training loss at one ``(x, y)`` sample."""
    cfg = cfg or InfluenceConfig()
    x, y = sample
    _, g = teacher.loss_and_grad(Batch(np.atleast_2d(x), [y]), cfg.loss)
    return g


def conjugate_gradient(matvec, b: np.ndarray, tol: float, max_iters: int):
    """Solve ``A u = b`` for symmetric positive definite ``A``.

    Stops once the true residual ``||A u - b||`` is at most ``tol * ||b||``.
    Returns ``(u, iterations)``; raises ConvergenceError otherwise, including
    when a search direction shows non-positive curvature.
    """
    b = np.asarray(b, dtype=np.float64)
    bnorm = float(np.linalg.norm(b))
    u = np.zeros_like(b)
    if bnorm == 0.0:
        return u, 0
    target = tol * bnorm
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    it = 0
    while it < max_iters:
        Ap = matvec(p)
        curv = float(p @ Ap)
        if not curv > 0:
            raise ConvergenceError("non-positive curvature; damped Hessian is not positive definite",
                                   residual=float(np.sqrt(rs)), iterations=it)
        alpha = rs / curv
        u = u + alpha * p
        r = r - alpha * Ap
        rs_new = float(r @ r)
        it += 1
        if np.sqrt(rs_new) <= target:
            # the recursive residual drifts; confirm against the operator
            r = b - matvec(u)
            rs_new = float(r @ r)
            if np.sqrt(rs_new) <= target:
                return u, it
            p = r.copy()
            rs = rs_new
            continue
        p = r + (rs_new / rs) * p
        rs = rs_new
    residual = float(np.linalg.norm(b - matvec(u)))
    if residual <= target:
        return u, it
    raise ConvergenceError("conjugate gradient did not converge", residual=residual, iterations=it)


class InverseHessian:
    """Reusable solver for ``(H + damping * I) u = v`` at fixed parameters.

    The dense factorisation (exact solver) happens once at construction; after
    that the object is read-only and ``solve`` may be called from several
    threads.
    """

    def __init__(self, model, data, cfg: InfluenceConfig):
        self.model = model
        self.batch = as_batch(data)
        self.cfg = cfg
        self.n_params = model.flat_params().size
        self._lu = None
        self.matrix = None
        if cfg.solver == "exact":
            H = exact_hessian(model, self.batch, cfg.loss, max_params=cfg.max_exact_params)
            H[np.diag_indices_from(H)] += cfg.damping
            self.matrix = H
            if not np.all(np.isfinite(H)):
                raise NumericalError("Hessian contains non-finite entries")
            lu, piv = scipy.linalg.lu_factor(H, check_finite=False)
            pivots = np.abs(np.diag(lu))
            if pivots.min() <= np.finfo(float).eps * H.shape[0] * max(pivots.max(), 1e-300):
                raise NumericalError("damped Hessian is singular to working precision")
            self._lu = (lu, piv)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        return hvp(self.model, self.batch, v, self.cfg.loss) + self.cfg.damping * v

    def solve(self, v) -> np.ndarray:
        """Solve for one vector (shape (P,)) or several columns (shape (P, K))."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape[0] != self.n_params:
            raise InvalidArgument(f"vector has {v.shape[0]} entries, model has {self.n_params} parameters")
        if not np.all(np.isfinite(v)):
            raise InvalidArgument("right-hand side is not finite")
        if self._lu is not None:
            u = scipy.linalg.lu_solve(self._lu, v, check_finite=False)
            self._check_residual(v, u)
            return u
        if v.ndim == 1:
            return conjugate_gradient(self.matvec, v, self.cfg.cg_tol, self.cfg.cg_max_iters)[0]
        return np.column_stack([self.solve(v[:, k]) for k in range(v.shape[1])])

    def _check_residual(self, v, u):
        res = np.linalg.norm(self.matrix @ u - v, axis=0)
        bound = self.cfg.cg_tol * np.linalg.norm(v, axis=0)
        bad = res > bound
        if np.any(bad):
            worst = float(np.max(res - bound))
            raise NumericalError(f"dense solve residual exceeds tolerance by {worst:.3e}; "
                                 "Hessian is too ill-conditioned, increase damping")


def inverse_hvp(teacher, data, v, cfg: InfluenceConfig) -> np.ndarray:
    return InverseHessian(teacher, data, cfg).solve(v)


def param_influence(teacher, data, sample, cfg: InfluenceConfig, solver: InverseHessian | None = None):
    """Estimated d(theta)/d(eps) when ``sample`` is upweighted by eps."""
    solver = solver or InverseHessian(teacher, data, cfg)
    return -solver.solve(per_sample_grad(teacher, sample, cfg))


def prediction_influence(teacher, data, train_sample, test_sample, cfg: InfluenceConfig,
                         solver: InverseHessian | None = None) -> float:
    """Estimated d L(test) / d(eps) when ``train_sample`` is upweighted."""
    solver = solver or InverseHessian(teacher, data, cfg)
    g_test = per_sample_grad(teacher, test_sample, cfg)
    g_train = per_sample_grad(teacher, train_sample, cfg)
    return float(-(g_test @ solver.solve(g_train)))


def score_dataset(teacher, data, cfg: InfluenceConfig) -> InfluenceReport:
    """One scalar influence score per training sample.

    ``param_norm`` is the L2 norm of the parameter influence vector,
    ``self_influence`` the quadratic form ``g^T (H + damping I)^{-1} g``.
    """
    batch = as_batch(data)
    solver = InverseHessian(teacher, batch, cfg)
    _, G = teacher.per_sample_grads(batch, cfg.loss)
    U = solver.solve(G.T)
    if cfg.scalarization == "param_norm":
        scores = np.linalg.norm(U, axis=0)
    else:
        scores = np.einsum("pn,np->n", U, G)
    checksum = data.checksum if isinstance(data, Dataset) else ""
    logger.info("scored %d samples (solver=%s, %s)", len(scores), cfg.solver, cfg.scalarization)
    return InfluenceReport(scores, cfg, params_checksum(teacher), checksum)


def selection_order(scores, order: str, seed: int = 0) -> np.ndarray:
    """Sample indices in the order they are moved into the teacher-supervised set."""
    scores = np.asarray(scores, dtype=np.float64)
    idx = np.arange(scores.size)
    if order == "highest_first":
        return np.lexsort((idx, -scores))
    if order == "lowest_first":
        return np.lexsort((idx, scores))
    if order == "random":
        return make_rng(seed).permutation(scores.size)
    raise InvalidArgument(f"unknown order {order!r}")


def rank_and_split(report, pct: float, order: str = "highest_first", seed: int = 0) -> SplitPlan:
    """Route ``round_half_up(pct * N)`` samples to the teacher-supervised set.

    ``report`` may be an :class:`InfluenceReport` or a plain score array.
    Index lists in the plan are sorted ascending.
    """
    scores = report.scores if isinstance(report, InfluenceReport) else np.asarray(report, dtype=np.float64)
    if not 0.0 <= pct <= 1.0:
        raise InvalidArgument(f"pct must lie in [0, 1], got {pct}")
    ranked = selection_order(scores, order, seed)
    k = round_half_up(pct * scores.size)
    return SplitPlan(np.sort(ranked[:k]), np.sort(ranked[k:]), float(pct), order, int(seed))


# ---------------------------------------------------------------------------
# files


def write_scores_csv(path, report: InfluenceReport, header: str = "") -> None:
    """Columns sample_index, score, rank; rank 0 is the highest score."""
    rank = np.empty(report.scores.size, dtype=np.int64)
    rank[selection_order(report.scores, "highest_first")] = np.arange(report.scores.size)
    with open(path, "w", newline="") as fh:
        fh.write(header)
        fh.write(f"# teacher_checksum={report.teacher_checksum}\n")
        fh.write(f"# dataset_checksum={report.dataset_checksum}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_index", "score", "rank"])
        for i, (s, r) in enumerate(zip(report.scores, rank)):
            w.writerow([i, repr(float(s)), int(r)])


def read_scores_csv(path) -> InfluenceReport:
    meta, rows = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].strip().partition("=")
            meta[key.strip()] = value.strip()
        elif line:
            rows.append(line)
    reader = csv.reader(rows)
    header = next(reader, None)
    if header != ["sample_index", "score", "rank"]:
        raise ValidationError(f"{path}: unexpected scores header {header}")
    data = [(int(r[0]), float(r[1])) for r in reader]
    idx = [i for i, _ in data]
    if idx != list(range(len(idx))):
        raise ValidationError(f"{path}: sample_index column must be 0..N-1 in order")
    return InfluenceReport(np.array([s for _, s in data]), InfluenceConfig(),
                           meta.get("teacher_checksum", ""), meta.get("dataset_checksum", ""))


def write_split_json(path, plan: SplitPlan, extra: dict | None = None) -> None:
    doc = {"format_version": 1, **plan.to_dict()}
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_split_json(path) -> SplitPlan:
    return SplitPlan.from_dict(json.loads(Path(path).read_text()))
