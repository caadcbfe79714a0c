"""Teacher training, distillation with label revision and data selection.

Each step draws a combined minibatch from the teacher-supervised set D^t and
the label-supervised set D^s. D^s rows get plain cross-entropy. D^t rows are
split by whether the frozen teacher classifies them correctly: right rows get
CE plus a logit-matching term, wrong rows get MSE against a revised soft
label. The batch loss is the sum of the two portions' means.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .errors import InvalidArgument, NumericalError
from .influence import SplitPlan
from .losses import LABEL, RIGHT, WRONG, Batch, LossSpec
from .model import MLP, ModelSpec, exact_hessian, init_model
from .numcore import argmax, make_rng, softmax
from .revision import EtaMode, partition_by_correctness, revise_many

logger = logging.getLogger(__name__)

TRAINLOG_COLUMNS = ("epoch", "lr", "loss_total", "loss_ce_ds", "loss_ce_right",
                    "loss_distill_right", "loss_mse_wrong", "test_acc")


@dataclass(frozen=True)
class DistillConfig:
    loss: LossSpec = field(default_factory=lambda: LossSpec(kind="lrds"))
    eta_mode: EtaMode = field(default_factory=EtaMode)
    pct: float = 0.8
    order: str = "highest_first"
    epochs: int = 120
    batch_size: int = 64
    lr0: float = 0.05
    lr_decay_epochs: tuple[int, ...] = (60, 90, 105)
    lr_decay_factor: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    # False keeps every teacher-supervised row on raw teacher logits (vanilla KD)
    revise: bool = True

    def __post_init__(self):
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))
        d = self.lr_decay_epochs
        if self.epochs < 0 or self.batch_size < 1:
            raise InvalidArgument("epochs must be >= 0 and batch_size >= 1")
        if not self.lr0 > 0:
            raise InvalidArgument("lr0 must be positive")
        if any(b <= a for a, b in zip(d, d[1:])) or any(e < 0 for e in d):
            raise InvalidArgument(f"decay epochs {d} must be non-negative and strictly increasing")
        if not 0.0 <= self.pct <= 1.0:
            raise InvalidArgument("pct must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise InvalidArgument("momentum must lie in [0, 1)")

    def to_dict(self) -> dict:
        return {
            "loss": self.loss.to_dict(),
            "eta_mode": self.eta_mode.to_dict(),
            "pct": self.pct,
            "order": self.order,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "lr0": self.lr0,
            "lr_decay_epochs": list(self.lr_decay_epochs),
            "lr_decay_factor": self.lr_decay_factor,
            "momentum": self.momentum,
            "seed": self.seed,
            "revise": self.revise,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        d = dict(d)
        if "loss" in d:
            d["loss"] = LossSpec.from_dict({"kind": "lrds", **d["loss"]})
        if "eta_mode" in d:
            d["eta_mode"] = EtaMode.from_dict(d["eta_mode"])
        return cls(**d)


@dataclass
class MomentumState:
    velocity: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "MomentumState":
        return cls(np.zeros(n))


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, **record) -> None:
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def write_csv(self, path, header: str = "") -> None:
        with open(path, "w", newline="") as fh:
            fh.write(header)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAINLOG_COLUMNS)
            for r in self.records:
                w.writerow([r["epoch"]] + [_fmt(r[c]) for c in TRAINLOG_COLUMNS[1:]])


def _fmt(v):
    return "" if v is None else repr(float(v))


def sgd_step(params, grad, state: MomentumState, lr: float, momentum: float):
    """Classical momentum: v <- m*v + g; params <- params - lr*v."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or state.velocity.shape != params.shape:
        raise InvalidArgument("parameter, gradient and velocity lengths differ")
    v = momentum * state.velocity + grad
    return params - lr * v, MomentumState(v)


def lr_schedule(epoch: int, cfg: DistillConfig) -> float:
    passed = sum(1 for d in cfg.lr_decay_epochs if d <= epoch)
    return cfg.lr0 * cfg.lr_decay_factor ** passed


def make_combined_batches(dt, ds, batch_size: int, rng: np.random.Generator):
    """One epoch of minibatches mixing D^t and D^s in proportion.

    Both sets are permuted independently. While both have samples left each
    batch takes ``ceil(batch_size * |D^t| / N)`` rows from D^t and fills the
    rest from D^s. Returns ``(indices, teacher_supervised_mask)`` pairs.
    """
    dt = np.asarray(dt, dtype=np.int64)
    ds = np.asarray(ds, dtype=np.int64)
    if batch_size < 1:
        raise InvalidArgument("batch_size must be >= 1")
    n = dt.size + ds.size
    if n == 0:
        raise InvalidArgument("both D^t and D^s are empty")
    dt = dt[rng.permutation(dt.size)]
    ds = ds[rng.permutation(ds.size)]
    k_t = math.ceil(batch_size * dt.size / n)
    batches = []
    it = is_ = 0
    while it < dt.size or is_ < ds.size:
        t = min(k_t, dt.size - it)
        s = min(batch_size - t, ds.size - is_)
        t = min(batch_size - s, dt.size - it)
        idx = np.concatenate([dt[it:it + t], ds[is_:is_ + s]])
        mask = np.concatenate([np.ones(t, dtype=bool), np.zeros(s, dtype=bool)])
        batches.append((idx, mask))
        it += t
        is_ += s
    return batches


def evaluate(model, data: Dataset) -> float:
    """Fraction of samples whose argmax logit equals the label."""
    if len(data) == 0:
        raise InvalidArgument("cannot evaluate on an empty dataset")
    if data.n_features != model.n_inputs:
        raise InvalidArgument(f"model expects {model.n_inputs} features, data has {data.n_features}")
    return float(np.mean(argmax(model.forward(data.features)) == data.labels))


def _run(model, cfg: DistillConfig, n: int, dt, ds, make_batch, spec: LossSpec,
         test: Dataset | None, log: TrainLog | None, callback):
    rng = make_rng(cfg.seed)
    theta = model.flat_params()
    state = MomentumState.zeros(theta.size)
    for epoch in range(cfg.epochs):
        lr = lr_schedule(epoch, cfg)
        sums = dict.fromkeys(("loss_total", "loss_ce_ds", "loss_ce_right", "loss_distill_right",
                              "loss_mse_wrong"), 0.0)
        batches = make_combined_batches(dt, ds, cfg.batch_size, rng)
        for step, (idx, _) in enumerate(batches):
            current = model.with_params(theta)
            batch = make_batch(idx)
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, grad, comps, logits = current.objective(batch, spec)
            except InvalidArgument as exc:
                # inputs were validated up front, so this is overflow from training
                raise NumericalError(f"training diverged at epoch {epoch}, step {step}: {exc}") from exc
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                raise NumericalError(f"non-finite loss at epoch {epoch}, step {step}")
            if callback is not None:
                callback(epoch=epoch, step=step, indices=idx, loss=loss, logits=logits, model=current)
            with np.errstate(over="ignore", invalid="ignore"):
                theta, state = sgd_step(theta, grad, state, lr, cfg.momentum)
            if not np.all(np.isfinite(theta)):
                raise NumericalError(f"parameters diverged at epoch {epoch}, step {step}")
            sums["loss_total"] += loss
            for key, value in comps.items():
                sums["loss_" + key] += value
        model = model.with_params(theta)
        if log is not None:
            nb = len(batches)
            record = {k: v / nb for k, v in sums.items()}
            for k, v in record.items():
                if not np.isfinite(v):
                    raise NumericalError(f"non-finite {k} at epoch {epoch}")
            log.append(epoch=epoch, lr=lr, test_acc=None if test is None else evaluate(model, test), **record)
    return model


def train_teacher(spec: ModelSpec, data: Dataset, cfg: DistillConfig, test: Dataset | None = None,
                  log: TrainLog | None = None, l2: float = 0.0, callback=None) -> MLP:
    """Plain cross-entropy training with the same optimizer and batching as distill."""
    if spec.n_classes != data.class_count or spec.layer_dims[0] != data.n_features:
        raise InvalidArgument(f"model dims {spec.layer_dims} do not fit data "
                              f"({data.n_features} features, {data.class_count} classes)")
    n = len(data)
    x, y = data.features, data.labels

    def make_batch(idx):
        return Batch(x[idx], y[idx])

    return _run(init_model(spec), cfg, n, np.empty(0, dtype=np.int64), np.arange(n), make_batch,
                LossSpec(kind="ce", l2=l2), test, log, callback)


@dataclass
class Supervision:
    """Per-sample roles and targets for a distillation run, computed once."""

    role: np.ndarray
    teacher_logits: np.ndarray
    soft_targets: np.ndarray
    revised: dict

    @property
    def right(self) -> np.ndarray:
        return np.flatnonzero(self.role == RIGHT)

    @property
    def wrong(self) -> np.ndarray:
        return np.flatnonzero(self.role == WRONG)


def prepare_supervision(teacher, data: Dataset, plan: SplitPlan, cfg: DistillConfig) -> Supervision:
    n, c = len(data), data.class_count
    plan.validate(n)
    logits = np.asarray(teacher.forward(data.features), dtype=np.float64)
    role = np.full(n, LABEL, dtype=np.int64)
    soft = np.zeros((n, c))
    dt = np.asarray(plan.dt_indices, dtype=np.int64)
    revised = {}
    if cfg.revise and dt.size:
        probs = softmax(logits)
        right, wrong = partition_by_correctness(probs[dt], data.labels[dt])
        role[dt[right]] = RIGHT
        role[dt[wrong]] = WRONG
        revised = revise_many(probs, data.labels, dt[wrong], cfg.eta_mode)
        for i, r in revised.items():
            soft[i] = r.p
    else:
        role[dt] = RIGHT
    return Supervision(role, logits, soft, revised)


def distill(teacher, student_spec: ModelSpec, data: Dataset, plan: SplitPlan, cfg: DistillConfig,
            test: Dataset | None = None, callback=None, supervision: Supervision | None = None):
    """Train a student from scratch; returns ``(student, TrainLog)``."""
    if teacher.n_classes != student_spec.n_classes or student_spec.n_classes != data.class_count:
        raise InvalidArgument(f"class counts differ: teacher {teacher.n_classes}, "
                              f"student {student_spec.n_classes}, data {data.class_count}")
    if teacher.n_inputs != data.n_features or student_spec.layer_dims[0] != data.n_features:
        raise InvalidArgument("teacher, student and data disagree on the feature dimension")
    sup = supervision or prepare_supervision(teacher, data, plan, cfg)
    spec = replace(cfg.loss, kind="lrds")
    x, y = data.features, data.labels

    def make_batch(idx):
        return Batch(x[idx], y[idx], sup.teacher_logits[idx], sup.soft_targets[idx], sup.role[idx])

    log = TrainLog()
    logger.info("distilling: |D^t|=%d (right %d, wrong %d), |D^s|=%d", len(plan.dt_indices),
                sup.right.size, sup.wrong.size, len(plan.ds_indices))
    student = _run(init_model(student_spec), cfg, len(data), plan.dt_indices, plan.ds_indices,
                   make_batch, spec, test, log, callback)
    return student, log


def newton_fit(model, data, loss_spec: LossSpec, tol: float = 1e-8, max_iters: int = 100,
               max_params: int = 2000):
    """Damped Newton iterations on the full-batch loss until ||grad|| < tol.

    Meant for small convex models (e.g. multinomial logistic regression with
    an L2 penalty). Raises NumericalError if the tolerance is not reached.
    """
    batch = data if isinstance(data, Batch) else Batch(data.features, data.labels)
    theta = model.flat_params()
    loss, g = model.loss_and_grad(batch, loss_spec)
    for _ in range(max_iters):
        if np.linalg.norm(g) < tol:
            return model
        H = exact_hessian(model, batch, loss_spec, max_params=max_params)
        direction = np.linalg.solve(H + 1e-12 * np.eye(H.shape[0]), -g)
        step = 1.0
        while step > 1e-10:
            cand = model.with_params(theta + step * direction)
            new_loss, new_g = cand.loss_and_grad(batch, loss_spec)
            if new_loss <= loss + 1e-4 * step * float(g @ direction) or np.linalg.norm(new_g) < np.linalg.norm(g):
                break
            step *= 0.5
        model, theta, loss, g = cand, theta + step * direction, new_loss, new_g
    if np.linalg.norm(g) < tol:
        return model
    raise NumericalError(f"Newton fit stalled at gradient norm {np.linalg.norm(g):.3e}")
