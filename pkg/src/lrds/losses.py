"""Distillation losses.

Two layers live here. The per-sample functions (``cross_entropy``,
``kl_distill``, ``mse_logits``, ``mse_probs``, ``vanilla_kd_loss`` and
``lrds_loss``) evaluate a loss on plain vectors. ``batch_objective`` evaluates
the same losses on a :class:`Batch` of logits and also returns the gradient
with respect to the logits, which the model back-propagates.

Reductions are means: over classes inside a sample, over samples inside a
group. Groups that are empty contribute zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument
from .numcore import as_finite, log_softmax, tempered_softmax

LOSS_KINDS = ("ce", "kl_distill", "mse_logits", "mse_probs", "vanilla_kd", "lrds")
RIGHT_PART_LOSSES = ("mse_logits", "kl_distill")

# per-sample roles inside an lrds batch
LABEL, RIGHT, WRONG = 0, 1, 2

CE_CLAMP = 1e-12


@dataclass(frozen=True)
class LossSpec:
    kind: str = "ce"
    tau: float = 4.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    right_part_loss: str = "mse_logits"
    # L2 penalty (l2/2)*||theta||^2 added to every per-sample loss
    l2: float = 0.0

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise InvalidArgument(f"unknown loss kind {self.kind!r}")
        if self.right_part_loss not in RIGHT_PART_LOSSES:
            raise InvalidArgument(f"unknown right_part_loss {self.right_part_loss!r}")
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise InvalidArgument(f"tau must be positive, got {self.tau}")
        for name in ("lambda1", "lambda2", "l2"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0):
                raise InvalidArgument(f"{name} must be non-negative, got {value}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "tau": self.tau,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "right_part_loss": self.right_part_loss,
            "l2": self.l2,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossSpec":
        return cls(**d)


@dataclass
class Batch:
    """Inputs plus whatever supervision the loss kind needs.

    ``teacher_logits`` feed the distillation terms, ``soft_targets`` hold
    probability targets (revised labels) and ``role`` tags each row as
    LABEL, RIGHT or WRONG for the ``lrds`` kind.
    """

    x: np.ndarray
    y: np.ndarray | None = None
    teacher_logits: np.ndarray | None = None
    soft_targets: np.ndarray | None = None
    role: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
        if self.x.shape[0] == 0:
            raise InvalidArgument("empty batch")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64).reshape(-1)
            if self.y.shape[0] != self.x.shape[0]:
                raise InvalidArgument("labels and features disagree on batch size")

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx) -> "Batch":
        def pick(a):
            return None if a is None else a[idx]

        return Batch(self.x[idx], pick(self.y), pick(self.teacher_logits),
                     pick(self.soft_targets), pick(self.role))


# ---------------------------------------------------------------------------
# per-sample losses


def _check_pair(a, b):
    a = as_finite(a, "logits")
    b = as_finite(b, "logits")
    if a.shape != b.shape:
        raise InvalidArgument(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def _check_probs(p) -> np.ndarray:
    p = as_finite(p, "probabilities")
    if np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1.0) > 1e-9:
        raise InvalidArgument("not a probability vector")
    return p


def cross_entropy(p, y: int) -> float:
    """-log p[y] with p[y] clamped below at 1e-12."""
    p = _check_probs(p)
    if not 0 <= int(y) < p.shape[-1]:
        raise InvalidArgument(f"class index {y} out of range for {p.shape[-1]} classes")
    return float(-np.log(max(p[int(y)], CE_CLAMP)))


def kl_distill(z_s, z_t, tau: float) -> float:
    """tau^2 * KL(softmax(z_t/tau) || softmax(z_s/tau)); the teacher is the reference."""
    z_s, z_t = _check_pair(z_s, z_t)
    if not tau > 0:
        raise InvalidArgument(f"tau must be positive, got {tau}")
    return float(_kl_rows(z_s[None], z_t[None], tau)[0][0])


def mse_logits(z_s, z_t) -> float:
    z_s, z_t = _check_pair(z_s, z_t)
    return float(np.mean((z_s - z_t) ** 2))


def mse_probs(z_s, p) -> float:
    """Mean squared difference between softmax(z_s) and a probability target."""
    z_s = as_finite(z_s, "logits")
    p = _check_probs(p)
    if z_s.shape != p.shape:
        raise InvalidArgument(f"length mismatch: {z_s.shape} vs {p.shape}")
    return float(np.mean((tempered_softmax(z_s, 1.0) - p) ** 2))


def vanilla_kd_loss(z_s, z_t, y: int, spec: LossSpec) -> float:
    return cross_entropy(tempered_softmax(z_s, 1.0), y) + spec.lambda1 * kl_distill(z_s, z_t, spec.tau)


def _right_part(z_s, z_t, spec: LossSpec) -> float:
    if spec.right_part_loss == "kl_distill":
        return kl_distill(z_s, z_t, spec.tau)
    return mse_logits(z_s, z_t)


def lrds_loss(right, wrong, spec: LossSpec) -> float:
    """Composite loss over teacher-right and teacher-wrong samples.

    ``right`` holds ``(z_s, z_t, y)`` triples and ``wrong`` holds
    ``(z_s, p_revised)`` pairs. Wrong samples carry no cross-entropy term.
    """
    right, wrong = list(right), list(wrong)
    if not right and not wrong:
        raise InvalidArgument("lrds_loss needs at least one sample")
    total = 0.0
    if right:
        terms = [cross_entropy(tempered_softmax(zs, 1.0), y) + spec.lambda1 * _right_part(zs, zt, spec)
                 for zs, zt, y in right]
        total += float(np.mean(terms))
    if wrong:
        total += spec.lambda2 * float(np.mean([mse_probs(zs, p) for zs, p in wrong]))
    return total


# ---------------------------------------------------------------------------
# row-wise losses with logit gradients


def _ce_rows(z, y):
    logp = log_softmax(z)
    n = z.shape[0]
    if np.any(y < 0) or np.any(y >= z.shape[1]):
        raise InvalidArgument("class index out of range")
    loss = -logp[np.arange(n), y]
    grad = np.exp(logp)
    grad[np.arange(n), y] -= 1.0
    return loss, grad


def _kl_rows(z_s, z_t, tau):
    logq_s = log_softmax(z_s / tau)
    logq_t = log_softmax(z_t / tau)
    q_t = np.exp(logq_t)
    # Gibbs' inequality holds exactly; clamp away rounding below zero
    loss = np.maximum(tau * tau * np.sum(q_t * (logq_t - logq_s), axis=1), 0.0)
    grad = tau * (np.exp(logq_s) - q_t)
    return loss, grad


def _mse_logit_rows(z_s, z_t):
    d = z_s - z_t
    c = z_s.shape[1]
    return np.mean(d * d, axis=1), 2.0 * d / c


def _mse_prob_rows(z_s, p):
    s = tempered_softmax(z_s, 1.0)
    d = s - p
    c = z_s.shape[1]
    a = 2.0 * d / c
    grad = s * (a - np.sum(s * a, axis=1, keepdims=True))
    return np.mean(d * d, axis=1), grad


def _need(batch: Batch, name: str):
    value = getattr(batch, name)
    if value is None:
        raise InvalidArgument(f"loss needs batch.{name}")
    return value


def _right_rows(z_s, z_t, spec):
    if spec.right_part_loss == "kl_distill":
        return _kl_rows(z_s, z_t, spec.tau)
    return _mse_logit_rows(z_s, z_t)


def batch_objective(logits: np.ndarray, batch: Batch, spec: LossSpec):
    """Mean loss of ``batch`` given the student logits.

    Returns ``(loss, dloss/dlogits, components)`` where ``components`` holds
    the unweighted group means ``ce_ds``, ``ce_right``, ``distill_right`` and
    ``mse_wrong``.
    """
    z = np.asarray(logits, dtype=np.float64)
    n = z.shape[0]
    comps = {"ce_ds": 0.0, "ce_right": 0.0, "distill_right": 0.0, "mse_wrong": 0.0}
    kind = spec.kind

    if kind == "ce":
        rows, g = _ce_rows(z, _need(batch, "y"))
        comps["ce_ds"] = float(np.mean(rows))
        return comps["ce_ds"], g / n, comps
    if kind == "kl_distill":
        rows, g = _kl_rows(z, _need(batch, "teacher_logits"), spec.tau)
        comps["distill_right"] = float(np.mean(rows))
        return comps["distill_right"], g / n, comps
    if kind == "mse_logits":
        rows, g = _mse_logit_rows(z, _need(batch, "teacher_logits"))
        comps["distill_right"] = float(np.mean(rows))
        return comps["distill_right"], g / n, comps
    if kind == "mse_probs":
        rows, g = _mse_prob_rows(z, _need(batch, "soft_targets"))
        comps["mse_wrong"] = float(np.mean(rows))
        return comps["mse_wrong"], g / n, comps
    if kind == "vanilla_kd":
        ce, gce = _ce_rows(z, _need(batch, "y"))
        kl, gkl = _kl_rows(z, _need(batch, "teacher_logits"), spec.tau)
        comps["ce_right"] = float(np.mean(ce))
        comps["distill_right"] = float(np.mean(kl))
        total = float(np.mean(ce + spec.lambda1 * kl))
        return total, (gce + spec.lambda1 * gkl) / n, comps

    # lrds: label-supervised CE + right-part composite + lambda2 * wrong-part MSE
    role = batch.role if batch.role is not None else np.full(n, RIGHT)
    grad = np.zeros_like(z)
    total = 0.0
    label_idx = np.flatnonzero(role == LABEL)
    right_idx = np.flatnonzero(role == RIGHT)
    wrong_idx = np.flatnonzero(role == WRONG)
    if label_idx.size:
        rows, g = _ce_rows(z[label_idx], _need(batch, "y")[label_idx])
        comps["ce_ds"] = float(np.mean(rows))
        grad[label_idx] = g / label_idx.size
        total = comps["ce_ds"]
    if right_idx.size:
        ce, gce = _ce_rows(z[right_idx], _need(batch, "y")[right_idx])
        rp, grp = _right_rows(z[right_idx], _need(batch, "teacher_logits")[right_idx], spec)
        comps["ce_right"] = float(np.mean(ce))
        comps["distill_right"] = float(np.mean(rp))
        total += float(np.mean(ce + spec.lambda1 * rp))
        grad[right_idx] = (gce + spec.lambda1 * grp) / right_idx.size
    if wrong_idx.size:
        mw, gmw = _mse_prob_rows(z[wrong_idx], _need(batch, "soft_targets")[wrong_idx])
        comps["mse_wrong"] = float(np.mean(mw))
        total += spec.lambda2 * comps["mse_wrong"]
        grad[wrong_idx] = spec.lambda2 * gmw / wrong_idx.size
    return total, grad, comps


def per_sample_objective(logits: np.ndarray, batch: Batch, spec: LossSpec):
    """Per-row losses and per-row logit gradients (no averaging).

    Only the single-group kinds are supported; influence scoring uses ``ce``.
    """
    z = np.asarray(logits, dtype=np.float64)
    if spec.kind == "ce":
        return _ce_rows(z, _need(batch, "y"))
    if spec.kind == "kl_distill":
        return _kl_rows(z, _need(batch, "teacher_logits"), spec.tau)
    if spec.kind == "mse_logits":
        return _mse_logit_rows(z, _need(batch, "teacher_logits"))
    if spec.kind == "mse_probs":
        return _mse_prob_rows(z, _need(batch, "soft_targets"))
    if spec.kind == "vanilla_kd":
        ce, gce = _ce_rows(z, _need(batch, "y"))
        kl, gkl = _kl_rows(z, _need(batch, "teacher_logits"), spec.tau)
        return ce + spec.lambda1 * kl, gce + spec.lambda1 * gkl
    raise InvalidArgument("per-sample losses are undefined for the grouped lrds kind")
