"""Label revision: pull a teacher's wrong soft label toward the true class.

The revised label is ``p = beta * p_t + (1 - beta) * onehot(target)`` with
``beta = eta / (p_max - p_target + 1)``. For any ``0 < eta < 1`` the target
class ends up with the largest probability, and since every non-target entry
is scaled by the same positive ``beta`` their relative order survives.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgument
from .numcore import argmax

ETA_MODES = ("fixed", "teacher_max_prob", "teacher_target_prob")


@dataclass(frozen=True)
class EtaMode:
    mode: str = "fixed"
    value: float = 0.8

    def __post_init__(self):
        if self.mode not in ETA_MODES:
            raise InvalidArgument(f"unknown eta mode {self.mode!r}")
        if self.mode == "fixed" and not 0.0 < self.value < 1.0:
            raise InvalidArgument(f"fixed eta must lie strictly in (0, 1), got {self.value}")

    def to_dict(self) -> dict:
        return {"mode": self.mode, "value": self.value}

    @classmethod
    def from_dict(cls, d: dict) -> "EtaMode":
        return cls(**d)


@dataclass(frozen=True)
class RevisedLabel:
    p: np.ndarray
    beta: float
    target: int
    teacher_pred: int


def _probs_and_target(p_t, target):
    p_t = np.asarray(p_t, dtype=np.float64)
    if p_t.ndim != 1 or p_t.size == 0 or not np.all(np.isfinite(p_t)):
        raise InvalidArgument("teacher probabilities must be a finite non-empty vector")
    target = int(target)
    if not 0 <= target < p_t.size:
        raise InvalidArgument(f"target {target} out of range for {p_t.size} classes")
    return p_t, target


def compute_beta(p_t, target: int, eta: float) -> float:
    p_t, target = _probs_and_target(p_t, target)
    if not 0.0 < eta < 1.0:
        raise InvalidArgument(f"eta must lie strictly in (0, 1), got {eta}")
    return float(eta / (np.max(p_t) - p_t[target] + 1.0))


def resolve_eta(mode: EtaMode, p_t, target: int) -> float:
    p_t, target = _probs_and_target(p_t, target)
    if mode.mode == "fixed":
        eta = mode.value
    elif mode.mode == "teacher_max_prob":
        eta = float(np.max(p_t))
    else:
        eta = float(p_t[target])
    if not 0.0 < eta < 1.0:
        raise InvalidArgument(f"{mode.mode} resolved eta={eta!r}, which is outside (0, 1)")
    return eta


def revise_label(p_t, target: int, eta_mode: EtaMode) -> RevisedLabel:
    p_t, target = _probs_and_target(p_t, target)
    beta = compute_beta(p_t, target, resolve_eta(eta_mode, p_t, target))
    p = beta * p_t
    p[target] += 1.0 - beta
    return RevisedLabel(p=p, beta=beta, target=target, teacher_pred=argmax(p_t))


def partition_by_correctness(teacher_probs, labels) -> tuple[np.ndarray, np.ndarray]:
    """Indices where the teacher's argmax matches the label, and where it does not."""
    probs = np.asarray(teacher_probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise InvalidArgument(f"{probs.shape[0] if probs.ndim == 2 else '?'} predictions "
                              f"for {labels.shape[0]} labels")
    correct = argmax(probs) == labels
    return np.flatnonzero(correct), np.flatnonzero(~correct)


def revise_many(teacher_probs, labels, indices, eta_mode: EtaMode) -> dict[int, RevisedLabel]:
    """Revised labels for the given sample indices, keyed by index."""
    out = {}
    for i in indices:
        i = int(i)
        try:
            out[i] = revise_label(teacher_probs[i], int(labels[i]), eta_mode)
        except InvalidArgument as exc:
            raise InvalidArgument(f"sample {i}: {exc}") from exc
    return out


def write_revised_csv(path, revised: dict[int, RevisedLabel], n_classes: int, header: str | None = None):
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_index", "beta"] + [f"p_{c}" for c in range(n_classes)])
        for i in sorted(revised):
            r = revised[i]
            w.writerow([i, repr(r.beta)] + [repr(float(v)) for v in r.p])


def read_revised_csv(path) -> dict[int, tuple[float, np.ndarray]]:
    rows = [line for line in Path(path).read_text().splitlines() if line and not line.startswith("#")]
    reader = csv.reader(rows)
    next(reader)
    return {int(r[0]): (float(r[1]), np.array([float(v) for v in r[2:]])) for r in reader}
