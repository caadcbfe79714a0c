"""Feed-forward classifiers with hand-written backprop and second-order tools.

Models are immutable: training produces new parameter vectors and
``with_params`` wraps them. Anything exposing ``flat_params``,
``with_params`` and ``loss_and_grad`` works with :func:`hvp` and
:func:`exact_hessian`, which is how the 1-D :class:`MeanModel` toy shares the
influence machinery with the MLP.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CapacityError, FormatError, InvalidArgument
from .losses import Batch, LossSpec, batch_objective, per_sample_objective
from .numcore import make_rng

FORMAT_VERSION = 1
DEFAULT_HESSIAN_LIMIT = 2000
HVP_STEP = 1e-4


@dataclass(frozen=True)
class ModelSpec:
    layer_dims: tuple[int, ...]
    activation: str = "relu"
    init_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        object.__setattr__(self, "layer_dims", dims)
        if len(dims) < 2:
            raise InvalidArgument("a model needs at least an input and an output dimension")
        if any(d <= 0 for d in dims):
            raise InvalidArgument(f"layer dimensions must be positive, got {dims}")
        if self.activation != "relu":
            raise InvalidArgument(f"unsupported activation {self.activation!r}")
        if not (np.isfinite(self.init_scale) and self.init_scale >= 0):
            raise InvalidArgument("init_scale must be non-negative")

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        d = self.layer_dims
        return sum(d[i] * d[i + 1] + d[i + 1] for i in range(len(d) - 1))


class MLP:
    """ReLU network; the last layer is linear and produces logits."""

    def __init__(self, spec: ModelSpec, weights, biases):
        self.spec = spec
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (spec.layer_dims[i + 1], spec.layer_dims[i])
            if w.shape != shape or b.shape != (shape[0],):
                raise InvalidArgument(f"layer {i}: expected weight {shape}, got {w.shape}")

    @property
    def n_params(self) -> int:
        return self.spec.n_params

    @property
    def n_inputs(self) -> int:
        return self.spec.layer_dims[0]

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes

    def layout(self) -> list[tuple[str, int, int, tuple[int, ...]]]:
        """(name, start, stop, shape) of every parameter block in the flat vector."""
        out, pos = [], 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"W{i}", pos, pos + w.size, w.shape))
            pos += w.size
            out.append((f"b{i}", pos, pos + b.size, b.shape))
            pos += b.size
        return out

    def flat_params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def with_params(self, flat) -> "MLP":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise InvalidArgument(f"expected {self.n_params} parameters, got {flat.shape}")
        weights, biases = [], []
        for name, start, stop, shape in self.layout():
            block = flat[start:stop].reshape(shape)
            (weights if name[0] == "W" else biases).append(block)
        return MLP(self.spec, weights, biases)

    def _check_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_inputs:
            raise InvalidArgument(f"expected {self.n_inputs} features, got {x.shape[-1]}")
        return x

    def forward(self, x) -> np.ndarray:
        x = self._check_x(x)
        a = np.atleast_2d(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = a @ w.T + b
            if i < last:
                a = np.maximum(a, 0.0)
        return a[0] if x.ndim == 1 else a

    def _forward_cache(self, x):
        acts = [np.atleast_2d(self._check_x(x))]
        pre = []
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w.T + b
            pre.append(z)
            acts.append(np.maximum(z, 0.0) if i < last else z)
        return acts, pre

    def _backward(self, acts, pre, dlogits) -> np.ndarray:
        grads = []
        delta = dlogits
        for i in range(len(self.weights) - 1, -1, -1):
            grads.append(delta.sum(axis=0))
            grads.append((delta.T @ acts[i]).ravel())
            if i > 0:
                # ReLU subgradient at 0 is taken as 0
                delta = (delta @ self.weights[i]) * (pre[i - 1] > 0)
        return np.concatenate(grads[::-1])

    def objective(self, batch: Batch, spec: LossSpec):
        """``(loss, grad, components, logits)`` for one batch."""
        acts, pre = self._forward_cache(batch.x)
        loss, dlogits, comps = batch_objective(acts[-1], batch, spec)
        grad = self._backward(acts, pre, dlogits)
        if spec.l2:
            theta = self.flat_params()
            loss += 0.5 * spec.l2 * float(theta @ theta)
            grad = grad + spec.l2 * theta
        return loss, grad, comps, acts[-1]

    def loss_and_grad(self, batch: Batch, spec: LossSpec):
        loss, grad, _, _ = self.objective(batch, spec)
        return loss, grad

    def per_sample_grads(self, batch: Batch, spec: LossSpec):
        """Per-row losses and the (N, n_params) matrix of per-row gradients."""
        acts, pre = self._forward_cache(batch.x)
        losses, delta = per_sample_objective(acts[-1], batch, spec)
        n = delta.shape[0]
        blocks = []
        for i in range(len(self.weights) - 1, -1, -1):
            blocks.append(delta)
            blocks.append(np.einsum("no,ni->noi", delta, acts[i]).reshape(n, -1))
            if i > 0:
                delta = (delta @ self.weights[i]) * (pre[i - 1] > 0)
        G = np.concatenate(blocks[::-1], axis=1)
        if spec.l2:
            theta = self.flat_params()
            losses = losses + 0.5 * spec.l2 * float(theta @ theta)
            G = G + spec.l2 * theta
        return losses, G


class MeanModel:
    """Location estimate theta with per-sample loss 0.5*||theta - x||^2.

    Labels are ignored. Its Hessian is the identity, which gives closed-form
    influence values for testing.
    """

    def __init__(self, theta):
        self.theta = np.atleast_1d(np.asarray(theta, dtype=np.float64)).copy()

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def n_inputs(self) -> int:
        return self.theta.size

    n_classes = 1

    def flat_params(self) -> np.ndarray:
        return self.theta.copy()

    def with_params(self, flat) -> "MeanModel":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != self.theta.shape:
            raise InvalidArgument(f"expected {self.theta.size} parameters, got {flat.shape}")
        return MeanModel(flat)

    def _check_x(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.theta.size:
            raise InvalidArgument(f"expected {self.theta.size} features, got {x.shape[1]}")
        return x

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        self._check_x(x)
        return self.theta.copy() if x.ndim == 1 else np.tile(self.theta, (x.shape[0], 1))

    def loss_and_grad(self, batch: Batch, spec: LossSpec | None = None):
        x = self._check_x(batch.x)
        d = self.theta - x
        return float(0.5 * np.mean(np.sum(d * d, axis=1))), d.mean(axis=0)

    def per_sample_grads(self, batch: Batch, spec: LossSpec | None = None):
        d = self.theta - self._check_x(batch.x)
        return 0.5 * np.sum(d * d, axis=1), d

    @classmethod
    def fit(cls, x) -> "MeanModel":
        return cls(np.atleast_2d(np.asarray(x, dtype=np.float64)).mean(axis=0))


def init_model(spec: ModelSpec) -> MLP:
    """Normal(0, init_scale^2/fan_in) weights drawn from ``spec.seed``, zero biases."""
    rng = make_rng(spec.seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_dims[:-1], spec.layer_dims[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) * (spec.init_scale / np.sqrt(fan_in)))
        biases.append(np.zeros(fan_out))
    return MLP(spec, weights, biases)


def forward(model, x) -> np.ndarray:
    return model.forward(x)


def loss_and_grad(model, batch: Batch, loss_spec: LossSpec):
    """Mean loss over ``batch`` and its exact gradient in flat-parameter layout."""
    return model.loss_and_grad(batch, loss_spec)


def hvp(model, batch: Batch, v, loss_spec: LossSpec, step: float = HVP_STEP) -> np.ndarray:
    """Mean-Hessian times ``v`` by central differences of exact gradients.

    The direction ``u`` is normalised to unit max-norm and stepped by
    ``h = step * (1 + ||u||_inf)``, so the perturbation size does not depend
    on the scale of ``v``.
    """
    v = np.asarray(v, dtype=np.float64)
    theta = model.flat_params()
    if v.shape != theta.shape:
        raise InvalidArgument(f"vector has shape {v.shape}, model has {theta.size} parameters")
    scale = float(np.max(np.abs(v))) if v.size else 0.0
    if scale == 0.0:
        return np.zeros_like(v)
    u = v / scale
    h = step * (1.0 + float(np.max(np.abs(u))))
    _, gp = model.with_params(theta + h * u).loss_and_grad(batch, loss_spec)
    _, gm = model.with_params(theta - h * u).loss_and_grad(batch, loss_spec)
    return (gp - gm) * (scale / (2.0 * h))


def exact_hessian(model, batch: Batch, loss_spec: LossSpec, max_params: int = DEFAULT_HESSIAN_LIMIT,
                  symmetrize: bool = True, step: float = HVP_STEP) -> np.ndarray:
    """Dense mean Hessian, one gradient difference per column.

    Columns use the same step rule as ``hvp`` applied to unit basis vectors.

    With ``symmetrize=False`` the raw finite-difference matrix is returned.
    """
    theta = model.flat_params()
    p = theta.size
    if p > max_params:
        raise CapacityError(f"{p} parameters exceeds the dense Hessian limit of {max_params}")
    h = 2.0 * step
    H = np.empty((p, p))
    for j in range(p):
        e = np.zeros(p)
        e[j] = h
        _, gp = model.with_params(theta + e).loss_and_grad(batch, loss_spec)
        _, gm = model.with_params(theta - e).loss_and_grad(batch, loss_spec)
        H[:, j] = (gp - gm) / (2.0 * h)
    if symmetrize:
        H = 0.5 * (H + H.T)
    return H


# ---------------------------------------------------------------------------
# checkpoints


def params_checksum(model) -> str:
    """sha256 over the little-endian float64 parameter bytes."""
    return hashlib.sha256(model.flat_params().astype("<f8").tobytes()).hexdigest()


def checkpoint_dict(model, extra: dict | None = None) -> dict:
    theta = model.flat_params()
    if not np.all(np.isfinite(theta)):
        raise InvalidArgument("refusing to checkpoint non-finite parameters")
    if isinstance(model, MeanModel):
        doc = {"format_version": FORMAT_VERSION, "model": "mean",
               "layer_dims": [model.n_params], "activation": "none"}
    else:
        doc = {"format_version": FORMAT_VERSION, "model": "mlp",
               "layer_dims": list(model.spec.layer_dims), "activation": model.spec.activation,
               "init_scale": model.spec.init_scale, "seed": model.spec.seed}
    doc["flat_params"] = [float(t) for t in theta]
    if extra:
        doc.update(extra)
    return doc


def save_checkpoint(model, path, extra: dict | None = None) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(model, extra), indent=1) + "\n")


def model_from_dict(doc: dict):
    try:
        version = doc["format_version"]
        kind = doc.get("model", "mlp")
        dims = doc["layer_dims"]
        flat = np.asarray(doc["flat_params"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed checkpoint: {exc}") from exc
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported checkpoint format_version {version}")
    if kind == "mean":
        if flat.shape != (dims[0],):
            raise FormatError("mean checkpoint parameter count mismatch")
        return MeanModel(flat)
    if kind != "mlp":
        raise FormatError(f"unknown model kind {kind!r}")
    spec = ModelSpec(tuple(dims), doc.get("activation", "relu"),
                     float(doc.get("init_scale", 1.0)), int(doc.get("seed", 0)))
    if flat.shape != (spec.n_params,):
        raise FormatError(f"checkpoint has {flat.size} parameters, layer_dims imply {spec.n_params}")
    return _zero_mlp(spec).with_params(flat)


def _zero_mlp(spec: ModelSpec) -> MLP:
    dims = spec.layer_dims
    return MLP(spec, [np.zeros((o, i)) for i, o in zip(dims[:-1], dims[1:])],
               [np.zeros(o) for o in dims[1:]])


def load_checkpoint(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    return model_from_dict(doc)
