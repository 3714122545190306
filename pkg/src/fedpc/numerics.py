"""From-scratch multi-layer perceptron, proximal loss, and Adam.

Parameters live in one flat float64 vector laid out layer by layer, each
layer contributing its weight matrix (``fan_in x fan_out``, row-major)
followed by its bias.  The first ``frozen_layers`` layers form a frozen
prefix: they never receive gradient, never move under Adam, and are not
part of what clients transmit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError, NumericFault, ShapeError
from .rng import INIT, make_rng

PROB_FLOOR = 1e-12
ACTIVATIONS = ("relu",)


@dataclass(frozen=True)
class ModelSpec:
    layer_sizes: tuple[int, ...]
    frozen_layers: int = 0
    activation: str = "relu"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ConfigError("layer_sizes needs at least an input and an output size")
        if any(s < 1 for s in sizes):
            raise ConfigError(f"layer_sizes entries must be >= 1, got {list(sizes)}")
        if not 0 <= self.frozen_layers < len(sizes) - 1:
            raise ConfigError(
                f"frozen_layers must be in [0, {len(sizes) - 2}], got {self.frozen_layers}"
            )
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]

    @cached_property
    def slices(self) -> tuple[tuple[slice, slice], ...]:
        """(weight slice, bias slice) into the flat vector for every layer."""
        out = []
        pos = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(pos, pos + fan_in * fan_out)
            pos = w.stop
            b = slice(pos, pos + fan_out)
            pos = b.stop
            out.append((w, b))
        return tuple(out)

    @property
    def num_params(self) -> int:
        return self.slices[-1][1].stop

    @property
    def frozen_len(self) -> int:
        if self.frozen_layers == 0:
            return 0
        return self.slices[self.frozen_layers - 1][1].stop

    @property
    def trainable_len(self) -> int:
        return self.num_params - self.frozen_len

    def to_dict(self) -> dict:
        return {
            "layer_sizes": list(self.layer_sizes),
            "frozen_layers": self.frozen_layers,
            "activation": self.activation,
        }


@dataclass(frozen=True, eq=False)
class ParamVector:
    """Immutable flat parameter vector tied to a ModelSpec."""

    values: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if values.size != self.spec.num_params:
            raise ShapeError(
                f"expected {self.spec.num_params} parameters for layers "
                f"{list(self.spec.layer_sizes)}, got {values.size}"
            )
        bad = np.flatnonzero(~np.isfinite(values))
        if bad.size:
            raise NumericFault(f"non-finite parameter at index {bad[0]}", int(bad[0]))
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def frozen_len(self) -> int:
        return self.spec.frozen_len

    @property
    def trainable(self) -> np.ndarray:
        return self.values[self.frozen_len:]

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        for (ws, bs), fan_in, fan_out in zip(
            self.spec.slices, self.spec.layer_sizes[:-1], self.spec.layer_sizes[1:]
        ):
            out.append((self.values[ws].reshape(fan_in, fan_out), self.values[bs]))
        return out

    def replace(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.spec)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class LossConfig:
    mu: float = 1.0
    weight_decay: float = 1e-5

    def __post_init__(self):
        if not self.mu >= 0:
            raise ConfigError(f"mu must be >= 0, got {self.mu}")
        if not self.weight_decay >= 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")


@dataclass(frozen=True)
class LearningSchedule:
    eta0: float = 1e-4
    decay: float = 0.5

    def __post_init__(self):
        if not self.eta0 > 0:
            raise ConfigError(f"eta0 must be > 0, got {self.eta0}")
        if not 0 < self.decay <= 1:
            raise ConfigError(f"decay must be in (0, 1], got {self.decay}")


@dataclass(frozen=True, eq=False)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, n: int, **kwargs) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, **kwargs)


def learning_rate(schedule: LearningSchedule, round: int) -> float:
    if round < 0:
        raise ConfigError(f"round must be >= 0, got {round}")
    return schedule.eta0 * schedule.decay**round


def init_params(spec: ModelSpec, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    values = np.zeros(spec.num_params)
    for (ws, _), fan_in, fan_out in zip(
        spec.slices, spec.layer_sizes[:-1], spec.layer_sizes[1:]
    ):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        values[ws] = rng.uniform(-limit, limit, size=fan_in * fan_out)
    return ParamVector(values, spec)


def _as_batch(params: ParamVector, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim not in (1, 2) or x.shape[-1] != params.spec.layer_sizes[0]:
        raise ShapeError(
            f"input has shape {x.shape}, model expects {params.spec.layer_sizes[0]} features"
        )
    return x.reshape(-1, x.shape[-1])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_trace(params: ParamVector, x: np.ndarray):
    """Return per-layer inputs and pre-activations, plus output probabilities."""
    inputs, pre = [], []
    h = x
    layers = params.layers()
    for i, (w, b) in enumerate(layers):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
    return inputs, pre, softmax(h)


def forward(params: ParamVector, features) -> np.ndarray:
    """Class probabilities for one feature vector (1-D) or a batch (2-D)."""
    x = np.asarray(features, dtype=np.float64)
    _, _, probs = _forward_trace(params, _as_batch(params, x))
    return probs[0] if x.ndim == 1 else probs


def predict(params: ParamVector, features) -> np.ndarray:
    # np.argmax returns the first maximum, so ties go to the lowest class index.
    return np.argmax(forward(params, np.atleast_2d(features)), axis=1)


def nll_loss(probs, labels) -> float:
    """-ln p[label], floored at PROB_FLOOR; the mean over a batch of rows."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels)
    if p.ndim == 1:
        if not 0 <= int(y) < p.size:
            raise ShapeError(f"label {int(y)} out of range for {p.size} classes")
        return float(-math.log(max(p[int(y)], PROB_FLOOR)))
    if y.shape != (p.shape[0],):
        raise ShapeError(f"{p.shape[0]} probability rows but {y.size} labels")
    if y.size == 0:
        raise ConfigError("empty batch")
    if y.min() < 0 or y.max() >= p.shape[1]:
        raise ShapeError(f"labels must lie in [0, {p.shape[1]})")
    picked = p[np.arange(y.size), y]
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


def _vec(w) -> np.ndarray:
    return w.values if isinstance(w, ParamVector) else np.asarray(w, dtype=np.float64)


def proximal_term(w, w_prev, mu: float) -> float:
    """(mu / 2) * ||w - w_prev||^2."""
    a, b = _vec(w), _vec(w_prev)
    if a.shape != b.shape:
        raise ShapeError(f"length mismatch: {a.size} vs {b.size}")
    if isinstance(w, ParamVector) and isinstance(w_prev, ParamVector) and w.spec != w_prev.spec:
        raise ShapeError("parameter vectors belong to different model specs")
    if mu == 0:
        return 0.0
    d = a - b
    return float(0.5 * mu * np.dot(d, d))


def total_loss_and_grad(
    params: ParamVector,
    anchor: ParamVector,
    batch: tuple[np.ndarray, np.ndarray],
    cfg: LossConfig,
) -> tuple[float, np.ndarray]:
    """Mean NLL plus proximal penalty, and the gradient on trainable scalars.

    The returned loss is ``nll + (mu/2)||w - anchor||^2``.  The gradient
    additionally carries the coupled L2 term ``weight_decay * w``; frozen
    entries of the gradient are exactly zero.
    """
    if anchor.spec != params.spec:
        raise ShapeError("anchor and params belong to different model specs")
    features, labels = batch
    x = _as_batch(params, features)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size == 0:
        raise ConfigError("empty batch")
    if y.size != x.shape[0]:
        raise ShapeError(f"{x.shape[0]} feature rows but {y.size} labels")

    spec = params.spec
    inputs, pre, probs = _forward_trace(params, x)
    loss = nll_loss(probs, y) + proximal_term(params, anchor, cfg.mu)

    grad = np.zeros(spec.num_params)
    delta = probs.copy()
    delta[np.arange(y.size), y] -= 1.0
    # Rows clamped at PROB_FLOOR have a flat loss.
    delta[probs[np.arange(y.size), y] < PROB_FLOOR] = 0.0
    delta /= y.size
    layers = params.layers()
    for i in range(spec.num_layers - 1, spec.frozen_layers - 1, -1):
        ws, bs = spec.slices[i]
        grad[ws] = (inputs[i].T @ delta).ravel()
        grad[bs] = delta.sum(axis=0)
        if i > spec.frozen_layers:
            delta = (delta @ layers[i][0].T) * (pre[i - 1] > 0)

    t = slice(spec.frozen_len, None)
    w = params.values[t]
    if cfg.mu:
        grad[t] += cfg.mu * (w - anchor.values[t])
    if cfg.weight_decay:
        grad[t] += cfg.weight_decay * w
    return loss, grad


def adam_step(
    params: ParamVector, grad: np.ndarray, state: AdamState, eta: float
) -> tuple[ParamVector, AdamState]:
    """One bias-corrected Adam update of the trainable scalars."""
    if not eta > 0:
        raise ConfigError(f"learning rate must be > 0, got {eta}")
    g = np.asarray(grad, dtype=np.float64)
    if g.shape != params.values.shape:
        raise ShapeError(f"gradient length {g.size} != parameter length {params.values.size}")
    bad = np.flatnonzero(~np.isfinite(g))
    if bad.size:
        raise NumericFault(f"non-finite gradient at index {bad[0]}", int(bad[0]))

    t = slice(params.frozen_len, None)
    m = state.first_moment.copy()
    v = state.second_moment.copy()
    step = state.step_count + 1
    m[t] = state.beta1 * m[t] + (1 - state.beta1) * g[t]
    v[t] = state.beta2 * v[t] + (1 - state.beta2) * g[t] ** 2
    m_hat = m[t] / (1 - state.beta1**step)
    v_hat = v[t] / (1 - state.beta2**step)

    values = params.values.copy()
    values[t] -= eta * m_hat / (np.sqrt(v_hat) + state.epsilon)
    new_state = AdamState(m, v, step, state.beta1, state.beta2, state.epsilon)
    return params.replace(values), new_state


def _generic_task(spec: ModelSpec, rng: np.random.Generator, per_class: int = 64):
    d, k = spec.layer_sizes[0], spec.num_classes
    centers = rng.normal(0.0, 3.0, size=(k, d))
    y = np.repeat(np.arange(k), per_class)
    x = centers[y] + rng.normal(size=(y.size, d))
    return x, y


def initial_model(
    spec: ModelSpec,
    seed: int,
    pretrain: bool = True,
    epochs: int = 20,
    batch_size: int = 32,
    eta: float = 1e-2,
) -> ParamVector:
    """The shared starting model every scheme begins from.

    With ``pretrain`` and a nonzero frozen prefix, the whole network is first
    fit to a held-out generic blob-classification task, then the output
    layer is re-drawn.  The pretrained prefix is what stays frozen.
    """
    rng = make_rng(seed, INIT)
    params = init_params(spec, rng)
    if not pretrain or spec.frozen_layers == 0:
        return params

    open_spec = ModelSpec(spec.layer_sizes, 0, spec.activation)
    work = ParamVector(params.values, open_spec)
    x, y = _generic_task(spec, rng)
    cfg = LossConfig(mu=0.0, weight_decay=0.0)
    state = AdamState.fresh(open_spec.num_params)
    for _ in range(epochs):
        order = rng.permutation(y.size)
        for start in range(0, y.size, batch_size):
            idx = order[start:start + batch_size]
            _, g = total_loss_and_grad(work, work, (x[idx], y[idx]), cfg)
            work, state = adam_step(work, g, state, eta)

    head = init_params(spec, rng).values
    values = work.values.copy()
    ws, bs = spec.slices[-1]
    values[ws.start:bs.stop] = head[ws.start:bs.stop]
    return ParamVector(values, spec)
