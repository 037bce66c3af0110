"""Desk-scale differentiable classifiers over flat parameter vectors.

Two architectures are supported, identified by a shape tag:

* ``softmax:<F>x<C>`` -- multinomial logistic regression,
* ``mlp:<F>x<H>x<C>`` -- one tanh hidden layer of width ``H``.

All operations are pure functions of their inputs (including seeds), so
clients may train concurrently on their own parameter copies.  Losses are
cross-entropy with natural log; accuracy breaks argmax ties toward the lowest
class index.

Parameter files (``FEDW v1``): one ASCII header line
``FEDW v1 <shape_tag> <len>\\n`` followed by ``len`` little-endian float64
values.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "ModelParams",
    "TrainConfig",
    "EvalReport",
    "softmax_tag",
    "mlp_tag",
    "parse_shape_tag",
    "param_count",
    "init_params",
    "evaluate",
    "gradient",
    "sgd_epochs",
    "grad_check",
    "save_params",
    "load_params",
]


def softmax_tag(num_features: int, num_classes: int) -> str:
    return f"softmax:{num_features}x{num_classes}"


def mlp_tag(num_features: int, hidden: int, num_classes: int) -> str:
    return f"mlp:{num_features}x{hidden}x{num_classes}"


def parse_shape_tag(tag: str) -> tuple[str, tuple[int, ...]]:
    """Split a shape tag into (kind, layer sizes); raises on unknown tags."""
    kind, _, dims_text = tag.partition(":")
    try:
        dims = tuple(int(d) for d in dims_text.split("x"))
    except ValueError:
        raise ValueError(f"unknown shape_tag {tag!r}") from None
    if kind == "softmax" and len(dims) == 2 and all(d >= 1 for d in dims):
        return kind, dims
    if kind == "mlp" and len(dims) == 3 and all(d >= 1 for d in dims):
        return kind, dims
    raise ValueError(f"unknown shape_tag {tag!r}")


def param_count(tag: str) -> int:
    kind, dims = parse_shape_tag(tag)
    if kind == "softmax":
        f, c = dims
        return f * c + c
    f, h, c = dims
    return f * h + h + h * c + c


@dataclass(frozen=True)
class ModelParams:
    """A flat float64 parameter vector plus the architecture it decodes into."""

    values: np.ndarray
    shape_tag: str

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        expected = param_count(self.shape_tag)
        if values.ndim != 1 or values.size != expected:
            raise ValueError(
                f"shape_tag {self.shape_tag!r} implies {expected} parameters, "
                f"got vector of shape {values.shape}"
            )
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class TrainConfig:
    """Local-training knobs.

    ``batch_size`` is clamped to the local sample count, so any value at or
    above it requests full-batch gradient steps.
    """

    epochs: int
    learning_rate: float
    batch_size: int = 32
    rng_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate < 0.0:
            raise ValueError("learning_rate must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class EvalReport:
    mean_loss: float
    accuracy: float
    per_sample_losses: np.ndarray | None = None
    per_sample_grad_norms: np.ndarray | None = None


def init_params(shape_tag: str, seed: int) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    kind, dims = parse_shape_tag(shape_tag)
    rng = np.random.default_rng(seed)
    values = np.zeros(param_count(shape_tag), dtype=np.float64)
    if kind == "softmax":
        f, c = dims
        bound = 1.0 / np.sqrt(f)
        values[: f * c] = rng.uniform(-bound, bound, size=f * c)
    else:
        f, h, c = dims
        b1 = 1.0 / np.sqrt(f)
        b2 = 1.0 / np.sqrt(h)
        values[: f * h] = rng.uniform(-b1, b1, size=f * h)
        start = f * h + h
        values[start : start + h * c] = rng.uniform(-b2, b2, size=h * c)
    return ModelParams(values, shape_tag)


def _unpack_softmax(values, f, c):
    w = values[: f * c].reshape(f, c)
    b = values[f * c :]
    return w, b


def _unpack_mlp(values, f, h, c):
    pos = 0
    w1 = values[pos : pos + f * h].reshape(f, h)
    pos += f * h
    b1 = values[pos : pos + h]
    pos += h
    w2 = values[pos : pos + h * c].reshape(h, c)
    pos += h * c
    b2 = values[pos:]
    return w1, b1, w2, b2


def _check_data(params: ModelParams, data) -> tuple[str, tuple[int, ...]]:
    kind, dims = parse_shape_tag(params.shape_tag)
    if data.num_samples == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if data.num_features != dims[0]:
        raise ValueError(
            f"data has {data.num_features} features but shape_tag "
            f"{params.shape_tag!r} expects {dims[0]}"
        )
    if data.num_classes > dims[-1]:
        raise ValueError(
            f"data has {data.num_classes} classes but shape_tag "
            f"{params.shape_tag!r} expects at most {dims[-1]}"
        )
    return kind, dims


def _forward(params: ModelParams, x: np.ndarray):
    """Return (logits, hidden activations or None)."""
    kind, dims = parse_shape_tag(params.shape_tag)
    if kind == "softmax":
        w, b = _unpack_softmax(params.values, *dims)
        return x @ w + b, None
    w1, b1, w2, b2 = _unpack_mlp(params.values, *dims)
    hidden = np.tanh(x @ w1 + b1)
    return hidden @ w2 + b2, hidden


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def evaluate(
    params: ModelParams,
    data,
    want_per_sample: bool = False,
    want_grad_norms: bool = False,
) -> EvalReport:
    """Cross-entropy loss and argmax accuracy on ``data``.

    Per-sample losses and per-sample gradient L2 norms (over the full
    parameter vector) are returned only when requested; gradient norms cost
    an extra backward pass.
    """
    _check_data(params, data)
    x, y = data.features, data.labels
    logits, hidden = _forward(params, x)
    log_probs = _log_softmax(logits)
    losses = -log_probs[np.arange(x.shape[0]), y]
    accuracy = float(np.mean(np.argmax(logits, axis=1) == y))
    grad_norms = None
    if want_grad_norms:
        grad_norms = _per_sample_grad_norms(params, x, y, log_probs, hidden)
    return EvalReport(
        mean_loss=float(losses.mean()),
        accuracy=accuracy,
        per_sample_losses=losses if want_per_sample else None,
        per_sample_grad_norms=grad_norms,
    )


def _output_delta(log_probs: np.ndarray, y: np.ndarray) -> np.ndarray:
    delta = np.exp(log_probs)
    delta[np.arange(y.shape[0]), y] -= 1.0
    return delta


def _per_sample_grad_norms(params, x, y, log_probs, hidden) -> np.ndarray:
    # For a linear layer z = a @ W + b, sample i's gradient is the outer
    # product a_i (x) d_i plus d_i for the bias, so its squared norm is
    # ||d_i||^2 * (||a_i||^2 + 1); layers sum.
    kind, _ = parse_shape_tag(params.shape_tag)
    delta = _output_delta(log_probs, y)
    d_sq = (delta**2).sum(axis=1)
    if kind == "softmax":
        total = d_sq * ((x**2).sum(axis=1) + 1.0)
        return np.sqrt(total)
    _, dims = parse_shape_tag(params.shape_tag)
    _, _, w2, _ = _unpack_mlp(params.values, *dims)
    d1 = (delta @ w2.T) * (1.0 - hidden**2)
    total = d_sq * ((hidden**2).sum(axis=1) + 1.0)
    total += (d1**2).sum(axis=1) * ((x**2).sum(axis=1) + 1.0)
    return np.sqrt(total)


def gradient(params: ModelParams, data) -> np.ndarray:
    """Gradient of the mean cross-entropy loss, as a flat vector."""
    kind, dims = _check_data(params, data)
    x, y = data.features, data.labels
    n = x.shape[0]
    logits, hidden = _forward(params, x)
    delta = _output_delta(_log_softmax(logits), y) / n
    if kind == "softmax":
        gw = x.T @ delta
        gb = delta.sum(axis=0)
        return np.concatenate([gw.ravel(), gb])
    _, _, w2, _ = _unpack_mlp(params.values, *dims)
    gw2 = hidden.T @ delta
    gb2 = delta.sum(axis=0)
    d1 = (delta @ w2.T) * (1.0 - hidden**2)
    gw1 = x.T @ d1
    gb1 = d1.sum(axis=0)
    return np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])


def sgd_epochs(params: ModelParams, data, cfg: TrainConfig) -> ModelParams:
    """Run ``cfg.epochs`` epochs of seeded mini-batch SGD; returns new params."""
    _check_data(params, data)
    rng = np.random.default_rng(cfg.rng_seed)
    values = params.values.copy()
    n = data.num_samples
    batch = min(cfg.batch_size, n)
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch):
            idx = perm[start : start + batch]
            step = ModelParams(values, params.shape_tag)
            grad = gradient(step, data.subset(idx))
            values = values - cfg.learning_rate * grad
    return ModelParams(values, params.shape_tag)


def grad_check(params: ModelParams, data, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    analytic = gradient(params, data)
    values = params.values
    worst = 0.0
    for i in range(values.size):
        bumped = values.copy()
        bumped[i] += epsilon
        up = evaluate(ModelParams(bumped, params.shape_tag), data).mean_loss
        bumped[i] -= 2.0 * epsilon
        down = evaluate(ModelParams(bumped, params.shape_tag), data).mean_loss
        numeric = (up - down) / (2.0 * epsilon)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst


def save_params(params: ModelParams, path: str | Path) -> None:
    header = f"FEDW v1 {params.shape_tag} {params.values.size}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(params.values.astype("<f8").tobytes())


def load_params(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n", 0, 256)
    if newline < 0:
        raise ValueError(f"{path}: missing FEDW header")
    fields = raw[:newline].decode("ascii").split(" ")
    if len(fields) != 4 or fields[0] != "FEDW" or fields[1] != "v1":
        raise ValueError(f"{path}: bad FEDW header {raw[:newline]!r}")
    tag, length = fields[2], int(fields[3])
    body = raw[newline + 1 :]
    if len(body) != length * 8:
        raise ValueError(
            f"{path}: expected {length * 8} body bytes, found {len(body)}"
        )
    values = np.frombuffer(body, dtype="<f8").copy()
    return ModelParams(values, tag)
