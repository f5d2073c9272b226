"""Small multilayer perceptron with hand-written backpropagation.

Layer ``i`` maps ``h -> h @ W_i + b_i`` with ``W_i`` stored as (fan_in, fan_out).
Hidden layers use a rectifier. The layer producing the latent representation
is linear by default or rectified with ``latent_activation="relu"``, and the
final layer feeds a softmax over ``C`` classes. The final
(weight, bias) pair is exactly the :class:`~tacrecon.qp.FinalLayer`.

Batched products go through numpy/BLAS; the reproducibility contract is
"same seed, same build, same results".
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from tacrecon.core import ContractError, as_matrix, as_vector, make_rng
from tacrecon.qp import FinalLayer

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
DEFAULT_ARCH = (16, 64, 32, 10)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = as_matrix(self.inputs)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or self.labels.shape[0] != self.inputs.shape[0]:
            raise ContractError("labels must be a 1-d array with one entry per input row")

    def __len__(self):
        return self.inputs.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx])


@dataclass
class TrainConfig:
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0
    pin_final_bias: bool = False  # keep the final bias at zero
    latent_activation: str = "identity"

    def __post_init__(self):
        if not self.lr >= 0:
            raise ContractError("lr must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be >= 1")


LATENT_ACTIVATIONS = ("identity", "relu")


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    latent_activation: str = "identity"

    def __post_init__(self):
        if self.latent_activation not in LATENT_ACTIVATIONS:
            raise ContractError(f"latent_activation must be one of {LATENT_ACTIVATIONS}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ContractError("need one bias per weight matrix and at least one layer")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[1],):
                raise ContractError(f"layer {i}: weight {W.shape} and bias {b.shape} disagree")
            if i and W.shape[0] != self.weights[i - 1].shape[1]:
                raise ContractError(f"layer {i} input width does not match layer {i - 1} output")

    @property
    def arch(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(W.shape[1] for W in self.weights)

    @property
    def d_in(self) -> int:
        return self.arch[0]

    @property
    def d_emb(self) -> int:
        return self.arch[-2]

    @property
    def n_classes(self) -> int:
        return self.arch[-1]

    @property
    def final_layer(self) -> FinalLayer:
        return FinalLayer(self.weights[-1], self.biases[-1])

    def copy(self) -> "MlpParams":
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.latent_activation)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases) for p in pair])

    def from_flat(self, theta) -> "MlpParams":
        out, pos = [], 0
        for p in (p for pair in zip(self.weights, self.biases) for p in pair):
            out.append(np.asarray(theta[pos:pos + p.size]).reshape(p.shape))
            pos += p.size
        return MlpParams(out[0::2], out[1::2], self.latent_activation)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.weights + self.biases)


def init_params(arch, seed: int, latent_activation: str = "identity") -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    arch = tuple(int(a) for a in arch)
    if len(arch) < 2 or min(arch) < 1:
        raise ContractError(f"bad architecture {arch}")
    if arch[-1] < 2:
        raise ContractError("need at least two classes")
    rng = make_rng(seed, "init")
    weights, biases = [], []
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, latent_activation)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _latent_forward(params: MlpParams, X: np.ndarray):
    """Run every layer but the last. Returns the latent batch and the per-layer cache."""
    h = X
    cache = []
    n_hidden = len(params.weights) - 1
    for i in range(n_hidden):
        z = h @ params.weights[i] + params.biases[i]
        cache.append((h, z))
        h = np.maximum(z, 0.0) if _rectified(params, i) else z
    return h, cache


def _rectified(params: MlpParams, layer: int) -> bool:
    n_hidden = len(params.weights) - 1
    return layer < n_hidden - 1 or params.latent_activation == "relu"


def _latent_backward(params: MlpParams, cache, d_latent: np.ndarray, grads_w, grads_b):
    g = d_latent
    n_hidden = len(params.weights) - 1
    for i in reversed(range(n_hidden)):
        h_in, z = cache[i]
        if _rectified(params, i):
            g = g * (z > 0.0)
        grads_w[i] += h_in.T @ g
        grads_b[i] += g.sum(axis=0)
        if i:
            g = g @ params.weights[i].T


def forward(params: MlpParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Latent representation and class probabilities for a single input."""
    x = as_vector(x)
    if x.shape[0] != params.d_in:
        raise ContractError(f"input has length {x.shape[0]}, network expects {params.d_in}")
    latent, probs = forward_batch(params, x[None, :])
    return latent[0], probs[0]


def forward_batch(params: MlpParams, X) -> tuple[np.ndarray, np.ndarray]:
    X = as_matrix(X)
    latent, _ = _latent_forward(params, X)
    logits = latent @ params.weights[-1] + params.biases[-1]
    return latent, softmax(logits)


def latent_batch(params: MlpParams, inputs) -> np.ndarray:
    X = as_matrix(inputs)
    if X.shape[1] != params.d_in:
        raise ContractError(f"inputs have width {X.shape[1]}, network expects {params.d_in}")
    return _latent_forward(params, X)[0]


def logits_batch(params: MlpParams, X) -> np.ndarray:
    latent = latent_batch(params, X)
    return latent @ params.weights[-1] + params.biases[-1]


def predict(params: MlpParams, X) -> np.ndarray:
    """Argmax class per row; ties go to the smallest class index."""
    return np.argmax(logits_batch(params, X), axis=1)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    lp = log_softmax(logits)
    return float(-np.mean(lp[np.arange(len(labels)), labels]))


def loss_and_grads(
    params: MlpParams,
    X: np.ndarray,
    y: np.ndarray,
    shift: np.ndarray | None = None,
    beta: float = 0.0,
    stop_grad_latent: bool = False,
):
    """Mean cross-entropy, optionally plus ``beta`` times the loss on shifted latents.

    With ``shift`` given, the second term classifies ``latent + shift`` through
    the final layer. ``shift`` is a constant. When ``stop_grad_latent`` is set
    the second term only updates the final layer.

    Returns ``(total_loss, clean_loss, shifted_loss, grads_w, grads_b)``.
    """
    n = X.shape[0]
    W_L, b_L = params.weights[-1], params.biases[-1]
    latent, cache = _latent_forward(params, X)
    rows = np.arange(n)

    logits = latent @ W_L + b_L
    p = softmax(logits)
    clean = float(-np.mean(log_softmax(logits)[rows, y]))
    d_logits = p
    d_logits[rows, y] -= 1.0
    d_logits /= n

    grads_w = [np.zeros_like(W) for W in params.weights]
    grads_b = [np.zeros_like(b) for b in params.biases]
    grads_w[-1] += latent.T @ d_logits
    grads_b[-1] += d_logits.sum(axis=0)
    d_latent = d_logits @ W_L.T

    shifted = 0.0
    if shift is not None and beta != 0.0:
        moved = latent + shift
        logits2 = moved @ W_L + b_L
        p2 = softmax(logits2)
        shifted = float(-np.mean(log_softmax(logits2)[rows, y]))
        d2 = p2
        d2[rows, y] -= 1.0
        d2 *= beta / n
        grads_w[-1] += moved.T @ d2
        grads_b[-1] += d2.sum(axis=0)
        if not stop_grad_latent:
            d_latent = d_latent + d2 @ W_L.T

    _latent_backward(params, cache, d_latent, grads_w, grads_b)
    return clean + beta * shifted, clean, shifted, grads_w, grads_b


@dataclass
class TrainResult:
    params: MlpParams
    epoch_losses: list[float] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else math.nan


def sgd_epochs(params: MlpParams, data: Dataset, cfg: TrainConfig, objective=None, on_batch=None) -> TrainResult:
    """Mini-batch SGD on ``params`` (copied). Shared by training and removal fine-tuning.

    ``objective(params, X, y)`` returns ``(loss, grads_w, grads_b)``; the
    default is plain mean cross-entropy. Row order per epoch comes from the
    ``"shuffle"`` stream of ``cfg.seed``.
    """
    if len(data) < 1:
        raise ContractError("empty dataset")
    if objective is None:
        def objective(pr, X, y):
            loss, _, _, gw, gb = loss_and_grads(pr, X, y)
            return loss, gw, gb
    params = params.copy()
    rng = make_rng(cfg.seed, "shuffle")
    n = len(data)
    losses = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, gw, gb = objective(params, data.inputs[idx], data.labels[idx])
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} in epoch {epoch}")
            total += loss * len(idx)
            last = len(params.weights) - 1
            for i in range(len(params.weights)):
                if cfg.weight_decay:
                    gw[i] = gw[i] + cfg.weight_decay * params.weights[i]
                params.weights[i] -= cfg.lr * gw[i]
                if not (cfg.pin_final_bias and i == last):
                    params.biases[i] -= cfg.lr * gb[i]
        losses.append(total / n)
        if on_batch is not None:
            on_batch(epoch, losses[-1])
    if not params.is_finite():
        raise TrainingDivergedError("parameters became non-finite")
    log.debug("final epoch loss %.6f", losses[-1])
    return TrainResult(params, losses)


def train(data: Dataset, arch, cfg: TrainConfig, init: MlpParams | None = None) -> TrainResult:
    """Train from Glorot initialisation (or resume from ``init``) by mini-batch SGD on cross-entropy."""
    arch = tuple(arch)
    if init is None:
        init = init_params(arch, cfg.seed, cfg.latent_activation)
        if cfg.pin_final_bias:
            init.biases[-1][:] = 0.0
    elif init.arch != arch:
        raise ContractError(f"initial parameters have arch {init.arch}, expected {arch}")
    if data.inputs.shape[1] != arch[0]:
        raise ContractError("input width does not match the architecture")
    if data.labels.min() < 0 or data.labels.max() >= arch[-1]:
        raise ContractError("labels out of range for the architecture")
    return sgd_epochs(init, data, cfg)


def _single_loss_ld(params: MlpParams, x: np.ndarray, label: int) -> np.longdouble:
    # extended-precision forward pass: the finite-difference oracle should not
    # be limited by float64 cancellation
    h = x.astype(np.longdouble)
    n_hidden = len(params.weights) - 1
    for i in range(n_hidden):
        z = h @ params.weights[i].astype(np.longdouble) + params.biases[i].astype(np.longdouble)
        h = np.maximum(z, 0) if _rectified(params, i) else z
    logits = h @ params.weights[-1].astype(np.longdouble) + params.biases[-1].astype(np.longdouble)
    top = np.max(logits)
    return -(logits[label] - top - np.log(np.sum(np.exp(logits - top))))


def gradient_check(params: MlpParams, x, label: int, step: float = 1e-5) -> float:
    """Max relative error between backprop and central finite differences."""
    x = as_vector(x)
    _, _, _, gw, gb = loss_and_grads(params, x[None, :], np.array([label]))
    analytic = np.concatenate([g.ravel() for pair in zip(gw, gb) for g in pair])
    theta = params.flat()
    worst = 0.0
    for i in range(theta.size):
        hi = theta.copy()
        lo = theta.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = _single_loss_ld(params.from_flat(hi), x, label)
        f_lo = _single_loss_ld(params.from_flat(lo), x, label)
        fd = float((f_hi - f_lo) / (np.longdouble(hi[i]) - np.longdouble(lo[i])))
        err = abs(fd - analytic[i]) / (abs(fd) + abs(analytic[i]) + 1e-8)
        worst = max(worst, err)
    return worst


def save_params(path, params: MlpParams, seed: int | None = None) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "arch": list(params.arch),
        "seed": seed,
        "latent_activation": params.latent_activation,
        "layers": [
            {
                "rows": int(W.shape[0]),
                "cols": int(W.shape[1]),
                "weights": W.ravel().tolist(),
                "bias": b.tolist(),
            }
            for W, b in zip(params.weights, params.biases)
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_params(path) -> MlpParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint format {doc.get('format_version')!r}")
    weights, biases = [], []
    for layer in doc["layers"]:
        W = np.array(layer["weights"], dtype=np.float64).reshape(layer["rows"], layer["cols"])
        weights.append(W)
        biases.append(np.array(layer["bias"], dtype=np.float64))
    params = MlpParams(weights, biases, doc.get("latent_activation", "identity"))
    if list(params.arch) != list(doc["arch"]):
        raise ContractError("checkpoint arch field disagrees with its layers")
    return params
