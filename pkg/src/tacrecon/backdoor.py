"""Synthetic additive-trigger backdoor, evaluation metrics and TAC diagnostics."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from tacrecon.core import ContractError, as_matrix, as_vector
from tacrecon.nn import Dataset, MlpParams, latent_batch, predict


@dataclass(frozen=True)
class Trigger:
    delta: np.ndarray
    target_class: int = 1
    poison_rate: float = 0.1

    def __post_init__(self):
        d = as_vector(self.delta)
        if not np.all(np.isfinite(d)):
            raise ContractError("trigger must be finite")
        if not 0.0 < self.poison_rate < 1.0:
            raise ContractError(f"poison_rate must be in (0, 1), got {self.poison_rate}")
        object.__setattr__(self, "delta", d)


@dataclass(frozen=True)
class Metrics:
    acc: float
    asr: float


def sparse_trigger(d_in: int, magnitude: float = 3.0, n_active: int = 4, coords=None) -> np.ndarray:
    """Additive trigger: ``magnitude`` on ``n_active`` coordinates (the last ones by default)."""
    delta = np.zeros(d_in)
    if coords is None:
        coords = range(d_in - n_active, d_in)
    delta[list(coords)] = magnitude
    return delta


def class_means(d_in: int, n_classes: int, separation: float, rng, layout: str = "orthogonal",
                support: int | None = None) -> np.ndarray:
    """Class centres, one per row, nonzero only on the first ``support`` coordinates.

    ``"orthogonal"`` puts them at ``separation`` along the axes of a random
    orthonormal frame (every pair at distance ``separation * sqrt(2)``; needs
    ``n_classes <= support``). ``"gaussian"`` draws them i.i.d. normal at
    scale ``separation``.
    """
    support = d_in if support is None else int(support)
    if not 1 <= support <= d_in:
        raise ContractError(f"support must be in [1, {d_in}], got {support}")
    means = np.zeros((n_classes, d_in))
    if layout == "orthogonal":
        if n_classes > support:
            raise ContractError("orthogonal layout needs n_classes <= support")
        q, r = np.linalg.qr(rng.standard_normal((support, n_classes)))
        q = q * np.sign(np.diag(r))
        means[:, :support] = separation * q.T
    elif layout == "gaussian":
        means[:, :support] = rng.normal(0.0, separation, size=(n_classes, support))
    else:
        raise ContractError(f"unknown layout {layout!r}")
    return means


def synthetic_classification(n: int, d_in: int, n_classes: int, separation: float, rng,
                             layout: str = "orthogonal", support: int | None = None) -> tuple[np.ndarray, Dataset]:
    """Gaussian blobs with unit noise around :func:`class_means`.

    Returns ``(means, dataset)``; labels are balanced up to rounding.
    """
    means = class_means(d_in, n_classes, separation, rng, layout, support)
    return means, sample_blobs(means, n, rng)


def sample_blobs(means: np.ndarray, n: int, rng) -> Dataset:
    n_classes, d_in = means.shape
    labels = np.arange(n) % n_classes
    rng.shuffle(labels)
    inputs = means[labels] + rng.standard_normal((n, d_in))
    return Dataset(inputs, labels)


def apply_trigger(x, trig: Trigger) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != trig.delta.shape[0]:
        raise ContractError(f"input width {x.shape[-1]} != trigger length {trig.delta.shape[0]}")
    return x + trig.delta


def poison_dataset(data: Dataset, trig: Trigger, rng) -> tuple[Dataset, np.ndarray]:
    """Append triggered copies of a random ``poison_rate`` fraction of rows, relabelled to the target.

    Returns the shuffled dataset and a boolean mask marking the appended rows.
    """
    n = len(data)
    n_poison = int(round(trig.poison_rate * n))
    if n_poison < 1:
        raise ContractError(f"poison_rate {trig.poison_rate} poisons no rows of a {n}-row dataset")
    chosen = rng.choice(n, size=n_poison, replace=False)
    poisoned_x = apply_trigger(data.inputs[chosen], trig)
    poisoned_y = np.full(n_poison, trig.target_class, dtype=np.int64)
    inputs = np.vstack([data.inputs, poisoned_x])
    labels = np.concatenate([data.labels, poisoned_y])
    mask = np.concatenate([np.zeros(n, bool), np.ones(n_poison, bool)])
    order = rng.permutation(n + n_poison)
    return Dataset(inputs[order], labels[order]), mask[order]


def evaluate(params: MlpParams, test: Dataset, trig: Trigger) -> Metrics:
    """Clean accuracy, and attack success rate over triggered rows whose true class is not the target."""
    if len(test) < 1:
        raise ContractError("empty test set")
    acc = float(np.mean(predict(params, test.inputs) == test.labels))
    keep = test.labels != trig.target_class
    if not np.any(keep):
        return Metrics(acc, math.nan)
    triggered = apply_trigger(test.inputs[keep], trig)
    asr = float(np.mean(predict(params, triggered) == trig.target_class))
    return Metrics(acc, asr)


def der(before: Metrics, after: Metrics) -> float:
    """Defense effectiveness rating ``(max(0, ASR drop) - max(0, ACC drop) + 1) / 2``.

    Metrics are fractions in [0, 1]; see :func:`der_percent` for percentages.
    """
    for v in (before.acc, before.asr, after.acc, after.asr):
        if not 0.0 <= v <= 1.0:
            raise ContractError(f"metric {v} outside [0, 1]")
    d_asr = before.asr - after.asr
    d_acc = before.acc - after.acc
    return (max(0.0, d_asr) - max(0.0, d_acc) + 1.0) / 2.0


def der_percent(acc_before: float, asr_before: float, acc_after: float, asr_after: float) -> float:
    """DER for metrics given in percent, returned in percent."""
    return 100.0 * der(Metrics(acc_before / 100, asr_before / 100), Metrics(acc_after / 100, asr_after / 100))


def oracle_tac_latent(params: MlpParams, inputs, trig: Trigger) -> np.ndarray:
    """Mean latent activation change caused by the trigger (needs the trigger, hence "oracle")."""
    X = as_matrix(inputs)
    if X.shape[0] < 1:
        raise ContractError("empty input batch")
    return np.mean(latent_batch(params, apply_trigger(X, trig)) - latent_batch(params, X), axis=0)


def _top_k(v: np.ndarray, k: int) -> set[int]:
    # stable sort keeps lower indices first among equal magnitudes
    return set(np.argsort(-np.abs(v), kind="stable")[:k].tolist())


def tac_coverage(s, tac, top_k_fraction: float = 0.1) -> float:
    """Overlap of the top-K coordinates (by magnitude) of ``s`` and ``tac``, divided by K."""
    s = as_vector(s)
    tac = as_vector(tac)
    if s.shape != tac.shape:
        raise ContractError("perturbation and TAC must have the same length")
    if not 0.0 < top_k_fraction <= 1.0:
        raise ContractError("top_k_fraction must be in (0, 1]")
    k = max(1, int(math.floor(top_k_fraction * s.shape[0])))
    return len(_top_k(s, k) & _top_k(tac, k)) / k


def random_coverage_baseline(tac, top_k_fraction: float, rng, n_draws: int = 100) -> float:
    tac = as_vector(tac)
    draws = rng.standard_normal((n_draws, tac.shape[0]))
    return float(np.mean([tac_coverage(r, tac, top_k_fraction) for r in draws]))


def metrics_csv(rows) -> str:
    """``phase,acc,asr,der`` CSV text; ``rows`` is an iterable of (phase, Metrics, der-or-None)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["phase", "acc", "asr", "der"])
    for phase, m, d in rows:
        w.writerow([phase, _cell(m.acc), _cell(m.asr), _cell(d)])
    return buf.getvalue()


def _cell(v) -> str:
    # missing values (no trigger, no removal) are empty cells
    return "" if v is None or math.isnan(v) else f"{v:.6f}"


def _json_num(v):
    return None if v is None or math.isnan(v) else v


def metrics_json(rows) -> str:
    """Full-precision twin of :func:`metrics_csv`; missing values become null."""
    doc = [{"phase": phase, "acc": _json_num(m.acc), "asr": _json_num(m.asr), "der": _json_num(d)}
           for phase, m, d in rows]
    return json.dumps(doc, indent=1) + "\n"
