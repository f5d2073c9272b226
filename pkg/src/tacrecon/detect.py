"""Poisoned-class identification from per-class perturbation norms.

A class whose minimal perturbation is unusually small relative to the others
is flagged: norms are standardized with the population mean and standard
deviation and every class with ``z < alpha`` is reported, most anomalous first.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_ALPHA = -2.0
STD_EPS = 1e-12


@dataclass
class DetectionReport:
    norms: np.ndarray
    z: np.ndarray
    mean: float
    std: float
    alpha: float
    poisoned_classes: list[int] = field(default_factory=list)
    degenerate: bool = False

    @property
    def detected(self) -> int | None:
        return self.poisoned_classes[0] if self.poisoned_classes else None

    def to_dict(self) -> dict:
        return {
            "norms": [_finite_or_none(v) for v in self.norms],
            "z": [_finite_or_none(v) for v in self.z],
            "mean": _finite_or_none(self.mean),
            "std": _finite_or_none(self.std),
            "alpha": self.alpha,
            "poisoned_classes": list(self.poisoned_classes),
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionReport":
        def arr(xs, fill):
            return np.array([fill if v is None else v for v in xs], dtype=float)
        return cls(
            norms=arr(d["norms"], math.inf),
            z=arr(d["z"], math.inf),
            mean=math.nan if d["mean"] is None else d["mean"],
            std=math.nan if d["std"] is None else d["std"],
            alpha=d["alpha"],
            poisoned_classes=list(d["poisoned_classes"]),
            degenerate=d["degenerate"],
        )


def _finite_or_none(v):
    v = float(v)
    return v if math.isfinite(v) else None


def standardize_norms(norms) -> tuple[np.ndarray, np.ndarray, float, float, bool]:
    """Return ``(norms, z, mean, std, degenerate)``.

    Statistics use finite norms only; infinite norms (infeasible classes) get
    ``z = +inf``. Fewer than two finite norms, or a spread below ``STD_EPS``,
    gives a degenerate result with all-``nan`` finite z-scores.
    """
    norms = np.asarray(norms, dtype=float)
    finite = np.isfinite(norms)
    z = np.full(norms.shape, math.inf)
    if finite.sum() < 2:
        z[finite] = math.nan
        return norms, z, math.nan, math.nan, True
    vals = norms[finite]
    mean = float(np.mean(vals))
    std = float(np.std(vals))
    if std < STD_EPS:
        z[finite] = math.nan
        return norms, z, mean, std, True
    z[finite] = (vals - mean) / std
    return norms, z, mean, std, False


def identify_poisoned(z, alpha: float = DEFAULT_ALPHA) -> list[int]:
    """Classes with ``z < alpha``, ordered by ascending z (ties by class index)."""
    z = np.asarray(z, dtype=float)
    hits = [k for k in range(len(z)) if z[k] < alpha]
    return sorted(hits, key=lambda k: (z[k], k))


def detect(norms, alpha: float = DEFAULT_ALPHA) -> DetectionReport:
    norms, z, mean, std, degenerate = standardize_norms(norms)
    poisoned = [] if degenerate else identify_poisoned(z, alpha)
    return DetectionReport(norms, z, mean, std, alpha, poisoned, degenerate)


def detect_from_results(results, alpha: float = DEFAULT_ALPHA) -> DetectionReport:
    return detect([r.norm for r in results], alpha)
