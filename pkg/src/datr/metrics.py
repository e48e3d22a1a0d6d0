"""Radial error, MRE, SDR and identification rate with per-domain spacing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import DomainSpec

__all__ = [
    "radial_errors", "mre", "sdr", "hand_spacing", "sample_spacing",
    "DomainReport", "EvalReport", "evaluate_domain",
]

# Threshold sets for the three reference anatomies.
HEAD_THRESHOLDS = (2.0, 2.5, 3.0, 4.0)
HAND_THRESHOLDS = (2.0, 4.0, 10.0)
CHEST_THRESHOLDS = (3.0, 6.0, 9.0)


def radial_errors(pred, truth, spacing: float = 1.0) -> np.ndarray:
    """Euclidean distance per landmark, scaled by ``spacing`` (mm/px or 1)."""
    p = np.asarray(getattr(pred, "coords", pred), dtype=np.float64).reshape(-1, 2)
    t = np.asarray(getattr(truth, "coords", truth), dtype=np.float64).reshape(-1, 2)
    if len(p) != len(t):
        raise ValueError(f"prediction has {len(p)} landmarks, truth has {len(t)}")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    return np.hypot(p[:, 0] - t[:, 0], p[:, 1] - t[:, 1]) * spacing


def mre(errors) -> tuple[float, float]:
    """Mean radial error and its population standard deviation."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("mre of an empty error list")
    return float(e.mean()), float(e.std())


def sdr(errors, threshold: float) -> float:
    """Percentage of errors strictly below ``threshold``."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("sdr of an empty error list")
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    return 100.0 * np.count_nonzero(e < threshold) / e.size


def hand_spacing(p, q) -> float:
    """mm per pixel for a hand radiograph: 50 mm across the wrist endpoints."""
    d = float(np.hypot(*(np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64))))
    if d == 0:
        raise ValueError("wrist endpoints coincide")
    return 50.0 / d


def sample_spacing(spec: DomainSpec, truth) -> float:
    kind, arg = spec.spacing_rule()
    if kind == "pixel":
        return 1.0
    if kind == "fixed":
        return float(arg)
    a, b = arg
    coords = np.asarray(getattr(truth, "coords", truth), dtype=np.float64)
    return hand_spacing(coords[a - 1], coords[b - 1])


@dataclass
class DomainReport:
    name: str
    unit: str
    mre: float
    std: float
    sdr: dict[float, float]
    id_threshold: float
    id_rate: float
    errors: list[float] = field(default_factory=list)


def evaluate_domain(spec: DomainSpec, preds, truths) -> DomainReport:
    """Score predicted landmark sets against ground truth, both in original geometry."""
    if len(preds) != len(truths):
        raise ValueError("prediction and truth lists differ in length")
    errs = np.concatenate([
        radial_errors(p, t, sample_spacing(spec, t)) for p, t in zip(preds, truths)
    ])
    mean, std = mre(errs)
    return DomainReport(
        name=spec.name, unit=spec.unit, mre=mean, std=std,
        sdr={th: sdr(errs, th) for th in spec.sdr_thresholds},
        id_threshold=spec.id_threshold, id_rate=sdr(errs, spec.id_threshold),
        errors=[float(e) for e in errs],
    )


@dataclass
class EvalReport:
    domains: list[DomainReport] = field(default_factory=list)

    def __getitem__(self, name: str) -> DomainReport:
        for d in self.domains:
            if d.name == name:
                return d
        raise KeyError(name)

    def to_text(self) -> str:
        """Plain table: one row per domain, MRE then SDR columns."""
        lines = []
        for d in self.domains:
            head = [f"MRE ({d.unit})"] + [f"SDR<{th:g}{d.unit}" for th in d.sdr] + [f"ID<{d.id_threshold:g}{d.unit}"]
            row = [f"{d.mre:.2f} ± {d.std:.2f}"] + [f"{v:.2f}" for v in d.sdr.values()] + [f"{d.id_rate:.2f}"]
            widths = [max(len(h), len(r)) for h, r in zip(head, row)]
            lines.append(d.name)
            lines.append("  " + "  ".join(h.rjust(w) for h, w in zip(head, widths)))
            lines.append("  " + "  ".join(r.rjust(w) for r, w in zip(row, widths)))
        return "\n".join(lines) + "\n"

    def to_kv(self) -> str:
        lines = []
        for d in self.domains:
            p = d.name
            lines += [f"{p}.unit={d.unit}", f"{p}.mre={d.mre!r}", f"{p}.std={d.std!r}",
                      f"{p}.count={len(d.errors)}"]
            lines += [f"{p}.sdr@{th:g}={v!r}" for th, v in d.sdr.items()]
            lines.append(f"{p}.id@{d.id_threshold:g}={d.id_rate!r}")
        return "\n".join(lines) + "\n"
