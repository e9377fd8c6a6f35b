"""Displacement metrics over sampled predictions.

For each record, every predicted sample is scored by its Euclidean distance
to the NEAREST ground-truth destination. Record-level statistics aggregate
into:

    ADE   mean over records of the per-record average distance (meters)
    MDE   median over records of the same quantity (meters)
    PA_k  percentage of all samples landing within k meters of a GT

Confidence intervals are percentile bootstrap over records.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data.schema import Intent

DEFAULT_PA_THRESHOLDS = (2.0, 4.0)


class MetricsError(ValueError):
    pass


@dataclass
class SampleStats:
    """Per-record summary of sample-to-nearest-GT distances."""

    record_id: str
    mean_distance: float
    within: dict[float, float]  # threshold -> fraction of samples within
    n_samples: int
    intent: Intent | None = None


def per_sample_stats(
    samples: np.ndarray,
    gts: np.ndarray,
    record_id: str = "",
    intent: Intent | None = None,
    thresholds: tuple[float, ...] = DEFAULT_PA_THRESHOLDS,
) -> SampleStats:
    samples = np.asarray(samples, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[1] != 2:
        raise MetricsError(f"samples must be (n, 2), got {samples.shape}")
    if gts.ndim != 2 or gts.shape[1] != 2 or gts.shape[0] == 0:
        raise MetricsError(f"ground truths must be (m, 2) with m >= 1, got {gts.shape}")
    if samples.shape[0] == 0:
        raise MetricsError("no samples")
    diff = samples[:, None, :] - gts[None, :, :]
    dists = np.sqrt((diff**2).sum(axis=2)).min(axis=1)
    within = {float(t): float(np.mean(dists <= t)) for t in thresholds}
    return SampleStats(
        record_id=record_id,
        mean_distance=float(dists.mean()),
        within=within,
        n_samples=samples.shape[0],
        intent=intent,
    )


@dataclass
class MethodMetrics:
    method: str
    n_records: int
    ade: float
    mde: float
    pa: dict[float, float]  # threshold -> percent
    ade_ci: tuple[float, float] | None = None
    pa_ci: dict[float, tuple[float, float]] = field(default_factory=dict)
    per_intent: dict[str, dict] | None = None
    n_samples: int = 0
    seed: int | None = None
    bootstrap_resamples: int = 0
    referred_source: str | None = None

    def validate(self) -> None:
        if self.ade < 0:
            raise MetricsError(f"ADE {self.ade} < 0")
        for t, v in self.pa.items():
            if not 0.0 <= v <= 100.0:
                raise MetricsError(f"PA_{t:g} = {v} outside [0, 100]")


def aggregate_metrics(
    stats: list[SampleStats],
    method: str = "",
    thresholds: tuple[float, ...] = DEFAULT_PA_THRESHOLDS,
) -> MethodMetrics:
    if not stats:
        raise MetricsError("no per-record stats to aggregate")
    means = np.array([s.mean_distance for s in stats])
    pa = {}
    for t in thresholds:
        t = float(t)
        # every record contributes its per-record fraction; records weigh equally
        pa[t] = float(np.mean([s.within[t] for s in stats]) * 100.0)
    out = MethodMetrics(
        method=method,
        n_records=len(stats),
        ade=float(means.mean()),
        mde=float(np.median(means)),
        pa=pa,
        n_samples=stats[0].n_samples,
    )
    out.validate()
    return out


def bootstrap_ci(
    values: np.ndarray,
    seed: int,
    n_resamples: int = 1000,
    confidence: float = 0.95,
    statistic=np.mean,
) -> tuple[float, float]:
    """Percentile bootstrap CI of a statistic over records."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise MetricsError("bootstrap over empty value set")
    rng = np.random.Generator(np.random.PCG64(seed))
    n = values.size
    idx = rng.integers(0, n, size=(n_resamples, n))
    replicated = statistic(values[idx], axis=1)
    alpha = (1.0 - confidence) / 2.0
    lo, hi = np.percentile(replicated, [100.0 * alpha, 100.0 * (1.0 - alpha)])
    return (float(lo), float(hi))


def attach_bootstrap_cis(
    metrics: MethodMetrics,
    stats: list[SampleStats],
    seed: int,
    n_resamples: int = 1000,
    confidence: float = 0.95,
) -> MethodMetrics:
    means = np.array([s.mean_distance for s in stats])
    metrics.ade_ci = bootstrap_ci(means, seed, n_resamples, confidence)
    for t in metrics.pa:
        fracs = np.array([s.within[t] for s in stats]) * 100.0
        metrics.pa_ci[t] = bootstrap_ci(fracs, seed + 1 + int(t * 1000), n_resamples, confidence)
    metrics.bootstrap_resamples = n_resamples
    return metrics


def per_intent_breakdown(
    stats: list[SampleStats],
    thresholds: tuple[float, ...] = DEFAULT_PA_THRESHOLDS,
) -> dict[str, dict]:
    """One row per intent label; intents with no records map to None fields."""
    rows: dict[str, dict] = {}
    for intent in Intent:
        subset = [s for s in stats if s.intent == intent]
        if not subset:
            rows[intent.value] = {"n": 0, "ade": None, "mde": None, "pa": None}
            continue
        agg = aggregate_metrics(subset, method=intent.value, thresholds=thresholds)
        rows[intent.value] = {
            "n": agg.n_records,
            "ade": agg.ade,
            "mde": agg.mde,
            "pa": {f"{t:g}": v for t, v in agg.pa.items()},
        }
    return rows


def metrics_to_json(metrics: MethodMetrics) -> dict:
    out = {
        "method": metrics.method,
        "n_records": metrics.n_records,
        "ade": metrics.ade,
        "mde": metrics.mde,
        "pa": {f"{t:g}": v for t, v in metrics.pa.items()},
        "n_samples": metrics.n_samples,
        "seed": metrics.seed,
        "bootstrap_resamples": metrics.bootstrap_resamples,
        "referred_source": metrics.referred_source,
    }
    if metrics.ade_ci is not None:
        out["ade_ci"] = list(metrics.ade_ci)
    if metrics.pa_ci:
        out["pa_ci"] = {f"{t:g}": list(ci) for t, ci in metrics.pa_ci.items()}
    if metrics.per_intent is not None:
        out["per_intent"] = metrics.per_intent
    return out


def metrics_from_json(obj: dict) -> MethodMetrics:
    m = MethodMetrics(
        method=obj["method"],
        n_records=int(obj["n_records"]),
        ade=float(obj["ade"]),
        mde=float(obj["mde"]),
        pa={float(t): float(v) for t, v in obj["pa"].items()},
        n_samples=int(obj.get("n_samples", 0)),
        seed=obj.get("seed"),
        bootstrap_resamples=int(obj.get("bootstrap_resamples", 0)),
        referred_source=obj.get("referred_source"),
    )
    if "ade_ci" in obj:
        m.ade_ci = tuple(obj["ade_ci"])
    if "pa_ci" in obj:
        m.pa_ci = {float(t): tuple(ci) for t, ci in obj["pa_ci"].items()}
    m.per_intent = obj.get("per_intent")
    m.validate()
    return m


@dataclass
class MetricsReport:
    rows: list[MethodMetrics] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"rows": [metrics_to_json(m) for m in self.rows]}

    @classmethod
    def from_json(cls, obj: dict) -> "MetricsReport":
        return cls(rows=[metrics_from_json(r) for r in obj.get("rows", [])])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls.from_json(json.loads(Path(path).read_text()))

    def to_csv(self) -> str:
        """Flat table, one method per row, in the usual results-table shape."""
        thresholds = sorted({t for m in self.rows for t in m.pa})
        header = ["method", "n_records", "ADE", "ADE_ci_lo", "ADE_ci_hi", "MDE"]
        for t in thresholds:
            header += [f"PA_{t:g}", f"PA_{t:g}_ci_lo", f"PA_{t:g}_ci_hi"]
        lines = [",".join(header)]
        for m in self.rows:
            row = [
                m.method,
                str(m.n_records),
                f"{m.ade:.4f}",
                f"{m.ade_ci[0]:.4f}" if m.ade_ci else "",
                f"{m.ade_ci[1]:.4f}" if m.ade_ci else "",
                f"{m.mde:.4f}",
            ]
            for t in thresholds:
                if t in m.pa:
                    row.append(f"{m.pa[t]:.4f}")
                    ci = m.pa_ci.get(t)
                    row += [f"{ci[0]:.4f}" if ci else "", f"{ci[1]:.4f}" if ci else ""]
                else:
                    row += ["", "", ""]
            lines.append(",".join(row))
        return "\n".join(lines) + "\n"
