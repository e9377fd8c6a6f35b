"""Method evaluation over a dataset split.

Every method is wrapped as a sampler: record -> array of destination draws.
Distribution methods return n i.i.d. samples, point methods return their one
degenerate point. The per-record RNG is derived from (seed, record position),
so results do not depend on evaluation order or batching.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data.schema import DatasetSplit
from .data.synthetic import GeneratorTruth
from .metrics import (
    DEFAULT_PA_THRESHOLDS,
    MethodMetrics,
    aggregate_metrics,
    attach_bootstrap_cis,
    per_intent_breakdown,
    per_sample_stats,
)
from .mixture import Mixture2D, sample, top_k_truncate
from .models.baselines import nonparam_sample
from .models.naive import NAIVE_KINDS, naive_samples


def evaluate_method(
    split: DatasetSplit,
    sampler,
    method: str,
    n_samples: int = 1000,
    seed: int = 0,
    thresholds: tuple[float, ...] = DEFAULT_PA_THRESHOLDS,
    bootstrap_resamples: int = 1000,
    referred_source: str | None = None,
    with_intents: bool = True,
) -> MethodMetrics:
    stats = []
    for i, rec in enumerate(split):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(i,))))
        samples = np.asarray(sampler(rec, n_samples, rng), dtype=np.float64)
        stats.append(
            per_sample_stats(
                samples,
                rec.destination_array(),
                record_id=rec.id,
                intent=rec.intent,
                thresholds=thresholds,
            )
        )
    metrics = aggregate_metrics(stats, method=method, thresholds=thresholds)
    metrics.n_samples = n_samples
    metrics.seed = seed
    metrics.referred_source = referred_source
    if bootstrap_resamples:
        attach_bootstrap_cis(metrics, stats, seed=seed + 99991, n_resamples=bootstrap_resamples)
    if with_intents:
        metrics.per_intent = per_intent_breakdown(stats, thresholds)
    return metrics


def naive_sampler(kind: str, road_dims_hw: tuple[int, int] = (200, 300), root: Path | None = None):
    if kind not in NAIVE_KINDS:
        raise ValueError(f"unknown naive kind {kind!r}")

    def fn(rec, n, rng):
        return naive_samples(rec, kind, n, rng, road_dims_hw=road_dims_hw, root=root)

    return fn


def mixture_sampler(mixtures: dict[str, Mixture2D], top_k: int | None = None):
    """Sampler over precomputed per-record mixtures, optionally truncated."""
    if top_k is not None:
        mixtures = {rid: top_k_truncate(m, top_k) for rid, m in mixtures.items()}

    def fn(rec, n, rng):
        return sample(mixtures[rec.id], n, rng)

    return fn


def truth_sampler(truth: GeneratorTruth):
    def fn(rec, n, rng):
        return sample(truth.mixtures[rec.id], n, rng)

    return fn


def point_sampler(points: dict[str, np.ndarray]):
    def fn(rec, n, rng):
        return np.asarray(points[rec.id], dtype=np.float64).reshape(1, 2)

    return fn


def nonparam_sampler(logits: dict[str, tuple[np.ndarray, np.ndarray]], grid_hw: tuple[int, int]):
    def fn(rec, n, rng):
        lu, lv = logits[rec.id]
        return nonparam_sample(lu, lv, n, rng, grid_hw=grid_hw)

    return fn
