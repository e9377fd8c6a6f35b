"""Shared fixtures.

The desk_run fixture performs the full desk-scale study once per session:
generate the 1000-record synthetic set, train the mixture predictor (with and
without the referred-object channel) plus the unimodal baseline, and evaluate
everything against the generator truth. Several acceptance checks share it.
"""

import time

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def desk_run():
    from destpred.data.synthetic import SynthConfig, gen_synthetic_dataset
    from destpred.evaluate import evaluate_method, mixture_sampler, truth_sampler
    from destpred.models.baselines import BaselineConfig
    from destpred.models.pyramid import PyramidConfig
    from destpred import pipeline as pl

    timings = {}

    t0 = time.time()
    splits, truth = gen_synthetic_dataset(SynthConfig(), seed=0)
    timings["gen"] = time.time() - t0

    def eval_sampler(sampler, method):
        return evaluate_method(
            splits["test"], sampler, method=method,
            n_samples=1000, seed=0, bootstrap_resamples=200,
        )

    t0 = time.time()
    truth_nll = truth.nll(splits["test"])
    oracle_metrics = eval_sampler(truth_sampler(truth), "truth-oracle")
    timings["oracle"] = time.time() - t0

    t0 = time.time()
    pdpc_ckpt, pdpc_result = pl.train_pdpc(
        splits, PyramidConfig.desk(), pl.desk_train_config("pdpc")
    )
    pdpc_model, _ = pl.model_from_checkpoint(pdpc_ckpt)
    pdpc_nll = pl.pdpc_split_nll(pdpc_model, splits["test"])
    pdpc_metrics = eval_sampler(
        mixture_sampler(pl.pdpc_split_mixtures(pdpc_model, splits["test"])), "pdpc"
    )
    timings["pdpc"] = time.time() - t0

    t0 = time.time()
    uni_ckpt, _ = pl.train_baseline(
        "unimodal", splits, BaselineConfig.desk(), pl.desk_train_config("unimodal")
    )
    uni_model, _ = pl.model_from_checkpoint(uni_ckpt)
    uni_metrics = eval_sampler(
        mixture_sampler(pl.gaussian_baseline_mixtures(uni_model, splits["test"])),
        "unimodal",
    )
    timings["unimodal"] = time.time() - t0

    t0 = time.time()
    noref_ckpt, _ = pl.train_pdpc(
        splits, PyramidConfig.desk(), pl.desk_train_config("pdpc"), no_ref=True
    )
    noref_model, _ = pl.model_from_checkpoint(noref_ckpt)
    noref_metrics = eval_sampler(
        mixture_sampler(pl.pdpc_split_mixtures(noref_model, splits["test"], no_ref=True)),
        "pdpc-noref",
    )
    timings["noref"] = time.time() - t0

    return {
        "splits": splits,
        "truth": truth,
        "truth_nll": truth_nll,
        "oracle_metrics": oracle_metrics,
        "pdpc_ckpt": pdpc_ckpt,
        "pdpc_result": pdpc_result,
        "pdpc_nll": pdpc_nll,
        "pdpc_metrics": pdpc_metrics,
        "unimodal_metrics": uni_metrics,
        "noref_metrics": noref_metrics,
        "timings": timings,
    }
