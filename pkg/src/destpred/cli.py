"""Command-line surface: one executable, subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .data import io as dio
from .data.checkpoint import load_checkpoint, save_checkpoint
from .data.schema import DatasetSplit
from .data.synthetic import SynthConfig, gen_synthetic_dataset
from .evaluate import (
    evaluate_method,
    mixture_sampler,
    naive_sampler,
    nonparam_sampler,
    point_sampler,
    truth_sampler,
)
from .layout import dump_channel_pngs, rasterize_scene
from .metrics import MetricsReport, metrics_to_json
from .mixture import heatmap_to_png, render_heatmap, top_k_truncate
from .models.baselines import BaselineConfig
from .models.gradcheck import audit_mixture_core, audit_pyramid_model
from .models.grounding import GroundingConfig, GroundingTrainConfig
from .models.pyramid import PyramidConfig
from .pipeline import (
    apply_grounding,
    default_train_config,
    desk_train_config,
    gaussian_baseline_mixtures,
    model_from_checkpoint,
    nonparam_split_logits,
    pdpc_split_mixtures,
    single_point_predictions,
    train_baseline,
    train_grounding_model,
    train_pdpc,
)

NAIVE_METHODS = ("random-point", "random-road-point", "pick-ego", "random-object", "pick-referred")
TRAINED_METHODS = ("pdpc", "single-point", "unimodal", "mdn", "nonparam")
EVAL_METHODS = TRAINED_METHODS + NAIVE_METHODS + ("truth-oracle",)


class CliError(RuntimeError):
    pass


def _parse_dims(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return (int(h), int(w))
    except ValueError as exc:
        raise CliError(f"bad dims {text!r}, expected HxW like 192x288") from exc


def _write_manifest(out_dir: Path, args: argparse.Namespace, argv: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "argv": argv,
        "subcommand": args.command,
        "options": {k: v for k, v in sorted(vars(args).items()) if k not in ("command", "func")},
        "versions": {
            "package": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
        "threads": torch.get_num_threads(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")


def _load_splits(data_dir: str | None) -> dict[str, DatasetSplit]:
    if not data_dir:
        raise CliError("no dataset directory: pass --data or set DESTPRED_DATA")
    return dio.load_dataset(data_dir)


def _get_split(splits: dict[str, DatasetSplit], name: str) -> DatasetSplit:
    if name not in splits:
        raise CliError(f"split {name!r} not found, have {sorted(splits)}")
    return splits[name]


def cmd_gen_data(args, argv) -> int:
    out = Path(args.out)
    cfg = SynthConfig(
        n_train=args.n_train,
        n_val=args.n_val,
        n_test=args.n_test,
        feature_dim=args.feature_dim,
        sigma=args.sigma,
    )
    splits, truth = gen_synthetic_dataset(cfg, seed=args.seed)
    for split in splits.values():
        path = dio.save_split(split, out)
        dio.save_truth(truth, split, out)
        print(f"wrote {len(split)} records to {path}")
    _write_manifest(out, args, argv)
    return 0


def cmd_rasterize(args, argv) -> int:
    splits = _load_splits(args.data)
    split = _get_split(splits, args.split)
    record = None
    if args.record_id:
        record = next((r for r in split if r.id == args.record_id), None)
        if record is None:
            raise CliError(f"record {args.record_id!r} not in split {args.split}")
    else:
        record = split.records[0]
    dims = _parse_dims(args.dims)
    layout = rasterize_scene(record, dims, no_ref=args.no_ref, root=split.root)
    out = Path(args.out)
    paths = dump_channel_pngs(layout, out, prefix=record.id)
    print(f"wrote {len(paths)} channel images for {record.id} to {out}")
    _write_manifest(out, args, argv)
    return 0


def _train_configs(args):
    seed = args.seed
    base = desk_train_config if args.preset == "desk" else default_train_config
    tcfg = base(args.model, seed) if args.model != "grounding" else None
    if tcfg is not None:
        if args.epochs is not None:
            tcfg = replace(tcfg, epochs=args.epochs)
        if args.batch_size is not None:
            tcfg = replace(tcfg, batch_size=args.batch_size)
        if args.lr is not None:
            tcfg = replace(tcfg, lr=args.lr)
    return tcfg


def cmd_train(args, argv) -> int:
    torch.set_num_threads(args.threads)
    splits = _load_splits(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.model == "pdpc":
        mcfg = PyramidConfig.desk() if args.preset == "desk" else PyramidConfig.full()
        tcfg = _train_configs(args)
        ckpt, result = train_pdpc(splits, mcfg, tcfg, no_ref=args.no_ref, root=splits["train"].root)
    elif args.model == "grounding":
        dims = {
            o.feature.shape[0]
            for rec in splits["train"]
            for o in rec.objects
            if o.feature is not None
        }
        if len(dims) != 1:
            raise CliError(f"cannot infer one object feature dim from {dims}")
        gcfg = GroundingConfig(feature_dim=dims.pop())
        gtcfg = GroundingTrainConfig(seed=args.seed)
        if args.epochs is not None:
            gtcfg = replace(gtcfg, epochs=args.epochs)
        if args.batch_size is not None:
            gtcfg = replace(gtcfg, batch_size=args.batch_size)
        if args.lr is not None:
            gtcfg = replace(gtcfg, lr=args.lr)
        ckpt, result = train_grounding_model(splits, gcfg, gtcfg)
    else:
        mcfg = BaselineConfig.desk() if args.preset == "desk" else BaselineConfig.full()
        tcfg = _train_configs(args)
        ckpt, result = train_baseline(args.model, splits, mcfg, tcfg, root=splits["train"].root)
    ckpt_path = out / f"{args.model}.ckpt"
    save_checkpoint(ckpt, ckpt_path)
    curve_path = out / "curve.csv"
    if hasattr(result, "write_curve_csv"):
        result.write_curve_csv(curve_path)
    else:  # grounding curve: epoch, train CE, val IoU@0.5
        lines = ["epoch,train_loss,val_iou50"]
        lines += [f"{e},{tr:.6f},{vi:.6f}" for e, tr, vi in result.curve]
        curve_path.write_text("\n".join(lines) + "\n")
    _write_manifest(out, args, argv)
    best = getattr(result, "best_val", None)
    if best is None:
        best = getattr(result, "best_val_iou", float("nan"))
    print(f"trained {args.model} ({args.preset} preset): best validation {best:.4f}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def _sampler_for_method(args, splits, split):
    root = split.root
    method = args.method
    if method in NAIVE_METHODS:
        return naive_sampler(method, road_dims_hw=_parse_dims(args.road_dims), root=root)
    if method == "truth-oracle":
        truth_path = Path(args.truth) if args.truth else Path(args.data) / f"{split.name}_truth.jsonl"
        if not truth_path.exists():
            raise CliError(f"no generator truth file at {truth_path}")
        return truth_sampler(dio.load_truth(truth_path))
    if not args.checkpoint:
        raise CliError(f"method {method!r} needs --checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.model_kind != method:
        raise CliError(f"checkpoint holds {ckpt.model_kind!r}, asked to eval {method!r}")
    model, cfg = model_from_checkpoint(ckpt)
    if method == "pdpc":
        no_ref = bool(ckpt.config.get("no_ref", False))
        mixtures = pdpc_split_mixtures(model, split, no_ref=no_ref, root=root)
        return mixture_sampler(mixtures, top_k=args.top_k)
    if method in ("unimodal", "mdn"):
        return mixture_sampler(gaussian_baseline_mixtures(model, split, root=root), top_k=args.top_k)
    if method == "single-point":
        return point_sampler(single_point_predictions(model, split, root=root))
    if method == "nonparam":
        return nonparam_sampler(nonparam_split_logits(model, split, root=root), cfg.nonparam_grid_hw)
    raise CliError(f"unknown eval method {method!r}")


def cmd_eval(args, argv) -> int:
    torch.set_num_threads(args.threads)
    splits = _load_splits(args.data)
    split = _get_split(splits, args.split)
    referred_source = "dataset"
    if args.referred_source == "grounding":
        if not args.grounding_checkpoint:
            raise CliError("--referred-source grounding needs --grounding-checkpoint")
        gmodel, _ = model_from_checkpoint(load_checkpoint(args.grounding_checkpoint))
        split = apply_grounding(split, gmodel)
        referred_source = "grounding"
    sampler = _sampler_for_method(args, splits, split)
    metrics = evaluate_method(
        split,
        sampler,
        method=args.method,
        n_samples=args.samples,
        seed=args.seed,
        bootstrap_resamples=args.bootstrap,
        referred_source=referred_source,
    )
    out = Path(args.out)
    report = MetricsReport(rows=[metrics])
    report.save(out / "report.json")
    (out / "report.csv").write_text(report.to_csv())
    _write_manifest(out, args, argv)
    pa = ", ".join(f"PA_{t:g} {v:.2f}%" for t, v in sorted(metrics.pa.items()))
    print(
        f"{args.method} on {split.name} ({metrics.n_records} records): "
        f"ADE {metrics.ade:.2f} m, MDE {metrics.mde:.2f} m, {pa}"
    )
    print(f"report: {out / 'report.json'}")
    return 0


def cmd_predict(args, argv) -> int:
    torch.set_num_threads(args.threads)
    splits = _load_splits(args.data)
    split = _get_split(splits, args.split)
    record = next((r for r in split if r.id == args.record_id), None)
    if record is None:
        raise CliError(f"record {args.record_id!r} not in split {args.split}")
    ckpt = load_checkpoint(args.checkpoint)
    model, cfg = model_from_checkpoint(ckpt)
    one = DatasetSplit(name=split.name, records=[record], root=split.root)
    if ckpt.model_kind == "pdpc":
        mixtures = pdpc_split_mixtures(model, one, no_ref=bool(ckpt.config.get("no_ref", False)), root=split.root)
    elif ckpt.model_kind in ("unimodal", "mdn"):
        mixtures = gaussian_baseline_mixtures(model, one, root=split.root)
    else:
        raise CliError(f"predict needs a mixture model, got {ckpt.model_kind!r}")
    mix = mixtures[record.id]
    if args.top_k is not None:
        mix = top_k_truncate(mix, args.top_k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dims = _parse_dims(args.heatmap_dims)
    grid = render_heatmap(mix, dims)
    png_path = out / f"{record.id}_heatmap.png"
    heatmap_to_png(grid, png_path)
    order = np.argsort(-mix.weights)
    components = [
        {
            "mean": mix.means[i].tolist(),
            "sigma": mix.sigma_bounds()[i].tolist(),
            "weight": float(mix.weights[i]),
        }
        for i in order
    ]
    comp_path = out / f"{record.id}_components.json"
    comp_path.write_text(json.dumps({"record": record.id, "components": components}, indent=2) + "\n")
    _write_manifest(out, args, argv)
    print(f"wrote {png_path} and {comp_path} ({mix.n_components} components)")
    return 0


def cmd_report(args, argv) -> int:
    rows = []
    per_intent_by_method = {}
    for path in args.inputs:
        report = MetricsReport.load(path)
        for m in report.rows:
            rows.append(m)
            if m.per_intent:
                per_intent_by_method[m.method] = m.per_intent
    if not rows:
        raise CliError("no metric rows found in the given reports")
    combined = MetricsReport(rows=rows)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "combined.csv").write_text(combined.to_csv())
    (out / "combined.json").write_text(
        json.dumps({"rows": [metrics_to_json(m) for m in rows]}, indent=2) + "\n"
    )
    if per_intent_by_method:
        methods = sorted(per_intent_by_method)
        lines = ["intent," + ",".join(f"{m}_ade,{m}_pa4" for m in methods)]
        intents = list(next(iter(per_intent_by_method.values())).keys())
        for intent in intents:
            cells = [intent]
            for m in methods:
                row = per_intent_by_method[m].get(intent, {})
                ade = row.get("ade")
                pa = (row.get("pa") or {}).get("4")
                cells.append("" if ade is None else f"{ade:.4f}")
                cells.append("" if pa is None else f"{pa:.4f}")
            lines.append(",".join(cells))
        (out / "per_intent.csv").write_text("\n".join(lines) + "\n")
    _write_manifest(out, args, argv)
    print(f"combined {len(rows)} method rows into {out / 'combined.csv'}")
    return 0


def cmd_audit_grad(args, argv) -> int:
    torch.set_num_threads(args.threads)
    core = audit_mixture_core(n_instances=args.mixture_instances, seed=args.seed)
    print(core.summary())
    model = audit_pyramid_model(
        n_instances=args.model_instances, seed=args.seed, n_coords=args.coords
    )
    print(model.summary())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "audit.json").write_text(
            json.dumps(
                {
                    "mixture_core": {"max_rel_err": core.max_rel_err, "tolerance": core.tolerance},
                    "model": {"max_rel_err": model.max_rel_err, "tolerance": model.tolerance},
                },
                indent=2,
            )
            + "\n"
        )
        _write_manifest(out, args, argv)
    return 0 if core.passed and model.passed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="destpred",
        description="Destination prediction: data generation, training, evaluation.",
    )
    parser.add_argument("--config", help="JSON file whose keys prefill subcommand options")
    sub = parser.add_subparsers(dest="command", required=True)

    default_data = os.environ.get("DESTPRED_DATA")

    p = sub.add_parser("gen-data", help="generate synthetic train/val/test splits")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=700)
    p.add_argument("--n-val", type=int, default=100)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--feature-dim", type=int, default=1538)
    p.add_argument("--sigma", type=float, default=1.5)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("rasterize", help="dump layout channels of one record as PNGs")
    p.add_argument("--data", default=default_data)
    p.add_argument("--split", default="train")
    p.add_argument("--record-id", default=None)
    p.add_argument("--dims", default="192x288")
    p.add_argument("--no-ref", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rasterize)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", default=default_data)
    p.add_argument("--model", required=True, choices=TRAINED_METHODS + ("grounding",))
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("desk", "full"), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--no-ref", action="store_true", help="ablation: referred object folded into its class channel")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a method on a split")
    p.add_argument("--data", default=default_data)
    p.add_argument("--split", default="test")
    p.add_argument("--method", required=True, choices=EVAL_METHODS)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--truth", default=None, help="generator truth jsonl (truth-oracle)")
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bootstrap", type=int, default=1000)
    p.add_argument("--road-dims", default="200x300")
    p.add_argument("--referred-source", choices=("dataset", "grounding"), default="dataset")
    p.add_argument("--grounding-checkpoint", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="heatmap + component dump for one record")
    p.add_argument("--data", default=default_data)
    p.add_argument("--split", default="test")
    p.add_argument("--record-id", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--top-k", type=int, default=None)
    p.add_argument("--heatmap-dims", default="192x288")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="merge eval reports into result tables")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("audit-grad", help="finite-difference gradient audits")
    p.add_argument("--mixture-instances", type=int, default=100)
    p.add_argument("--model-instances", type=int, default=5)
    p.add_argument("--coords", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_audit_grad)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", default=None)
    pre_args, _ = pre.parse_known_args(argv)
    parser = build_parser()
    if pre_args.config:
        try:
            overrides = json.loads(Path(pre_args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            print(f"error: config: {exc}", file=sys.stderr)
            return 1
        if not isinstance(overrides, dict):
            print("error: config: top level must be a JSON object", file=sys.stderr)
            return 1
        # config supplies defaults; flags typed on the command line still win.
        # Defaults must go on the subcommand parsers too: each subparser parses
        # into a fresh namespace, so main-parser defaults alone get clobbered.
        mapped = {k.replace("-", "_"): v for k, v in overrides.items()}
        parser.set_defaults(**mapped)
        for action in parser._actions:
            if isinstance(action, argparse._SubParsersAction):
                for sub in action.choices.values():
                    dests = {a.dest for a in sub._actions}
                    matching = {k: v for k, v in mapped.items() if k in dests}
                    if matching:
                        sub.set_defaults(**matching)
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
