"""Command-line entry points.

Verbs: pretrain, probe, mask-train, ssf, scratch, trim, sweep, bench, eval.
Every run writes a resolved-config copy into the output directory; re-running
from that copy reproduces the artifacts (single-thread mode).

Exit codes: 0 success, 2 config error, 3 verification failure, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .autograd import NumericError
from .blocks import HeadCfg, attach_head, build_backbone
from .checkpoint import CheckpointError, load_checkpoint, make_checkpoint
from .config import ConfigError, RunConfig, default_config, load_config
from .costbench import comparison_rows, count_costs, render_comparison_row, time_forward
from .data import Dataset, FeatureSpec
from .masking import mask_statistics
from .reports import HistoryWriter, write_csv, write_json, read_json, validate_json
from .training import run_downstream, run_pretrain
from .trimming import DEVIATION_CONTRACT, TrimPlan, VerificationError, derive_trimmed_spec, trim

_MODE_BY_VERB = {
    "pretrain": "pretrain",
    "probe": "probe",
    "mask-train": "mask",
    "ssf": "ssf",
    "scratch": "scratch",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON (defaults used when omitted)")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--precision", choices=["f32", "f64"], help="float width for fresh builds")
    p.add_argument("--threads", type=int, help="BLAS/OpenMP thread cap (1 for bitwise determinism)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trimlab", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    for verb in ("pretrain", "probe", "mask-train", "ssf", "scratch", "trim", "sweep", "bench", "eval"):
        p = sub.add_parser(verb)
        _add_common(p)
        if verb in ("probe", "mask-train", "ssf", "scratch", "sweep"):
            p.add_argument("--encoder", required=True, help="pretrained encoder checkpoint")
        if verb == "scratch":
            p.add_argument("--plan", required=True, help="trim plan JSON from the trim command")
        if verb in ("trim", "eval"):
            p.add_argument("--checkpoint", required=True)
        if verb == "bench":
            p.add_argument("--base", required=True)
            p.add_argument("--trimmed", required=True)
        if verb == "sweep":
            p.add_argument("--t-grid", default="0.3,0.4,0.5,0.6,0.7")
            p.add_argument("--targets", default="0.25,0.5,0.75")
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if args.seed is not None:
        cfg.train = replace(cfg.train, seed=args.seed)
    if args.out is not None:
        cfg.output = args.out
    if args.precision is not None:
        cfg.precision = args.precision
    if args.threads is not None:
        cfg.threads = args.threads
    verb_mode = _MODE_BY_VERB.get(args.verb)
    if verb_mode is not None and cfg.train.mode != verb_mode:
        loss = "masked_mse" if verb_mode == "pretrain" else cfg.task.loss_kind
        cfg.train = replace(cfg.train, mode=verb_mode, loss_kind=loss)
    if cfg.threads is not None:
        try:
            import threadpoolctl

            threadpoolctl.threadpool_limits(limits=cfg.threads)
        except ImportError:
            print("threadpoolctl unavailable; --threads ignored", file=sys.stderr)
    return cfg


def _prepare_out(cfg: RunConfig) -> str:
    os.makedirs(cfg.output, exist_ok=True)
    write_json(os.path.join(cfg.output, "resolved_config.json"), cfg.resolved(), "resolved_config")
    return cfg.output


def _load_encoder(path, cfg: RunConfig):
    ckpt = load_checkpoint(path)
    spec = ckpt.spec()
    if spec.backbone != cfg.model["backbone"] or spec.feature_dim != cfg.model["feature_dim"]:
        raise ConfigError(
            f"encoder checkpoint ({spec.backbone}, feature_dim={spec.feature_dim}) does not match "
            f"config model ({cfg.model['backbone']}, feature_dim={cfg.model['feature_dim']})"
        )
    return ckpt


def _downstream_metrics(cfg: RunConfig, result, model) -> dict:
    doc = {
        "mode": cfg.train.mode,
        "task": cfg.task.task,
        "metric_kind": cfg.task.metric_kind,
        "steps": cfg.train.steps,
        "seed": cfg.train.seed,
        "best_step": result.best_step,
        "best_val_metric": result.best_val_metric,
        "test_metric": result.test_metric,
        "lambda": result.lam,
        "active_fraction": 1.0,
        "trim_ratio": 0.0,
    }
    if result.masks is not None:
        stats = mask_statistics(result.masks, model.spec)
        doc["active_fraction"] = stats.active_fraction
        doc["trim_ratio"] = stats.trimming_ratio
    return doc


def cmd_pretrain(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(cfg)
    task = cfg.pretext_task()
    dataset = Dataset(task)
    model = build_backbone(cfg.model_spec(with_head=False, task=task), seed=cfg.train.seed, dtype=cfg.dtype)
    with HistoryWriter(os.path.join(out, "history.jsonl")) as sink:
        model, history = run_pretrain(model, dataset, cfg.train, history_sink=sink)
    make_checkpoint(model, meta={"stage": "pretrain"}).save(os.path.join(out, "encoder.ckpt"))
    write_json(
        os.path.join(out, "metrics.json"),
        {"mode": "pretrain", "task": "pretext", "seed": cfg.train.seed, "steps": cfg.train.steps,
         "final_val_mse": -history[-1]["metric"]},
        "metrics",
    )
    return 0


def _run_downstream_cmd(args, mode: str) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(cfg)
    dataset = Dataset(cfg.task)

    if mode == "scratch":
        plan_doc = read_json(args.plan)
        validate_json(plan_doc, "trim_plan")
        base_spec = load_checkpoint(args.encoder).spec()
        plan = TrimPlan.from_dict(plan_doc, base_spec)
        spec = derive_trimmed_spec(base_spec, plan.keep_counts())
        spec.head = HeadCfg(cfg.model["head_hidden"], cfg.task.num_outputs)
        spec.validate()
        model = build_backbone(spec, seed=cfg.train.seed, dtype=cfg.dtype)
    else:
        ckpt = _load_encoder(args.encoder, cfg)
        model = ckpt.to_model()
        if not model.frozen:
            raise ConfigError(f"{mode} mode requires a frozen (pretrained) encoder checkpoint")
        attach_head(model, HeadCfg(cfg.model["head_hidden"], cfg.task.num_outputs), seed=cfg.train.seed)

    sparsity = cfg.sparsity if mode == "mask" else None
    with HistoryWriter(os.path.join(out, "history.jsonl")) as sink:
        result = run_downstream(model, dataset, cfg.train, sparsity=sparsity, history_sink=sink)

    extra = None
    if result.ssf is not None:
        from .training import ssf_parameters

        extra = {name: t.data for name, t in ssf_parameters(result.ssf).items()}
    ckpt_out = make_checkpoint(model, masks=result.masks, meta={"stage": mode, "task": cfg.task.task})
    if extra:
        ckpt_out.arrays.update(extra)
    ckpt_out.save(os.path.join(out, "model.ckpt"))
    write_json(os.path.join(out, "metrics.json"), _downstream_metrics(cfg, result, model), "metrics")
    return 0


def cmd_trim(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(cfg)
    ckpt = load_checkpoint(args.checkpoint)
    if not ckpt.has_masks():
        raise ConfigError("trim: checkpoint has no mask logits")
    model = ckpt.to_model()
    masks = {sid: (arr >= 0.0).astype(np.float64) for sid, arr in ckpt.mask_logits().items()}

    frames = FeatureSpec().num_frames(cfg.task.clip_samples)
    rng = np.random.default_rng(cfg.train.seed)
    dtype = next(iter(model.params.values())).dtype
    probes = rng.normal(size=(16, frames, model.spec.feature_dim)).astype(dtype)

    trimmed, plan, report = trim(model, masks, probes=probes)
    write_json(os.path.join(out, "trim_report.json"), report.to_dict(), "trim_report")
    write_json(os.path.join(out, "trim_plan.json"), plan.to_dict(), "trim_plan")
    make_checkpoint(trimmed, meta={"stage": "trim"}).save(os.path.join(out, "trimmed.ckpt"))
    contract = DEVIATION_CONTRACT[np.dtype(dtype)]
    if report.verification > contract:
        raise VerificationError(
            f"trim verification deviation {report.verification:.3e} exceeds the {contract:.0e} contract"
        )
    return 0


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(cfg)
    dataset = Dataset(cfg.task)
    t_grid = [float(v) for v in args.t_grid.split(",") if v]
    targets = [float(v) for v in args.targets.split(",") if v]
    frames = FeatureSpec().num_frames(cfg.task.clip_samples)

    rows = []
    for t in t_grid:
        ckpt = _load_encoder(args.encoder, cfg)
        model = ckpt.to_model()
        attach_head(model, HeadCfg(cfg.model["head_hidden"], cfg.task.num_outputs), seed=cfg.train.seed)
        train = replace(cfg.train, mode="mask", loss_kind=cfg.task.loss_kind)
        sparsity = replace(cfg.sparsity, t=t)
        with HistoryWriter(os.path.join(out, f"history_t{t:g}.jsonl")) as sink:
            result = run_downstream(model, dataset, train, sparsity=sparsity, history_sink=sink)
        stats = mask_statistics(result.masks, model.spec)
        trimmed_spec = derive_trimmed_spec(model.spec, {sid: int(v.sum()) for sid, v in result.best_assignment().items()})
        macs = count_costs(trimmed_spec, (frames, model.spec.feature_dim)).macs
        rows.append(
            {"kind": "grid", "t": t, "trim_ratio": stats.trimming_ratio, "metric": result.test_metric,
             "params": stats.params_after, "macs": macs}
        )

    for target in targets:
        best = min(rows[: len(t_grid)], key=lambda r: abs(r["trim_ratio"] - target))
        sel = dict(best)
        sel["kind"] = f"select_{target:g}"
        rows.append(sel)
    write_csv(os.path.join(out, "sweep.csv"), rows, ["kind", "t", "trim_ratio", "metric", "params", "macs"])
    return 0


def cmd_bench(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(cfg)
    frames = FeatureSpec().num_frames(cfg.task.clip_samples)

    reports = {}
    for label, path in (("base", args.base), ("trimmed", args.trimmed)):
        model = load_checkpoint(path).to_model()
        rep = count_costs(model.spec, (frames, model.spec.feature_dim))
        rep.bytes = os.path.getsize(path)
        rep.timing = time_forward(model, (frames, model.spec.feature_dim), warmup=10, reps=30, seed=cfg.train.seed)
        reports[label] = rep
    base, trimmed = reports["base"], reports["trimmed"]
    trimmed.speedup = base.timing.wall_ms_median / trimmed.timing.wall_ms_median

    write_json(os.path.join(out, "base_costs.json"), base.to_dict(), "cost_report")
    write_json(os.path.join(out, "trimmed_costs.json"), trimmed.to_dict(), "cost_report")
    rows = comparison_rows(base, trimmed)
    write_csv(os.path.join(out, "comparison.csv"), rows, ["label", "size_mo", "gflops", "gmacs", "params", "speedup"])
    for row in rows:
        print(render_comparison_row(row["label"], row["size_mo"], row["gflops"], row["gmacs"], row["speedup"]))
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = _prepare_out(cfg)
    dataset = Dataset(cfg.task)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.to_model()
    masks = None
    if ckpt.has_masks():
        masks = {sid: (arr >= 0.0).astype(np.float64) for sid, arr in ckpt.mask_logits().items()}

    from . import autograd as ag
    from .blocks import forward_encoder, forward_head
    from .training import metrics as metric_fn

    feats = dataset.features("test")
    outs = []
    with ag.no_grad():
        for i in range(0, len(feats), 256):
            emb = forward_encoder(model, feats[i : i + 256], masks)
            outs.append(forward_head(model, emb).data)
    score = metric_fn(np.concatenate(outs), dataset.labels("test"), cfg.task.metric_kind)
    write_json(
        os.path.join(out, "metrics.json"),
        {"mode": "eval", "task": cfg.task.task, "metric_kind": cfg.task.metric_kind,
         "seed": cfg.train.seed, "test_metric": score},
        "metrics",
    )
    print(f"{cfg.task.metric_kind}: {score:.4f}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "pretrain":
            return cmd_pretrain(args)
        if args.verb in ("probe", "mask-train", "ssf", "scratch"):
            return _run_downstream_cmd(args, _MODE_BY_VERB[args.verb])
        if args.verb == "trim":
            return cmd_trim(args)
        if args.verb == "sweep":
            return cmd_sweep(args)
        if args.verb == "bench":
            return cmd_bench(args)
        if args.verb == "eval":
            return cmd_eval(args)
        raise ConfigError(f"unknown verb {args.verb!r}")
    except (ConfigError, CheckpointError, ValueError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except VerificationError as e:
        print(f"verification failure: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
