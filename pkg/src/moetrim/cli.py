"""Command-line entry point: ``moetrim <subcommand> ...``.

Every subcommand writes its artifacts atomically plus a ``manifest.json``
(inputs, arguments, output hashes, versions). Failures exit non-zero with a
JSON error object on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path


from moetrim import io
from moetrim.analysis import (
    DISTRIBUTIONS, ImportanceScores, SimilarityProfile, analysis_report, analyze, build_calibration,
    load_calibration, save_calibration,
)
from moetrim.checkpoint import load_checkpoint, save_checkpoint
from moetrim.cost import PRESET_GROUP_SIZE, cost_report, format_table, preset, scenario_plan, scenario_reports
from moetrim.engine import ModelConfig, generate_random_model, toy_config, toy_shared_config
from moetrim.errors import ArgumentError, InputError, MoETrimError
from moetrim.pipeline import PipelineRecipe, bench, fidelity_eval, run_pipeline, write_pipeline_outputs
from moetrim.slimming import SlimRecipe, slim_model
from moetrim.trimming import (
    DropPlan, ROUTING_MODES, apply_plan, plan_block_drop, plan_expert_drop_global, plan_expert_drop_layerwise,
    plan_layer_drop,
)

log = logging.getLogger("moetrim")

TOY_CONFIGS = {"toy": toy_config, "toy-shared": toy_shared_config}


def _manifest_for(out: Path) -> Path:
    return out / "manifest.json" if out.suffix == "" else out.with_name(out.name + ".manifest.json")


def _finish(args, inputs, outputs, out_anchor: Path) -> None:
    io.write_manifest(_manifest_for(out_anchor), args.command, vars(args), inputs, outputs)


def _config_from_args(args) -> ModelConfig:
    if args.config:
        return ModelConfig.from_dict(io.read_json(args.config))
    overrides = {}
    for key in ("n_layers", "d_model", "n_experts", "top_k", "vocab_size", "max_seq"):
        val = getattr(args, key)
        if val is not None:
            overrides[key] = val
    return TOY_CONFIGS[args.arch](**overrides)


def cmd_gen_model(args):
    cfg = _config_from_args(args)
    model = generate_random_model(cfg, args.seed, std=args.init_std)
    out = Path(args.out)
    save_checkpoint(model, out)
    _finish(args, [args.config], [out], out)
    print(json.dumps({"model": str(out), "n_layers": cfg.n_layers, "n_experts": cfg.n_experts}))


def cmd_gen_calib(args):
    source = None
    if args.source:
        source = load_calibration(args.source).samples.reshape(-1)
    calib = build_calibration(args.n_samples, args.seq_len, args.seed, args.vocab_size, source, args.distribution)
    out = Path(args.out)
    save_calibration(calib, out)
    _finish(args, [args.source], [out], out)
    print(json.dumps({"calibration": str(out), "n_samples": len(calib), "seq_len": calib.seq_len}))


def cmd_analyze(args):
    model = load_checkpoint(args.model)
    calib = load_calibration(args.calib)
    importance, profile = analyze(model, calib)
    out = Path(args.out_dir)
    outputs = [out / "analysis.json"]
    io.write_json(outputs[0], analysis_report(importance, profile, calib))
    if not args.no_figures:
        from moetrim import plotting

        outputs.append(plotting.plot_similarity(profile, out / "similarity.png"))
        if importance is not None:
            outputs.append(plotting.plot_importance(importance, out / "importance.png"))
    _finish(args, [args.model, args.calib], outputs, out)
    for o, sm, snm, sb in zip(profile.layer_origins, profile.moe, profile.norm_moe, profile.block):
        fmt = lambda v: "-" if v is None else f"{v:.6f}"  # noqa: E731
        print(f"{o}\t{fmt(sm)}\t{fmt(snm)}\t{fmt(sb)}")


def cmd_plan(args):
    report = io.read_json(args.analysis)
    if args.kind == "expert":
        if report.get("importance") is None:
            raise InputError("analysis report has no expert importance")
        scores = ImportanceScores.from_dict(report["importance"])
        if args.n_keep is None:
            raise ArgumentError("--n-keep is required for expert plans")
        plan = (plan_expert_drop_layerwise(scores, int(args.n_keep)) if args.mode == "layerwise"
                else plan_expert_drop_global(scores, args.n_keep))
    else:
        if args.n_drop is None:
            raise ArgumentError("--n-drop is required for layer and block plans")
        profile = SimilarityProfile.from_dict(report["similarity"])
        plan = (plan_layer_drop if args.kind == "layer" else plan_block_drop)(profile, args.n_drop)
    out = Path(args.out)
    io.write_json(out, plan.to_dict())
    _finish(args, [args.analysis], [out], out)
    print(json.dumps({"kind": plan.kind, "removed": list(plan.removed),
                      "keep": {str(k): list(v) for k, v in plan.keep.items()}}))


def cmd_apply(args):
    model = load_checkpoint(args.model)
    plan = DropPlan.from_dict(io.read_json(args.plan))
    trimmed = apply_plan(model, plan, args.routing)
    out = Path(args.out)
    save_checkpoint(trimmed, out)
    _finish(args, [args.model, args.plan], [out], out)
    print(json.dumps({"model": str(out), "n_layers": trimmed.config.n_layers}))


def _slim_recipe(args) -> SlimRecipe:
    if args.recipe:
        d = io.read_json(args.recipe)
        return SlimRecipe.from_dict(d.get("slimming", d))
    n = m = None
    if args.nm:
        n, m = (int(v) for v in args.nm.split(":"))
    return SlimRecipe(method=args.method, sparsity=args.sparsity, n=n, m=m, bits=args.bits,
                      group_size=args.group_size, grid=args.grid, exclude_shared=args.exclude_shared,
                      include_attention=args.include_attention)


def cmd_slim(args):
    from moetrim.analysis import collect_traces

    model = load_checkpoint(args.model)
    recipe = _slim_recipe(args)
    traces = None
    if recipe.needs_traces:
        if not args.calib:
            raise ArgumentError(f"{recipe.method} needs --calib")
        traces = collect_traces(model, load_calibration(args.calib))
    slimmed = slim_model(model, recipe, traces)
    out = Path(args.out)
    save_checkpoint(slimmed, out)
    _finish(args, [args.model, args.calib, args.recipe], [out], out)
    print(json.dumps({"model": str(out), "method": recipe.method}))


def cmd_pipeline(args):
    model = load_checkpoint(args.model)
    recipe = PipelineRecipe.from_dict(io.read_json(args.recipe))
    calib = load_calibration(args.calib)
    result = run_pipeline(model, recipe, calib)
    out = Path(args.out_dir)
    outputs = write_pipeline_outputs(result, recipe, out)
    _finish(args, [args.model, args.recipe, args.calib], outputs, out)
    print(format_table([result.cost]))
    print(json.dumps(result.fidelity.to_dict()))


def _bits_map(spec: str | None) -> dict:
    if not spec:
        return {}
    out = {}
    for part in spec.split(","):
        cls, _, bits = part.partition("=")
        out[cls.strip()] = int(bits)
    return out


def cmd_cost(args):
    out = Path(args.out_dir) if args.out_dir else None
    inputs = [args.model, args.plan]
    if args.all_scenarios:
        reports = scenario_reports(args.preset, args.seq, args.batch, args.quant_bits)
    else:
        if args.model:
            cfg = load_checkpoint(args.model).config
        else:
            cfg = preset(args.preset)
        plan = None
        if args.plan:
            plan = DropPlan.from_dict(io.read_json(args.plan))
        elif args.scenario:
            plan = scenario_plan(cfg, args.scenario)
        group = args.group_size or PRESET_GROUP_SIZE.get(cfg.name, 128)
        reports = [cost_report(cfg, args.seq, None, None, group, args.batch, args.kv_bytes, name="original")]
        if plan is not None or args.bits_map:
            reports.append(cost_report(cfg, args.seq, plan, _bits_map(args.bits_map), group, args.batch,
                                       args.kv_bytes, name="compressed", baseline=cfg))
    table = format_table(reports)
    print(table)
    if out is not None:
        from moetrim import plotting

        outputs = [out / "cost.json", out / "cost.txt"]
        io.write_json(outputs[0], [r.to_dict() for r in reports])
        io.atomic_write_bytes(outputs[1], (table + "\n").encode())
        outputs.append(plotting.plot_cost(reports, out / "cost.png"))
        _finish(args, inputs, outputs, out)
    if args.json:
        print(io.dumps([r.to_dict() for r in reports]), end="")


def cmd_eval(args):
    a, b = load_checkpoint(args.model_a), load_checkpoint(args.model_b)
    calib = load_calibration(args.calib)
    rep = fidelity_eval(a, b, calib)
    if args.out:
        out = Path(args.out)
        io.write_json(out, rep.to_dict())
        _finish(args, [args.model_a, args.model_b, args.calib], [out], out)
    print(json.dumps(rep.to_dict()))


def cmd_bench(args):
    from moetrim import plotting

    model = load_checkpoint(args.model)
    counts = [int(c) for c in args.drop_counts.split(",")]
    rows = bench(model, counts, args.runs, args.prompt_len, args.new_tokens, args.seed)
    out = Path(args.out_dir)
    outputs = [out / "bench.json"]
    io.write_json(outputs[0], rows)
    outputs.append(plotting.plot_bench(rows, out / "bench.png"))
    _finish(args, [args.model], outputs, out)
    for r in rows:
        print(f"{r['dropped_blocks']}\t{r['median_s']:.6f}\t{r['relative']:.3f}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moetrim", description=__doc__.splitlines()[0])
    p.add_argument("--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-model", help="generate a random toy MoE checkpoint")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config", help="JSON ModelConfig; overrides --arch")
    s.add_argument("--arch", choices=sorted(TOY_CONFIGS), default="toy")
    s.add_argument("--n-layers", dest="n_layers", type=int)
    s.add_argument("--d-model", dest="d_model", type=int)
    s.add_argument("--n-experts", dest="n_experts", type=int)
    s.add_argument("--top-k", dest="top_k", type=int)
    s.add_argument("--vocab-size", dest="vocab_size", type=int)
    s.add_argument("--max-seq", dest="max_seq", type=int)
    s.add_argument("--init-std", type=float, default=None, help="default 1/sqrt(d_model * n_layers)")
    s.set_defaults(func=cmd_gen_model)

    s = sub.add_parser("gen-calib", help="write an MOEC1 calibration file")
    s.add_argument("--out", required=True)
    s.add_argument("--n-samples", type=int, default=128)
    s.add_argument("--seq-len", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--vocab-size", type=int, default=256)
    s.add_argument("--distribution", choices=DISTRIBUTIONS, default="uniform")
    s.add_argument("--source", help="MOEC1 file used as a token stream")
    s.set_defaults(func=cmd_gen_calib)

    s = sub.add_parser("analyze", help="expert importance and layer/block similarity")
    s.add_argument("--model", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("plan", help="build a drop plan from an analysis report")
    s.add_argument("--analysis", required=True)
    s.add_argument("--kind", choices=("expert", "layer", "block"), required=True)
    s.add_argument("--mode", choices=("layerwise", "global"), default="global")
    s.add_argument("--n-keep", type=float, help="experts kept per layer (average for global)")
    s.add_argument("--n-drop", type=int, help="layers or blocks to drop")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("apply", help="apply a drop plan to a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--plan", required=True)
    s.add_argument("--routing", choices=ROUTING_MODES, default="recompute")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_apply)

    s = sub.add_parser("slim", help="prune or quantize expert weights")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--recipe", help="JSON slimming recipe (or pipeline recipe)")
    s.add_argument("--method", default="rtn", choices=("rtn", "awq", "gptq", "magnitude", "wanda", "sparsegpt"))
    s.add_argument("--bits", type=int, default=4)
    s.add_argument("--group-size", type=int, default=128)
    s.add_argument("--grid", type=int, default=20)
    s.add_argument("--sparsity", type=float, default=0.5)
    s.add_argument("--nm", help="semi-structured pattern such as 2:4")
    s.add_argument("--exclude-shared", action="store_true")
    s.add_argument("--include-attention", action="store_true")
    s.add_argument("--calib")
    s.set_defaults(func=cmd_slim)

    s = sub.add_parser("pipeline", help="run an ordered slimming/trimming recipe")
    s.add_argument("--model", required=True)
    s.add_argument("--recipe", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_pipeline)

    s = sub.add_parser("cost", help="analytic params/FLOPs/memory/KV-cache report")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=("mixtral-8x7b", "deepseek-moe-16b", "mistral-7b"))
    src.add_argument("--model")
    s.add_argument("--all-scenarios", action="store_true", help="baseline and trimming rows for --preset")
    s.add_argument("--plan")
    s.add_argument("--scenario", help="shorthand plan such as E2/8, L8/32, B5/32")
    s.add_argument("--bits-map", help="e.g. ffn=4,attention=4")
    s.add_argument("--quant-bits", type=int, default=4)
    s.add_argument("--group-size", type=int)
    s.add_argument("--seq", type=int, default=2048)
    s.add_argument("--batch", type=int, default=1)
    s.add_argument("--kv-bytes", type=int, default=2)
    s.add_argument("--out-dir")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_cost)

    s = sub.add_parser("eval", help="fidelity of model B against model A")
    s.add_argument("--model-a", required=True)
    s.add_argument("--model-b", required=True)
    s.add_argument("--calib", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="toy decode-time smoke test per dropped-block count")
    s.add_argument("--model", required=True)
    s.add_argument("--drop-counts", default="0,2,4,6")
    s.add_argument("--runs", type=int, default=5)
    s.add_argument("--prompt-len", type=int, default=16)
    s.add_argument("--new-tokens", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "cost" and args.all_scenarios and not args.preset:
        parser.error("--all-scenarios requires --preset")
    try:
        args.func(args)
    except MoETrimError as exc:
        sys.stderr.write(json.dumps(exc.to_dict()) + "\n")
        return 1
    except (OSError, ValueError, KeyError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
