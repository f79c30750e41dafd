"""Ordered composition of slimming and trimming, plus output-fidelity metrics."""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from moetrim import io
from moetrim.analysis import CalibrationSet, collect_traces, expert_importance, similarity_profile
from moetrim.checkpoint import save_checkpoint
from moetrim.cost import CostReport, cost_report, format_table
from moetrim.engine import KVCache, MoEModel, model_forward
from moetrim.errors import ArgumentError, InputError, MoETrimError, StageError
from moetrim.slimming import SlimRecipe, slim_model
from moetrim.trimming import (
    DropPlan, ROUTING_MODES, apply_plan, plan_block_drop, plan_drop_iterative, plan_expert_drop_global,
    plan_expert_drop_layerwise, plan_layer_drop,
)

log = logging.getLogger(__name__)

ORDERS = ("S+T", "T+S")
KL_FLOOR = 1e-10


@dataclass
class TrimSpec:
    """``amount`` is n_keep (layerwise), the average keep count (global) or
    n_drop (layer/block). ``indices`` pins an explicit plan instead."""

    kind: str
    amount: float | None = None
    mode: str = "global"
    indices: list | dict | None = None
    iterative: bool = False
    routing: str = "recompute"

    def __post_init__(self):
        if self.kind not in ("expert", "layer", "block"):
            raise ArgumentError(f"unknown trimming kind {self.kind!r}")
        if self.mode not in ("layerwise", "global"):
            raise ArgumentError(f"unknown expert-drop mode {self.mode!r}")
        if self.routing not in ROUTING_MODES:
            raise ArgumentError(f"routing must be one of {ROUTING_MODES}")
        if self.amount is None and self.indices is None:
            raise ArgumentError("trimming needs an amount or explicit indices")

    @property
    def needs_traces(self) -> bool:
        return self.indices is None


@dataclass
class PipelineRecipe:
    trimming: TrimSpec | None = None
    slimming: SlimRecipe | None = None
    order: str | None = None
    seeds: dict = field(default_factory=dict)
    calibration: str | None = None

    def __post_init__(self):
        if self.trimming is None and self.slimming is None:
            raise ArgumentError("recipe needs a trimming or a slimming stage")
        if self.trimming is not None and self.slimming is not None and self.order not in ORDERS:
            raise ArgumentError(f"recipe with both stages needs order in {ORDERS}")
        if self.order is not None and self.order not in ORDERS:
            raise ArgumentError(f"order must be one of {ORDERS}")

    def stages(self) -> list[str]:
        if self.trimming is None:
            return ["slim"]
        if self.slimming is None:
            return ["trim"]
        return ["slim", "trim"] if self.order == "S+T" else ["trim", "slim"]

    def to_dict(self) -> dict:
        return {
            "trimming": None if self.trimming is None else asdict(self.trimming),
            "slimming": None if self.slimming is None else self.slimming.to_dict(),
            "order": self.order,
            "seeds": self.seeds,
            "calibration": self.calibration,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineRecipe":
        unknown = set(d) - {"trimming", "slimming", "order", "seeds", "calibration"}
        if unknown:
            raise InputError(f"unknown recipe keys {sorted(unknown)}")
        trim = TrimSpec(**d["trimming"]) if d.get("trimming") else None
        slim = SlimRecipe.from_dict(d["slimming"]) if d.get("slimming") else None
        return cls(trim, slim, d.get("order"), d.get("seeds", {}), d.get("calibration"))


@dataclass
class FidelityReport:
    cosine: float
    top1_agreement: float
    kl: float
    n_tokens: int

    def to_dict(self) -> dict:
        return asdict(self)


def _log_softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def fidelity_from_logits(la: np.ndarray, lb: np.ndarray) -> FidelityReport:
    """Per-token logit cosine, top-1 agreement and KL(a || b), averaged."""
    if la.shape != lb.shape:
        raise InputError(f"logit shapes differ: {la.shape} vs {lb.shape}")
    la = la.reshape(-1, la.shape[-1]).astype(np.float64)
    lb = lb.reshape(-1, lb.shape[-1]).astype(np.float64)
    dot = np.einsum("ij,ij->i", la, lb)
    denom = np.sqrt(np.einsum("ij,ij->i", la, la) * np.einsum("ij,ij->i", lb, lb))
    cos = np.clip(np.where(denom > 0, dot / np.where(denom > 0, denom, 1.0), 0.0), -1.0, 1.0)
    agree = np.argmax(la, axis=-1) == np.argmax(lb, axis=-1)
    p = np.maximum(np.exp(_log_softmax64(la)), KL_FLOOR)
    q = np.maximum(np.exp(_log_softmax64(lb)), KL_FLOOR)
    kl = np.sum(p * (np.log(p) - np.log(q)), axis=-1)
    return FidelityReport(float(cos.mean()), float(agree.mean()), float(max(kl.mean(), 0.0)), int(la.shape[0]))


def model_logits(model: MoEModel, data: CalibrationSet) -> np.ndarray:
    return np.stack([model_forward(model, s)[0] for s in data.samples])


def fidelity_eval(model_a: MoEModel, model_b: MoEModel, data: CalibrationSet) -> FidelityReport:
    if model_a.config.vocab_size != model_b.config.vocab_size:
        raise InputError("models have different vocabularies")
    data.check_vocab(model_a.config.vocab_size)
    return fidelity_from_logits(model_logits(model_a, data), model_logits(model_b, data))


def make_plan(model: MoEModel, spec: TrimSpec, calib: CalibrationSet | None) -> DropPlan:
    if spec.indices is not None:
        if spec.kind == "expert":
            return DropPlan("expert", {int(k): v for k, v in dict(spec.indices).items()},
                            provenance={"method": "explicit"})
        return DropPlan(spec.kind, removed=tuple(spec.indices), provenance={"method": "explicit"})
    if calib is None:
        raise ArgumentError("score-driven trimming needs calibration data")
    if spec.iterative and spec.kind in ("layer", "block"):
        return plan_drop_iterative(model, calib, int(spec.amount), spec.kind)
    traces = collect_traces(model, calib)
    if spec.kind == "expert":
        scores = expert_importance(traces)
        if spec.mode == "layerwise":
            return plan_expert_drop_layerwise(scores, int(spec.amount))
        return plan_expert_drop_global(scores, spec.amount)
    profile = similarity_profile(traces)
    if spec.kind == "layer":
        return plan_layer_drop(profile, int(spec.amount))
    return plan_block_drop(profile, int(spec.amount))


@dataclass
class PipelineResult:
    model: MoEModel
    cost: CostReport
    fidelity: FidelityReport
    plan: DropPlan | None
    stages: list[str]


def run_pipeline(model: MoEModel, recipe: PipelineRecipe, calib: CalibrationSet | None,
                 out_dir=None) -> PipelineResult:
    """Apply the recipe's stages in order, re-capturing traces before each one
    so the second stage sees the first stage's output."""
    if calib is None:
        raise ArgumentError("run_pipeline needs calibration data for fidelity evaluation")
    current, plan = model, None
    for stage in recipe.stages():
        try:
            if stage == "trim":
                plan = make_plan(current, recipe.trimming, calib)
                current = apply_plan(current, plan, recipe.trimming.routing)
            else:
                traces = None
                if recipe.slimming.needs_traces:
                    if calib is None:
                        raise ArgumentError(f"{recipe.slimming.method} needs calibration data")
                    traces = collect_traces(current, calib)
                current = slim_model(current, recipe.slimming, traces)
        except MoETrimError as exc:
            raise StageError(stage, exc) from exc
        log.info("stage %s done: %d blocks", stage, len(current.blocks))
    slim = recipe.slimming
    cost = cost_report(current.config, seq=calib.seq_len,
                       bits_map=slim.bits_map() if slim else None,
                       group_size=slim.group_size if slim else 128, baseline=model.config)
    fid = fidelity_eval(model, current, calib)
    result = PipelineResult(current, cost, fid, plan, recipe.stages())
    if out_dir is not None:
        write_pipeline_outputs(result, recipe, Path(out_dir))
    return result


def write_pipeline_outputs(result: PipelineResult, recipe: PipelineRecipe, out: Path) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "model.moem", out / "recipe.json", out / "cost.json", out / "cost.txt", out / "fidelity.json"]
    save_checkpoint(result.model, paths[0])
    io.write_json(paths[1], recipe.to_dict())
    io.write_json(paths[2], result.cost.to_dict())
    io.atomic_write_bytes(paths[3], (format_table([result.cost]) + "\n").encode())
    io.write_json(paths[4], result.fidelity.to_dict())
    if result.plan is not None:
        paths.append(out / "plan.json")
        io.write_json(paths[-1], result.plan.to_dict())
    return paths


def decode_time(model: MoEModel, prompt: np.ndarray, n_new: int) -> float:
    """Wall time of a prefill plus ``n_new`` cached greedy decode steps."""
    cache = KVCache(len(model.blocks))
    start = time.perf_counter()
    logits, _ = model_forward(model, prompt, cache=cache)
    tok = int(np.argmax(logits[-1]))
    for _ in range(n_new):
        logits, _ = model_forward(model, [tok], cache=cache)
        tok = int(np.argmax(logits[-1]))
    return time.perf_counter() - start


def bench(model: MoEModel, drop_counts, runs: int = 5, prompt_len: int = 16, n_new: int = 32,
          seed: int = 0) -> list[dict]:
    """Median decode time per number of dropped trailing blocks, relative to
    the untrimmed model. A toy-scale smoke check only."""
    rng = np.random.default_rng(seed)
    prompt = rng.integers(0, model.config.vocab_size, size=prompt_len)
    if prompt_len + n_new > model.config.max_seq:
        raise ArgumentError("prompt_len + n_new exceeds max_seq")
    rows = []
    origins = [b.origin for b in model.blocks]
    for n in drop_counts:
        if not 0 <= n < len(origins):
            raise ArgumentError(f"cannot drop {n} of {len(origins)} blocks")
        trimmed = apply_plan(model, DropPlan("block", removed=tuple(origins[len(origins) - n :]))) if n else model
        decode_time(trimmed, prompt, 2)
        times = [decode_time(trimmed, prompt, n_new) for _ in range(runs)]
        rows.append({"dropped_blocks": n, "median_s": statistics.median(times), "runs": runs})
    base = rows[0]["median_s"] if rows else 1.0
    for r in rows:
        r["relative"] = r["median_s"] / base
    return rows
