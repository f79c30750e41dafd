"""Structure removal: ExpertDrop (layer-wise and global), LayerDrop, BlockDrop.

Plan indices always refer to the original, untrimmed model: layer indices are
block origins and expert indices are original expert slots. That makes plan
application idempotent and lets block plans compose as set unions.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from moetrim.analysis import CalibrationSet, ImportanceScores, SimilarityProfile, collect_traces, similarity_profile
from moetrim.engine import Block, MoEModel, MoELayer, ModelConfig
from moetrim.errors import ArgumentError, StructuralError

KINDS = ("expert", "layer", "block")
ROUTING_MODES = ("recompute", "strict")


@dataclass
class DropPlan:
    kind: str
    # expert kind: original layer index -> surviving original expert indices
    keep: dict[int, tuple[int, ...]] = field(default_factory=dict)
    # layer/block kind: removed original layer indices
    removed: tuple[int, ...] = ()
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArgumentError(f"plan kind must be one of {KINDS}, got {self.kind!r}")
        self.keep = {int(l): tuple(sorted(int(i) for i in v)) for l, v in self.keep.items()}
        self.removed = tuple(sorted({int(i) for i in self.removed}))
        if self.kind == "expert":
            for l, v in self.keep.items():
                if not v:
                    raise ArgumentError(f"layer {l} would keep no experts; use a layer plan instead")
        elif self.keep:
            raise ArgumentError(f"{self.kind} plans take 'removed', not 'keep'")

    @classmethod
    def empty(cls, kind: str = "block") -> "DropPlan":
        return cls(kind)

    def is_empty_for(self, config: ModelConfig) -> bool:
        if self.kind == "expert":
            return all(len(v) >= config.n_experts for v in self.keep.values())
        return not self.removed

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "keep": {str(l): list(v) for l, v in sorted(self.keep.items())},
            "removed": list(self.removed),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DropPlan":
        return cls(d["kind"], {int(k): v for k, v in d.get("keep", {}).items()}, tuple(d.get("removed", ())),
                   d.get("provenance", {}))

    def apply_to_config(self, config: ModelConfig) -> ModelConfig:
        """Structural effect of the plan on a config (no weights needed)."""
        origins = config.origins()
        if self.kind == "block":
            gone = set(self.removed)
            keep_pos = [i for i, o in enumerate(origins) if o not in gone]
            remap = {old: new for new, old in enumerate(keep_pos)}
            counts = None
            if config.expert_counts is not None:
                counts = tuple(config.expert_counts[i] for i in keep_pos)
            new_origins = tuple(origins[i] for i in keep_pos)
            identity = new_origins == tuple(range(len(new_origins)))
            return config.replace(
                n_layers=len(keep_pos),
                dense_layers=tuple(remap[i] for i in config.dense_layers if i in remap),
                ffn_removed=tuple(remap[i] for i in config.ffn_removed if i in remap),
                expert_counts=counts,
                layer_origins=None if identity else new_origins,
                source_layers=None if identity and len(new_origins) == config.original_layers
                else config.original_layers,
            )
        if self.kind == "layer":
            gone = set(self.removed)
            removed = set(config.ffn_removed) | {i for i, o in enumerate(origins) if o in gone}
            return config.replace(ffn_removed=tuple(sorted(removed)))
        counts = [config.experts_in_layer(i) for i in range(config.n_layers)]
        for i, o in enumerate(origins):
            if o in self.keep and config.layer_kind(i) == "moe":
                counts[i] = min(counts[i], len(self.keep[o]))
        return config.replace(expert_counts=tuple(counts))


def _moe_score_layers(scores: ImportanceScores) -> list[tuple[int, np.ndarray]]:
    out = [(scores.layer_origins[l], np.asarray(s, dtype=np.float64))
           for l, s in enumerate(scores.scores) if s is not None]
    if not out:
        raise ArgumentError("importance scores contain no routed MoE layer")
    return out


def plan_expert_drop_layerwise(scores: ImportanceScores, n_keep: int) -> DropPlan:
    """Keep the ``n_keep`` highest-scoring experts in every MoE layer."""
    layers = _moe_score_layers(scores)
    keep = {}
    for origin, s in layers:
        if not 1 <= n_keep <= s.size:
            raise ArgumentError(f"n_keep must lie in [1, {s.size}], got {n_keep}")
        order = np.argsort(-s, kind="stable")[:n_keep]
        keep[origin] = tuple(int(i) for i in order)
    return DropPlan("expert", keep, provenance={"method": "expert_layerwise", "n_keep": n_keep,
                                                "scores": scores.to_dict()})


def plan_expert_drop_global(scores: ImportanceScores, n_keep_avg: float) -> DropPlan:
    """Keep the ``round(n_keep_avg * L)`` best (layer, expert) pairs model-wide.

    If a layer ends up empty its best expert is promoted and the lowest-scoring
    survivor of a layer holding more than one is evicted, until every layer
    keeps at least one expert. Equal scores favour the lower expert index,
    then the lower layer, so uniform scores reproduce the layer-wise plan.
    """
    layers = _moe_score_layers(scores)
    n_layers = len(layers)
    total = sum(s.size for _, s in layers)
    budget = int(round(n_keep_avg * n_layers))
    if not n_layers <= budget <= total:
        raise ArgumentError(f"global budget {budget} infeasible: need {n_layers} <= budget <= {total}")
    pairs = sorted(((-float(s[i]), i, li) for li, (_, s) in enumerate(layers) for i in range(s.size)))
    kept = set((li, i) for _, i, li in pairs[:budget])
    rank = {(li, i): r for r, (_, i, li) in enumerate(pairs)}
    per_layer = [sum(1 for (li, _) in kept if li == l) for l in range(n_layers)]
    for l in range(n_layers):
        if per_layer[l]:
            continue
        s = layers[l][1]
        best = int(np.argsort(-s, kind="stable")[0])
        donors = [p for p in kept if per_layer[p[0]] > 1]
        worst = max(donors, key=lambda p: rank[p])
        kept.remove(worst)
        per_layer[worst[0]] -= 1
        kept.add((l, best))
        per_layer[l] = 1
    keep = {layers[l][0]: tuple(sorted(i for (li, i) in kept if li == l)) for l in range(n_layers)}
    return DropPlan("expert", keep, provenance={"method": "expert_global", "n_keep_avg": n_keep_avg,
                                                "budget": budget, "scores": scores.to_dict()})


def _rank_highest(values, origins, n_drop: int, what: str) -> tuple[int, ...]:
    cand = [(-float(v), int(o)) for v, o in zip(values, origins) if v is not None]
    if not 0 <= n_drop <= len(cand):
        raise ArgumentError(f"cannot drop {n_drop} {what}s; {len(cand)} are eligible")
    if n_drop >= len(values) and what == "block":
        raise ArgumentError("cannot drop every block")
    return tuple(o for _, o in sorted(cand)[:n_drop])


def plan_layer_drop(profile: SimilarityProfile, n_drop: int) -> DropPlan:
    """Remove the (Norm, MoE) pairs of the ``n_drop`` routed-MoE layers with the
    highest residual-stream similarity. Ties favour the lower layer index."""
    if n_drop >= len(profile.norm_moe) and n_drop:
        raise ArgumentError("n_drop must be smaller than the layer count")
    values = list(profile.norm_moe)
    if profile.layer_kinds:
        values = [v if k == "moe" else None for v, k in zip(values, profile.layer_kinds)]
    removed = _rank_highest(values, profile.layer_origins, n_drop, "layer")
    return DropPlan("layer", removed=removed, provenance={"method": "layer_drop", "n_drop": n_drop,
                                                          "similarity": profile.norm_moe})


def plan_block_drop(profile: SimilarityProfile, n_drop: int) -> DropPlan:
    """Remove the ``n_drop`` blocks whose output is most similar to their input."""
    removed = _rank_highest(profile.block, profile.layer_origins, n_drop, "block")
    return DropPlan("block", removed=removed, provenance={"method": "block_drop", "n_drop": n_drop,
                                                          "similarity": profile.block})


def plan_drop_iterative(model: MoEModel, calib: CalibrationSet, n_drop: int, kind: str = "block") -> DropPlan:
    """Drop one unit at a time, re-measuring similarity on the trimmed model."""
    if kind not in ("layer", "block"):
        raise ArgumentError("iterative planning applies to layer or block plans")
    planner = plan_block_drop if kind == "block" else plan_layer_drop
    removed: list[int] = []
    current = model
    for _ in range(n_drop):
        prof = similarity_profile(collect_traces(current, calib))
        step = planner(prof, 1)
        removed.extend(step.removed)
        current = apply_plan(model, DropPlan(kind, removed=tuple(removed)))
    return DropPlan(kind, removed=tuple(removed), provenance={"method": f"{kind}_drop_iterative", "n_drop": n_drop})


def _trim_moe(layer: MoELayer, keep: set[int], routing: str) -> MoELayer:
    pos = [j for j, o in enumerate(layer.origins) if int(o) in keep]
    if not pos:
        raise StructuralError("expert plan leaves a layer with no experts")
    if len(pos) == layer.n_experts:
        return layer
    new = MoELayer(
        router=layer.router[pos].copy(),
        experts=[layer.experts[j] for j in pos],
        shared=layer.shared,
        origins=layer.origins[pos].copy(),
        full_router=layer.full_router,
        keep_rows=layer.keep_rows,
    )
    if routing == "strict":
        if new.full_router is None:
            new.full_router = layer.router.copy()
            new.keep_rows = np.asarray(pos, dtype=np.int64)
        else:
            new.keep_rows = layer.keep_rows[pos].copy()
    return new


def apply_plan(model: MoEModel, plan: DropPlan, routing: str = "recompute") -> MoEModel:
    """Return a trimmed copy of ``model``; surviving weights are untouched.

    ``routing="recompute"`` re-softmaxes over the surviving experts;
    ``"strict"`` keeps the original softmax and zeroes dropped entries.
    """
    if routing not in ROUTING_MODES:
        raise ArgumentError(f"routing must be one of {ROUTING_MODES}")
    out = copy.copy(model)
    full_layers = set(range(model.config.original_layers))
    if plan.kind == "expert":
        bad = [l for l in plan.keep if l not in full_layers]
    else:
        bad = [l for l in plan.removed if l not in full_layers]
    if bad:
        raise StructuralError(f"plan references layers {bad} outside the model")
    blocks: list[Block] = []
    for b in model.blocks:
        if plan.kind == "block":
            if b.origin in plan.removed:
                continue
            blocks.append(b)
        elif plan.kind == "layer":
            blocks.append(Block(b.attn_norm, b.attn, None, None, b.origin) if b.origin in plan.removed else b)
        else:
            if b.origin in plan.keep and isinstance(b.ffn, MoELayer):
                keep = set(plan.keep[b.origin])
                n_orig = int(b.ffn.origins.max()) + 1 if b.ffn.n_experts else 0
                if max(keep) >= max(n_orig, model.config.n_experts):
                    raise StructuralError(f"plan keeps expert {max(keep)} beyond layer {b.origin}'s range")
                blocks.append(Block(b.attn_norm, b.attn, b.ffn_norm, _trim_moe(b.ffn, keep, routing), b.origin))
            else:
                blocks.append(b)
    if not blocks:
        raise StructuralError("plan removes every block")
    out.blocks = blocks
    out.sync_config()
    return copy.deepcopy(out)
