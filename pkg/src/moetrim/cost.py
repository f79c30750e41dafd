"""Analytic parameter, FLOP, weight-memory and KV-cache accounting.

Everything is derived from one tensor inventory per config, so a trimmed
config (or a plan applied to one) is costed by the same code path.
Conventions: one multiply-add is 2 FLOPs; norms, softmax and activations are
not counted; attention scores and value mixing add ``4 * seq^2 * d_attn`` per
block; GB figures are GiB (2**30 bytes).
"""

from __future__ import annotations

import math
import re
from dataclasses import asdict, dataclass

from moetrim.engine import ModelConfig
from moetrim.errors import ArgumentError
from moetrim.trimming import DropPlan

GIB = 2**30
TENSOR_CLASSES = ("embedding", "attention", "router", "ffn", "norm")

PRESETS: dict[str, ModelConfig] = {
    "mixtral-8x7b": ModelConfig(
        n_layers=32, d_model=4096, n_heads=32, n_kv_heads=8, head_dim=128, d_expert=14336,
        n_experts=8, top_k=2, vocab_size=32000, max_seq=32768, norm_eps=1e-5,
        learned_positions=False, name="mixtral-8x7b",
    ),
    "deepseek-moe-16b": ModelConfig(
        n_layers=28, d_model=2048, n_heads=16, n_kv_heads=16, head_dim=128, d_expert=1408,
        n_experts=64, top_k=6, n_shared_experts=2, d_shared=1408, dense_layers=(0,), d_dense=10944,
        vocab_size=102400, max_seq=4096, learned_positions=False, name="deepseek-moe-16b",
    ),
    "mistral-7b": ModelConfig(
        n_layers=32, d_model=4096, n_heads=32, n_kv_heads=8, head_dim=128, d_expert=14336,
        n_experts=1, top_k=1, dense_layers=tuple(range(32)), d_dense=14336, vocab_size=32000,
        max_seq=32768, norm_eps=1e-5, learned_positions=False, name="mistral-7b",
    ),
}

# Quantization group sizes used for the 4-bit rows of each preset.
PRESET_GROUP_SIZE = {"mixtral-8x7b": 128, "deepseek-moe-16b": 64, "mistral-7b": 128}


def preset(name: str) -> ModelConfig:
    key = name.lower()
    if key not in PRESETS:
        raise ArgumentError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[key]


@dataclass(frozen=True)
class TensorSpec:
    name: str
    cls: str
    rows: int
    cols: int
    count: int  # materialised instances
    active: int  # instances touched per token
    matmul: bool = True  # False for lookups and norm gains
    layer: int | None = None

    @property
    def size(self) -> int:
        return self.rows * self.cols


def tensor_inventory(config: ModelConfig) -> list[TensorSpec]:
    d = config.d_model
    inv = [TensorSpec("embed", "embedding", config.vocab_size, d, 1, 1, matmul=False)]
    if config.learned_positions:
        inv.append(TensorSpec("pos_embed", "embedding", config.max_seq, d, 1, 1, matmul=False))
    for l in range(config.n_layers):
        inv.append(TensorSpec("attn_norm", "norm", 1, d, 1, 1, matmul=False, layer=l))
        inv += [
            TensorSpec("wq", "attention", config.d_attn, d, 1, 1, layer=l),
            TensorSpec("wk", "attention", config.d_kv, d, 1, 1, layer=l),
            TensorSpec("wv", "attention", config.d_kv, d, 1, 1, layer=l),
            TensorSpec("wo", "attention", d, config.d_attn, 1, 1, layer=l),
        ]
        kind = config.layer_kind(l)
        if kind == "none":
            continue
        inv.append(TensorSpec("ffn_norm", "norm", 1, d, 1, 1, matmul=False, layer=l))
        if kind == "dense":
            inv += _ffn_specs("dense", config.d_dense, d, 1, 1, l)
            continue
        n = config.experts_in_layer(l)
        inv.append(TensorSpec("router", "router", n, d, 1, 1, layer=l))
        inv += _ffn_specs("expert", config.d_expert, d, n, min(config.top_k, n), l)
        if config.n_shared_experts:
            inv += _ffn_specs("shared", config.d_shared, d, config.n_shared_experts, config.n_shared_experts, l)
    inv.append(TensorSpec("final_norm", "norm", 1, d, 1, 1, matmul=False))
    # Tied output projection costs FLOPs but no extra parameters.
    inv.append(TensorSpec("unembed", "embedding", config.vocab_size, d, 0 if config.tie_embeddings else 1, 1))
    return inv


def _ffn_specs(prefix: str, d_ff: int, d: int, count: int, active: int, layer: int) -> list[TensorSpec]:
    return [
        TensorSpec(f"{prefix}.w_gate", "ffn", d_ff, d, count, active, layer=layer),
        TensorSpec(f"{prefix}.w_up", "ffn", d_ff, d, count, active, layer=layer),
        TensorSpec(f"{prefix}.w_down", "ffn", d, d_ff, count, active, layer=layer),
    ]


def _resolve(config: ModelConfig, plan: DropPlan | None) -> ModelConfig:
    return plan.apply_to_config(config) if plan is not None else config


def count_params(config: ModelConfig, plan: DropPlan | None = None) -> tuple[int, int]:
    """``(total, active_per_token)``; active counts shared plus top-k routed
    experts and every non-expert tensor."""
    config = _resolve(config, plan)
    inv = tensor_inventory(config)
    total = sum(t.size * t.count for t in inv)
    active = sum(t.size * min(t.active, t.count) for t in inv)
    return total, active


def param_breakdown(config: ModelConfig, plan: DropPlan | None = None) -> dict[str, int]:
    config = _resolve(config, plan)
    out = dict.fromkeys(TENSOR_CLASSES, 0)
    for t in tensor_inventory(config):
        out[t.cls] += t.size * t.count
    return out


def attention_score_flops(config: ModelConfig, seq: int) -> int:
    return 4 * seq * seq * config.d_attn


def flops_forward(config: ModelConfig, seq: int = 2048, plan: DropPlan | None = None) -> int:
    """Forward-pass FLOPs for one sequence of ``seq`` tokens."""
    if seq < 1:
        raise ArgumentError("seq must be >= 1")
    config = _resolve(config, plan)
    matmul = sum(t.size * t.active for t in tensor_inventory(config) if t.matmul)
    return 2 * seq * matmul + config.n_layers * attention_score_flops(config, seq)


def layer_flops(config: ModelConfig, layer: int, seq: int, unit: str = "block") -> int:
    """FLOPs of one block's ``"ffn"`` (Norm+FFN pair) or whole ``"block"``."""
    specs = [t for t in tensor_inventory(config) if t.layer == layer and t.matmul]
    if unit == "ffn":
        specs = [t for t in specs if t.cls in ("ffn", "router")]
        return 2 * seq * sum(t.size * t.active for t in specs)
    if unit == "block":
        return 2 * seq * sum(t.size * t.active for t in specs) + attention_score_flops(config, seq)
    raise ArgumentError(f"unknown unit {unit!r}")


def weight_memory(config: ModelConfig, bits_map: dict[str, int] | None = None, group_size: int = 128,
                  plan: DropPlan | None = None) -> int:
    """Weight storage in bytes.

    ``bits_map`` maps tensor classes (embedding, attention, router, ffn, norm)
    to bit-widths, 16 by default. Classes stored below 16 bits add a 16-bit
    scale and a 16-bit zero point per group of ``group_size`` inputs.
    """
    config = _resolve(config, plan)
    bits_map = bits_map or {}
    unknown = set(bits_map) - set(TENSOR_CLASSES)
    if unknown:
        raise ArgumentError(f"unknown tensor classes {sorted(unknown)}")
    total_bits = 0
    for t in tensor_inventory(config):
        bits = bits_map.get(t.cls, 16)
        total_bits += t.size * t.count * bits
        if bits < 16:
            total_bits += t.count * t.rows * math.ceil(t.cols / group_size) * 32
    return total_bits // 8


def kv_cache_bytes(config: ModelConfig, batch: int = 1, seq: int = 2048, bytes_per_elem: int = 2,
                   plan: DropPlan | None = None) -> int:
    if batch < 1 or seq < 1:
        raise ArgumentError("batch and seq must be >= 1")
    config = _resolve(config, plan)
    return 2 * config.n_layers * config.n_kv_heads * config.head_dim * seq * batch * bytes_per_elem


_SCENARIO = re.compile(r"^([ELB])(\d+)/(\d+)$")


def scenario_plan(config: ModelConfig, spec: str) -> DropPlan:
    """Structural plan from shorthand such as ``E2/8``.

    ``E2/8`` keeps ``8-2`` experts in every MoE layer, ``L8/32`` removes the
    Norm+MoE pairs of the last 8 MoE layers, ``B5/32`` removes the last 5
    blocks. Which units go does not change any analytic total.
    """
    m = _SCENARIO.match(spec.strip().upper())
    if not m:
        raise ArgumentError(f"bad scenario {spec!r}; expected e.g. E2/8, L8/32 or B5/32")
    kind, n, of = m.group(1), int(m.group(2)), int(m.group(3))
    origins = config.origins()
    if kind == "E":
        if of != config.n_experts:
            raise ArgumentError(f"{spec}: model has {config.n_experts} experts per layer")
        keep = {origins[l]: tuple(range(of - n)) for l in config.moe_layers()}
        return DropPlan("expert", keep, provenance={"scenario": spec})
    if of != config.n_layers:
        raise ArgumentError(f"{spec}: model has {config.n_layers} layers")
    if kind == "L":
        layers = config.moe_layers()
        return DropPlan("layer", removed=tuple(origins[l] for l in layers[len(layers) - n :]),
                        provenance={"scenario": spec})
    return DropPlan("block", removed=tuple(origins[config.n_layers - n :]), provenance={"scenario": spec})


@dataclass
class CostReport:
    name: str
    total_params: int
    active_params: int
    flops_forward: int
    seq: int
    weight_bytes: int
    kv_cache_bytes: int
    batch: int
    kv_bytes_per_elem: int
    bits_map: dict
    flops_ratio: float = 1.0

    @property
    def weight_gib(self) -> float:
        return self.weight_bytes / GIB

    @property
    def kv_cache_gib(self) -> float:
        return self.kv_cache_bytes / GIB

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weight_gib"] = self.weight_gib
        d["kv_cache_gib"] = self.kv_cache_gib
        return d


def cost_report(config: ModelConfig, seq: int = 2048, plan: DropPlan | None = None,
                bits_map: dict | None = None, group_size: int = 128, batch: int = 1,
                kv_bytes_per_elem: int = 2, name: str | None = None,
                baseline: ModelConfig | None = None) -> CostReport:
    total, active = count_params(config, plan)
    flops = flops_forward(config, seq, plan)
    ratio = flops / flops_forward(baseline, seq) if baseline is not None else 1.0
    return CostReport(
        name=name or config.name,
        total_params=total,
        active_params=active,
        flops_forward=flops,
        seq=seq,
        weight_bytes=weight_memory(config, bits_map, group_size, plan),
        kv_cache_bytes=kv_cache_bytes(config, batch, seq, kv_bytes_per_elem, plan),
        batch=batch,
        kv_bytes_per_elem=kv_bytes_per_elem,
        bits_map=dict(bits_map or {}),
        flops_ratio=ratio,
    )


PRESET_SCENARIOS = {
    "mixtral-8x7b": ("E2/8", "L8/32", "B5/32"),
    "deepseek-moe-16b": ("E16/64", "L4/28", "B4/28"),
    "mistral-7b": ("B4/32",),
}


def scenario_reports(name: str, seq: int = 2048, batch: int = 1, bits: int = 4) -> list[CostReport]:
    """Baseline plus each trimming scenario, at 16 bits and with ``bits``-bit
    FFN and attention weights."""
    cfg = preset(name)
    gs = PRESET_GROUP_SIZE[cfg.name]
    quant = {"ffn": bits, "attention": bits}
    rows = []
    for label, plan in [("Baseline", None)] + [(f"+ {s}", scenario_plan(cfg, s)) for s in PRESET_SCENARIOS[cfg.name]]:
        rows.append(cost_report(cfg, seq, plan, None, gs, batch, name=label, baseline=cfg))
        rows.append(cost_report(cfg, seq, plan, quant, gs, batch, name=f"{label} w/{bits}-bit", baseline=cfg))
    return rows


def _fmt_count(x: float) -> str:
    for unit, div in (("T", 1e12), ("B", 1e9), ("M", 1e6), ("K", 1e3)):
        if abs(x) >= div:
            return f"{x / div:.1f}{unit}"
    return f"{x:.0f}"


def format_table(reports: list[CostReport]) -> str:
    """Aligned text table: Method, FLOPs ratio, FLOPs, Memory, params, KV-cache."""
    header = ["Method", "FLOPs ratio", "FLOPs", "Memory", "Params", "Active", "KV-cache"]
    rows = [header]
    for r in reports:
        rows.append([
            r.name,
            f"{r.flops_ratio:.3f}x",
            _fmt_count(r.flops_forward).replace("B", "G"),
            f"{r.weight_gib:.1f}GB",
            _fmt_count(r.total_params),
            _fmt_count(r.active_params),
            f"{r.kv_cache_gib:.2f}GB",
        ])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = []
    for j, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)
