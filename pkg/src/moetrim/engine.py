"""Executable toy MoE transformer.

Pre-norm decoder blocks with causal grouped-query attention, learned absolute
positions and either a routed MoE layer (optionally with shared experts) or a
dense SwiGLU FFN. All weights are float32 and stored ``[out, in]``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from moetrim.errors import ArgumentError, InputError, ShapeError, StructuralError
from moetrim.tensor import DTYPE, as_tensor, linear, matmul, rms_norm, silu, softmax, topk_indices


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    d_expert: int
    n_experts: int
    top_k: int
    vocab_size: int
    max_seq: int
    n_shared_experts: int = 0
    d_shared: int = 0
    dense_layers: tuple[int, ...] = ()
    d_dense: int = 0
    norm_eps: float = 1e-6
    # TopK-then-softmax renormalisation of the selected probabilities (off: literal softmax-then-TopK).
    renormalize_topk: bool = False
    learned_positions: bool = True
    tie_embeddings: bool = False
    # Trimming state; indices are in current (post-surgery) coordinates.
    expert_counts: tuple[int, ...] | None = None
    ffn_removed: tuple[int, ...] = ()
    layer_origins: tuple[int, ...] | None = None
    # Layer count of the untrimmed model once blocks have been removed.
    source_layers: int | None = None
    name: str = "toy"

    def __post_init__(self):
        for f in ("dense_layers", "ffn_removed"):
            object.__setattr__(self, f, tuple(int(i) for i in getattr(self, f)))
        for f in ("expert_counts", "layer_origins"):
            v = getattr(self, f)
            if v is not None:
                object.__setattr__(self, f, tuple(int(i) for i in v))
        self.validate()

    def validate(self) -> None:
        if self.n_layers < 0 or self.d_model < 1 or self.vocab_size < 1 or self.max_seq < 1:
            raise ArgumentError("n_layers, d_model, vocab_size and max_seq must be positive")
        if not 1 <= self.top_k <= self.n_experts:
            raise ArgumentError(f"need 1 <= top_k <= n_experts, got k={self.top_k}, n={self.n_experts}")
        if self.n_kv_heads < 1 or self.n_heads % self.n_kv_heads:
            raise ArgumentError("n_heads must be divisible by n_kv_heads")
        if self.head_dim * self.n_heads != self.d_model:
            raise ArgumentError("head_dim * n_heads must equal d_model")
        layers = range(self.n_layers)
        if not set(self.dense_layers) <= set(layers) or not set(self.ffn_removed) <= set(layers):
            raise ArgumentError("layer index sets must lie inside [0, n_layers)")
        if self.dense_layers and self.d_dense < 1:
            raise ArgumentError("dense_layers requires d_dense >= 1")
        if self.n_shared_experts and self.d_shared < 1:
            raise ArgumentError("shared experts require d_shared >= 1")
        if self.expert_counts is not None and len(self.expert_counts) != self.n_layers:
            raise ArgumentError("expert_counts must have one entry per layer")
        if self.layer_origins is not None and len(self.layer_origins) != self.n_layers:
            raise ArgumentError("layer_origins must have one entry per layer")
        if self.source_layers is not None and self.source_layers < self.n_layers:
            raise ArgumentError("source_layers cannot be smaller than n_layers")

    @property
    def d_attn(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def d_kv(self) -> int:
        return self.n_kv_heads * self.head_dim

    def layer_kind(self, layer: int) -> str:
        """``"moe"``, ``"dense"`` or ``"none"`` (Norm+FFN removed)."""
        if layer in self.ffn_removed:
            return "none"
        if layer in self.dense_layers:
            return "dense"
        return "moe"

    def experts_in_layer(self, layer: int) -> int:
        if self.layer_kind(layer) != "moe":
            return 0
        if self.expert_counts is None:
            return self.n_experts
        return self.expert_counts[layer]

    def origins(self) -> tuple[int, ...]:
        return self.layer_origins if self.layer_origins is not None else tuple(range(self.n_layers))

    @property
    def original_layers(self) -> int:
        return self.source_layers if self.source_layers is not None else self.n_layers

    def moe_layers(self) -> list[int]:
        return [l for l in range(self.n_layers) if self.layer_kind(l) == "moe"]

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key, val in d.items():
            if isinstance(val, tuple):
                d[key] = list(val)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def toy_config(**overrides) -> ModelConfig:
    """Default toy model: L=8, d=64, n=8, k=2, vocab 256."""
    base = dict(
        n_layers=8, d_model=64, n_heads=4, n_kv_heads=2, head_dim=16, d_expert=128,
        n_experts=8, top_k=2, vocab_size=256, max_seq=128,
    )
    base.update(overrides)
    return ModelConfig(**base)


def toy_shared_config(**overrides) -> ModelConfig:
    """DeepSeek-shaped toy: dense first block, 2 shared experts, 16 routed."""
    base = dict(
        n_layers=6, d_model=64, n_heads=4, n_kv_heads=4, head_dim=16, d_expert=32,
        n_experts=16, top_k=4, n_shared_experts=2, d_shared=32, dense_layers=(0,), d_dense=128,
        vocab_size=256, max_seq=128, name="toy-shared",
    )
    base.update(overrides)
    return ModelConfig(**base)


@dataclass
class Expert:
    """SwiGLU FFN: ``w_down @ (silu(w_gate @ x) * (w_up @ x))``."""

    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    # name -> QuantizedTensor for weights currently held in dequantized form
    quant: dict[str, Any] = field(default_factory=dict)

    WEIGHTS = ("w_gate", "w_up", "w_down")

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return linear(self.hidden(x), self.w_down)

    def hidden(self, x: np.ndarray) -> np.ndarray:
        return silu(linear(x, self.w_gate)) * linear(x, self.w_up)


@dataclass
class MoELayer:
    router: np.ndarray
    experts: list[Expert]
    shared: list[Expert] = field(default_factory=list)
    origins: np.ndarray | None = None
    # Strict-mask routing: softmax over ``full_router`` rows, then keep ``keep_rows``.
    full_router: np.ndarray | None = None
    keep_rows: np.ndarray | None = None

    def __post_init__(self):
        if self.origins is None:
            self.origins = np.arange(len(self.experts), dtype=np.int64)

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def route(self, x: np.ndarray) -> np.ndarray:
        """Routing probabilities ``[tokens, n_surviving]``."""
        if self.full_router is not None:
            return softmax(linear(x, self.full_router))[:, self.keep_rows]
        return softmax(linear(x, self.router))


@dataclass
class Attention:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    quant: dict[str, Any] = field(default_factory=dict)

    WEIGHTS = ("wq", "wk", "wv", "wo")


@dataclass
class Block:
    attn_norm: np.ndarray
    attn: Attention
    ffn_norm: np.ndarray | None
    ffn: MoELayer | Expert | None
    origin: int = 0


@dataclass
class MoEModel:
    config: ModelConfig
    embed: np.ndarray
    pos_embed: np.ndarray | None
    blocks: list[Block]
    final_norm: np.ndarray
    unembed: np.ndarray

    def sync_config(self) -> None:
        """Rebuild the structural fields of ``config`` from the block list."""
        cfg = self.config
        dense, removed, counts = [], [], []
        for i, b in enumerate(self.blocks):
            if b.ffn is None:
                removed.append(i)
                counts.append(0)
            elif isinstance(b.ffn, MoELayer):
                counts.append(b.ffn.n_experts)
            else:
                dense.append(i)
                counts.append(0)
        uniform = all(c == cfg.n_experts for i, c in enumerate(counts) if i not in dense and i not in removed)
        origins = tuple(b.origin for b in self.blocks)
        identity = origins == tuple(range(len(origins)))
        self.config = cfg.replace(
            n_layers=len(self.blocks),
            dense_layers=tuple(dense),
            ffn_removed=tuple(removed),
            expert_counts=None if uniform else tuple(counts),
            layer_origins=None if identity else origins,
            source_layers=None if identity and len(origins) == cfg.original_layers else cfg.original_layers,
        )


class KVCache:
    """Per-block key/value buffers for incremental decoding."""

    def __init__(self, n_blocks: int):
        self.keys: list[np.ndarray | None] = [None] * n_blocks
        self.values: list[np.ndarray | None] = [None] * n_blocks
        self.length = 0

    def nbytes(self) -> int:
        return sum(a.nbytes for a in self.keys + self.values if a is not None)


def moe_forward(layer: MoELayer, x: np.ndarray, k: int, renormalize: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Batched routed-expert mixture over rows of ``x``.

    Softmax over every surviving expert first, then TopK on the probabilities;
    selected probabilities are used as-is unless ``renormalize``. With fewer
    survivors than ``k`` every survivor is used. Shared experts add with
    weight 1.
    """
    if layer.n_experts == 0:
        raise StructuralError("MoE layer has no experts left; drop the layer instead")
    probs = layer.route(x)
    k_eff = min(k, layer.n_experts)
    idx = topk_indices(probs, k_eff)
    selected = np.zeros(probs.shape, dtype=bool)
    np.put_along_axis(selected, idx, True, axis=1)
    weights = np.where(selected, probs, DTYPE(0))
    if renormalize:
        weights = weights / np.sum(weights, axis=1, keepdims=True, dtype=DTYPE)
    y = np.zeros(x.shape, dtype=DTYPE)
    for i, expert in enumerate(layer.experts):
        rows = np.flatnonzero(selected[:, i])
        if rows.size:
            y[rows] = y[rows] + weights[rows, i : i + 1] * expert(x[rows])
    for expert in layer.shared:
        y = y + expert(x)
    return y, probs


def moe_layer_forward(layer: MoELayer, x: np.ndarray, k: int, renormalize: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Single-token form of :func:`moe_forward`: returns ``(y[d], probs[n])``."""
    x = as_tensor(x)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got {x.shape}")
    y, probs = moe_forward(layer, x[None, :], k, renormalize)
    return y[0], probs[0]


def attention(attn: Attention, x: np.ndarray, cfg: ModelConfig, cache: KVCache | None = None,
              slot: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Causal grouped-query attention. Returns ``(output, per-head context)``."""
    t = x.shape[0]
    hd = cfg.head_dim
    q = linear(x, attn.wq).reshape(t, cfg.n_heads, hd)
    k = linear(x, attn.wk).reshape(t, cfg.n_kv_heads, hd)
    v = linear(x, attn.wv).reshape(t, cfg.n_kv_heads, hd)
    offset = 0
    if cache is not None:
        offset = cache.length
        if cache.keys[slot] is not None:
            k = np.concatenate([cache.keys[slot], k], axis=0)
            v = np.concatenate([cache.values[slot], v], axis=0)
        cache.keys[slot], cache.values[slot] = k, v
    s = k.shape[0]
    group = cfg.n_heads // cfg.n_kv_heads
    scale = DTYPE(1.0 / math.sqrt(hd))
    allowed = np.arange(s)[None, :] <= (offset + np.arange(t))[:, None]
    ctx = np.empty((t, cfg.n_heads, hd), dtype=DTYPE)
    for h in range(cfg.n_heads):
        kv = h // group
        scores = matmul(np.ascontiguousarray(q[:, h]), np.ascontiguousarray(k[:, kv].T)) * scale
        scores = np.where(allowed, scores, DTYPE(-np.inf))
        ctx[:, h] = matmul(softmax(scores), np.ascontiguousarray(v[:, kv]))
    ctx = ctx.reshape(t, cfg.d_attn)
    return linear(ctx, attn.wo), ctx


def block_forward(block: Block, h: np.ndarray, cfg: ModelConfig, cache: KVCache | None = None,
                  slot: int = 0, trace: dict | None = None) -> np.ndarray:
    """``x' = h + Attn(Norm(h))``; ``y' = x' + FFN(Norm(x'))``."""
    if h.shape[0] > cfg.max_seq:
        raise ShapeError(f"sequence length {h.shape[0]} exceeds max_seq {cfg.max_seq}")
    a_in = rms_norm(h, block.attn_norm, cfg.norm_eps)
    a_out, ctx = attention(block.attn, a_in, cfg, cache, slot)
    x1 = h + a_out
    probs = None
    if block.ffn is None:
        f_in = None
        f_out = np.zeros_like(x1)
        y = x1
    else:
        f_in = rms_norm(x1, block.ffn_norm, cfg.norm_eps)
        if isinstance(block.ffn, MoELayer):
            f_out, probs = moe_forward(block.ffn, f_in, cfg.top_k, cfg.renormalize_topk)
        else:
            f_out = block.ffn(f_in)
        y = x1 + f_out
    if trace is not None:
        trace["block_input"] = h
        trace["attn_norm_output"] = a_in
        trace["attn_context"] = ctx
        trace["moe_norm_input"] = x1
        trace["moe_norm_output"] = f_in if f_in is not None else np.zeros_like(x1)
        trace["moe_output"] = f_out
        trace["moe_residual_output"] = y
        trace["block_output"] = y
        trace["router_probs"] = probs
    return y


def model_forward(model: MoEModel, tokens, capture: bool = False,
                  cache: KVCache | None = None) -> tuple[np.ndarray, list[dict] | None]:
    """Embed, run every block, final norm and unembed.

    Returns ``(logits[seq, vocab], traces)``; ``traces`` is a per-layer list of
    captured tensors when ``capture`` is set, otherwise ``None``.
    """
    cfg = model.config
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size == 0:
        raise InputError("empty token sequence")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise InputError(f"token ids must lie in [0, {cfg.vocab_size})")
    offset = cache.length if cache is not None else 0
    if offset + tokens.size > cfg.max_seq:
        raise ShapeError(f"sequence length {offset + tokens.size} exceeds max_seq {cfg.max_seq}")
    h = model.embed[tokens]
    if model.pos_embed is not None:
        h = h + model.pos_embed[offset : offset + tokens.size]
    traces = [] if capture else None
    for slot, block in enumerate(model.blocks):
        rec = {} if capture else None
        h = block_forward(block, h, cfg, cache, slot, rec)
        if capture:
            traces.append(rec)
    if cache is not None:
        cache.length += tokens.size
    logits = linear(rms_norm(h, model.final_norm, cfg.norm_eps), model.unembed)
    return logits, traces


@dataclass
class TraceSet:
    """Hidden states captured over a calibration set.

    Every per-layer entry is ``[samples, tokens, width]``; ``router_probs[l]``
    is ``None`` for layers without a routed MoE.
    """

    block_input: list[np.ndarray]
    block_output: list[np.ndarray]
    attn_norm_output: list[np.ndarray]
    attn_context: list[np.ndarray]
    moe_norm_input: list[np.ndarray]
    moe_norm_output: list[np.ndarray]
    moe_output: list[np.ndarray]
    moe_residual_output: list[np.ndarray]
    router_probs: list[np.ndarray | None]
    layer_kinds: list[str]
    layer_origins: tuple[int, ...]

    FIELDS = ("block_input", "block_output", "attn_norm_output", "attn_context", "moe_norm_input",
              "moe_norm_output", "moe_output", "moe_residual_output")

    @property
    def n_layers(self) -> int:
        return len(self.block_input)

    @property
    def n_tokens(self) -> int:
        if not self.block_input:
            return 0
        s, t = self.block_input[0].shape[:2]
        return s * t


def capture_traces(model: MoEModel, samples) -> TraceSet:
    """Run ``model`` over each sequence in ``samples`` and stack the traces."""
    samples = list(samples)
    if not samples:
        raise InputError("no calibration samples")
    cfg = model.config
    per_sample = [model_forward(model, s, capture=True)[1] for s in samples]
    n_layers = len(model.blocks)
    fields: dict[str, list] = {}
    for name in TraceSet.FIELDS:
        fields[name] = [np.stack([rec[l][name] for rec in per_sample]) for l in range(n_layers)]
    probs = []
    for l in range(n_layers):
        p = per_sample[0][l]["router_probs"]
        probs.append(None if p is None else np.stack([rec[l]["router_probs"] for rec in per_sample]))
    return TraceSet(**fields, router_probs=probs,
                    layer_kinds=[cfg.layer_kind(l) for l in range(n_layers)],
                    layer_origins=cfg.origins())


def _expert(rng: np.random.Generator, d_model: int, d_ff: int, std: float) -> Expert:
    return Expert(
        w_gate=_normal(rng, (d_ff, d_model), std),
        w_up=_normal(rng, (d_ff, d_model), std),
        w_down=_normal(rng, (d_model, d_ff), std),
    )


def _normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(DTYPE)


def generate_random_model(config: ModelConfig, seed: int = 0, std: float | None = None) -> MoEModel:
    """Deterministic random weights.

    Default std is ``1 / sqrt(d_model * n_layers)``: the depth-scaled
    ``0.02 / sqrt(n_layers)`` rule with 0.02 replaced by ``1/sqrt(d_model)``,
    which coincides with it at ``d_model = 2500``. At toy widths the literal
    0.02 leaves the FFN contribution near 0.3% of the residual stream.
    """
    if (config.expert_counts is not None or config.ffn_removed or config.layer_origins is not None
            or config.source_layers is not None):
        raise ArgumentError("generate_random_model expects an untrimmed config")
    rng = np.random.default_rng(seed)
    std = 1.0 / math.sqrt(config.d_model * max(config.n_layers, 1)) if std is None else std
    d = config.d_model
    embed = _normal(rng, (config.vocab_size, d), std)
    pos = _normal(rng, (config.max_seq, d), std) if config.learned_positions else None
    blocks = []
    for l in range(config.n_layers):
        attn = Attention(
            wq=_normal(rng, (config.d_attn, d), std),
            wk=_normal(rng, (config.d_kv, d), std),
            wv=_normal(rng, (config.d_kv, d), std),
            wo=_normal(rng, (d, config.d_attn), std),
        )
        if l in config.dense_layers:
            ffn = _expert(rng, d, config.d_dense, std)
        else:
            router = _normal(rng, (config.n_experts, d), std)
            experts = [_expert(rng, d, config.d_expert, std) for _ in range(config.n_experts)]
            shared = [_expert(rng, d, config.d_shared, std) for _ in range(config.n_shared_experts)]
            ffn = MoELayer(router=router, experts=experts, shared=shared)
        blocks.append(Block(attn_norm=np.ones(d, DTYPE), attn=attn, ffn_norm=np.ones(d, DTYPE), ffn=ffn, origin=l))
    unembed = embed if config.tie_embeddings else _normal(rng, (config.vocab_size, d), std)
    return MoEModel(config=config, embed=embed, pos_embed=pos, blocks=blocks,
                    final_norm=np.ones(d, DTYPE), unembed=unembed)


def iter_tensors(model: MoEModel):
    """Yield ``(name, array, owner, attr)`` for every materialised tensor."""
    yield "embed", model.embed, model, "embed"
    if model.pos_embed is not None:
        yield "pos_embed", model.pos_embed, model, "pos_embed"
    for i, b in enumerate(model.blocks):
        p = f"blocks.{i}"
        yield f"{p}.attn_norm", b.attn_norm, b, "attn_norm"
        for w in Attention.WEIGHTS:
            yield f"{p}.attn.{w}", getattr(b.attn, w), b.attn, w
        if b.ffn is None:
            continue
        yield f"{p}.ffn_norm", b.ffn_norm, b, "ffn_norm"
        if isinstance(b.ffn, MoELayer):
            yield f"{p}.ffn.router", b.ffn.router, b.ffn, "router"
            if b.ffn.full_router is not None:
                yield f"{p}.ffn.full_router", b.ffn.full_router, b.ffn, "full_router"
            for group in ("experts", "shared"):
                for j, e in enumerate(getattr(b.ffn, group)):
                    for w in Expert.WEIGHTS:
                        yield f"{p}.ffn.{group}.{j}.{w}", getattr(e, w), e, w
        else:
            for w in Expert.WEIGHTS:
                yield f"{p}.ffn.{w}", getattr(b.ffn, w), b.ffn, w
    yield "final_norm", model.final_norm, model, "final_norm"
    if not model.config.tie_embeddings:
        yield "unembed", model.unembed, model, "unembed"
