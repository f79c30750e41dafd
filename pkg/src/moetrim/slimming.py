"""Within-expert compression: pruning masks and group-wise weight quantization.

Weights are ``[out, in]``; pruning comparison groups and quantization groups
both run along the input dimension of each output row.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from moetrim.engine import Attention, Expert, MoEModel, MoELayer, TraceSet
from moetrim.errors import ArgumentError, MoETrimError
from moetrim.tensor import DTYPE, topk_indices

SCALE_FLOOR = 1e-8
PRUNE_METHODS = ("magnitude", "wanda", "sparsegpt")
QUANT_METHODS = ("rtn", "awq", "gptq")


class MethodNotImplemented(MoETrimError, NotImplementedError):
    kind = "not_implemented"


@dataclass
class PruneMask:
    mask: np.ndarray  # bool, True = keep
    pattern: str  # "unstructured:0.5" or "2:4"

    def apply(self, w: np.ndarray) -> np.ndarray:
        return np.where(self.mask, w, DTYPE(0)).astype(DTYPE)

    @property
    def sparsity(self) -> float:
        return 1.0 - float(self.mask.mean())


def prune_scores(w: np.ndarray, metric: str = "magnitude", act_norms: np.ndarray | None = None) -> np.ndarray:
    """``|W|`` or, for Wanda, ``|W_ij| * ||X_j||_2``."""
    score = np.abs(w.astype(np.float64))
    if metric == "magnitude":
        return score
    if metric == "wanda":
        if act_norms is None or act_norms.shape != (w.shape[1],):
            raise ArgumentError(f"wanda needs one activation norm per input channel ({w.shape[1]})")
        return score * np.asarray(act_norms, dtype=np.float64)[None, :]
    raise ArgumentError(f"unknown pruning metric {metric!r}")


def prune(w: np.ndarray, metric: str = "magnitude", sparsity: float | None = 0.5, n: int | None = None,
          m: int | None = None, act_norms: np.ndarray | None = None) -> PruneMask:
    """Build a mask zeroing the lowest-scoring weights.

    Unstructured: each output row loses ``floor(sparsity * in)`` weights.
    N:M (``n`` and ``m`` given): every contiguous group of ``m`` inputs keeps
    its ``n`` best. Equal scores keep the lower index.
    """
    if w.ndim != 2:
        raise ArgumentError("prune expects a 2-D weight")
    score = prune_scores(w, metric, act_norms)
    rows, cols = w.shape
    if n is not None or m is not None:
        if n is None or m is None or m < 1 or not 0 <= n <= m:
            raise ArgumentError(f"invalid N:M pattern {n}:{m}")
        if cols % m:
            raise ArgumentError(f"input width {cols} is not a multiple of M={m}")
        grouped = score.reshape(rows, cols // m, m)
        keep = np.zeros(grouped.shape, dtype=bool)
        if n:
            np.put_along_axis(keep, np.argsort(-grouped, axis=-1, kind="stable")[..., :n], True, axis=-1)
        return PruneMask(keep.reshape(rows, cols), f"{n}:{m}")
    if sparsity is None or not 0.0 <= sparsity < 1.0:
        raise ArgumentError(f"sparsity must lie in [0, 1), got {sparsity}")
    n_zero = int(math.floor(sparsity * cols))
    keep = np.ones((rows, cols), dtype=bool)
    if n_zero:
        # Reverse so that among equal scores the higher index is dropped first.
        order = np.argsort(score[:, ::-1], axis=1, kind="stable")[:, :n_zero]
        np.put_along_axis(keep, cols - 1 - order, False, axis=1)
    return PruneMask(keep, f"unstructured:{sparsity:g}")


@dataclass
class QuantizedTensor:
    """Asymmetric group-wise integer encoding of a ``[out, in]`` weight.

    ``scales`` and ``zeros`` are ``[out, n_groups]`` float16. When
    ``channel_scale`` is present the encoded matrix is ``W * channel_scale``
    and dequantization divides it back out.
    """

    codes: np.ndarray  # uint8 [out, in]
    scales: np.ndarray  # float16 [out, n_groups]
    zeros: np.ndarray  # float16 [out, n_groups]
    bits: int
    group_size: int
    channel_scale: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.codes.shape)

    def group_bounds(self):
        cols = self.codes.shape[1]
        return [(s, min(s + self.group_size, cols)) for s in range(0, cols, self.group_size)]

    def dequantize(self) -> np.ndarray:
        out = np.empty(self.codes.shape, dtype=DTYPE)
        for g, (a, b) in enumerate(self.group_bounds()):
            scale = self.scales[:, g : g + 1].astype(DTYPE)
            zero = self.zeros[:, g : g + 1].astype(DTYPE)
            out[:, a:b] = (self.codes[:, a:b].astype(DTYPE) - zero) * scale
        if self.channel_scale is not None:
            out = out / self.channel_scale.astype(DTYPE)[None, :]
        return out

    def scale_per_element(self) -> np.ndarray:
        out = np.empty(self.codes.shape, dtype=DTYPE)
        for g, (a, b) in enumerate(self.group_bounds()):
            out[:, a:b] = self.scales[:, g : g + 1].astype(DTYPE)
        return out


def _f16_ceil(x: np.ndarray) -> np.ndarray:
    """Smallest float16 >= x, elementwise."""
    h = x.astype(np.float16)
    low = h.astype(np.float64) < x
    h[low] = np.nextafter(h[low], np.float16(np.inf))
    return h


def quantize_rtn(w: np.ndarray, bits: int = 4, group_size: int = 128) -> QuantizedTensor:
    """Round-to-nearest asymmetric quantization per group of ``group_size`` inputs.

    ``scale = (max - min) / (2^b - 1)`` rounded up to float16, with the group
    range widened to contain 0 so the integer zero point is a valid code.
    A trailing group narrower than ``group_size`` is quantized on its own.
    A constant group ``c`` is stored as scale ``|c|`` with one code step, so it
    dequantizes to ``c`` whenever ``c`` is representable in float16.
    """
    if bits not in (2, 3, 4, 8):
        raise ArgumentError(f"bits must be one of 2, 3, 4, 8; got {bits}")
    if group_size < 1:
        raise ArgumentError("group_size must be >= 1")
    if w.ndim != 2:
        raise ArgumentError("quantize_rtn expects a 2-D weight")
    qmax = 2**bits - 1
    w64 = w.astype(np.float64)
    rows, cols = w.shape
    n_groups = -(-cols // group_size)
    codes = np.empty((rows, cols), dtype=np.uint8)
    scales = np.empty((rows, n_groups), dtype=np.float16)
    zeros = np.empty((rows, n_groups), dtype=np.float16)
    for g, a in enumerate(range(0, cols, group_size)):
        blk = w64[:, a : a + group_size]
        lo, hi = blk.min(axis=1), blk.max(axis=1)
        lo_z, hi_z = np.minimum(lo, 0.0), np.maximum(hi, 0.0)
        scale = _f16_ceil(np.maximum((hi_z - lo_z) / qmax, SCALE_FLOOR))
        # Constant non-zero groups: one code step of size |c| (if float16 can hold it).
        cval = np.abs(lo).astype(np.float16)
        const = (lo == hi) & (lo != 0) & (cval > 0)
        scale = np.where(const, cval, scale)
        if not np.all(np.isfinite(scale)):
            raise ArgumentError("weight range too large for float16 scales")
        s = scale.astype(np.float64)[:, None]
        zero = np.where(const, (lo < 0).astype(np.float64), np.round(-lo_z / scale.astype(np.float64)))
        q = np.clip(np.round(blk / s) + zero[:, None], 0, qmax)
        codes[:, a : a + group_size] = q.astype(np.uint8)
        scales[:, g] = scale
        zeros[:, g] = zero.astype(np.float16)
    return QuantizedTensor(codes, scales, zeros, bits, group_size)


@dataclass
class AWQResult:
    scales: np.ndarray  # per input channel
    alpha: float
    loss: float
    losses: list[float]
    quantized: QuantizedTensor


def _output_loss(x: np.ndarray, w: np.ndarray, w_hat: np.ndarray) -> float:
    diff = x.astype(np.float64) @ (w.astype(np.float64) - w_hat.astype(np.float64)).T
    return float(np.mean(diff * diff))


def awq_candidate(w: np.ndarray, act_stats: np.ndarray, alpha: float, bits: int, group_size: int) -> QuantizedTensor:
    """Quantize ``W * s`` with ``s = act_stats ** alpha`` (geometrically centred)."""
    s = np.power(np.maximum(act_stats.astype(np.float64), 1e-4), alpha)
    s = s / math.sqrt(s.max() * s.min())
    s32 = s.astype(DTYPE)
    qt = quantize_rtn((w * s32[None, :]).astype(DTYPE), bits, group_size)
    if alpha != 0.0:
        qt.channel_scale = s32
    return qt


def awq_scale_search(w: np.ndarray, x: np.ndarray, bits: int = 4, group_size: int = 128, grid: int = 20,
                     act_stats: np.ndarray | None = None) -> AWQResult:
    """Grid search of the activation-aware scaling exponent.

    Tries ``alpha`` in ``{0, 1/grid, ..., (grid-1)/grid}`` and keeps the one
    minimising the mean squared output error on ``x``; ``alpha = 0`` is plain
    RTN, so the result never does worse than RTN on ``x``.
    """
    if grid < 1:
        raise ArgumentError("grid must be >= 1")
    if act_stats is None:
        act_stats = np.mean(np.abs(x.astype(np.float64)), axis=0) if x.size else np.zeros(w.shape[1])
    alphas = [i / grid for i in range(grid)]
    if not np.any(act_stats > 0):
        alphas = [0.0]
    best, losses = None, []
    for alpha in alphas:
        qt = awq_candidate(w, act_stats, alpha, bits, group_size)
        loss = _output_loss(x, w, qt.dequantize()) if x.size else 0.0
        losses.append(loss)
        if best is None or loss < best[1]:
            best = (alpha, loss, qt)
    alpha, loss, qt = best
    scales = qt.channel_scale if qt.channel_scale is not None else np.ones(w.shape[1], dtype=DTYPE)
    return AWQResult(scales, alpha, loss, losses, qt)


@dataclass
class SlimRecipe:
    method: str = "rtn"
    sparsity: float = 0.5
    n: int | None = None
    m: int | None = None
    bits: int = 4
    group_size: int = 128
    grid: int = 20
    exclude_shared: bool = False
    include_attention: bool = False
    max_rows: int = 1024

    def __post_init__(self):
        if self.method not in PRUNE_METHODS + QUANT_METHODS:
            raise ArgumentError(f"unknown slimming method {self.method!r}")

    @property
    def is_quant(self) -> bool:
        return self.method in QUANT_METHODS

    @property
    def needs_traces(self) -> bool:
        return self.method in ("wanda", "awq")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SlimRecipe":
        return cls(**d)

    def bits_map(self) -> dict:
        """Storage bit-widths for the cost model."""
        if not self.is_quant:
            return {}
        out = {"ffn": self.bits}
        if self.include_attention:
            out["attention"] = self.bits
        return out


@dataclass
class _Target:
    owner: Expert | Attention
    weight: str
    inputs: np.ndarray | None = field(default=None, repr=False)


def _routed_rows(probs: np.ndarray, k: int) -> np.ndarray:
    flat = probs.reshape(-1, probs.shape[-1])
    idx = topk_indices(flat, min(k, flat.shape[1]))
    sel = np.zeros(flat.shape, dtype=bool)
    np.put_along_axis(sel, idx, True, axis=1)
    return sel


def _flat(a: np.ndarray) -> np.ndarray:
    return a.reshape(-1, a.shape[-1])


def collect_targets(model: MoEModel, traces: TraceSet | None, exclude_shared: bool = False,
                    include_attention: bool = False) -> list[_Target]:
    """Every weight slated for slimming, with its calibration inputs when
    ``traces`` is given. A routed expert sees the tokens routed to it (all
    tokens if none were)."""
    if traces is not None and traces.n_layers != len(model.blocks):
        raise ArgumentError("traces were captured on a different model structure")
    cfg = model.config
    targets = []

    def add_expert(e: Expert, x: np.ndarray | None):
        hidden = e.hidden(x) if x is not None else None
        targets.append(_Target(e, "w_gate", x))
        targets.append(_Target(e, "w_up", x))
        targets.append(_Target(e, "w_down", hidden))

    for l, b in enumerate(model.blocks):
        if include_attention:
            a_in = _flat(traces.attn_norm_output[l]) if traces is not None else None
            ctx = _flat(traces.attn_context[l]) if traces is not None else None
            for w in ("wq", "wk", "wv"):
                targets.append(_Target(b.attn, w, a_in))
            targets.append(_Target(b.attn, "wo", ctx))
        if b.ffn is None:
            continue
        f_in = _flat(traces.moe_norm_output[l]) if traces is not None else None
        if isinstance(b.ffn, MoELayer):
            sel = _routed_rows(traces.router_probs[l], cfg.top_k) if traces is not None else None
            for i, e in enumerate(b.ffn.experts):
                x = None
                if f_in is not None:
                    rows = np.flatnonzero(sel[:, i])
                    x = f_in[rows] if rows.size else f_in
                add_expert(e, x)
            if not exclude_shared:
                for e in b.ffn.shared:
                    add_expert(e, f_in)
        else:
            add_expert(b.ffn, f_in)
    return targets


def _subsample(x: np.ndarray, max_rows: int) -> np.ndarray:
    if x.shape[0] <= max_rows:
        return x
    idx = np.linspace(0, x.shape[0] - 1, max_rows).round().astype(np.int64)
    return x[idx]


def slim_model(model: MoEModel, recipe: SlimRecipe, traces: TraceSet | None = None) -> MoEModel:
    """Return a copy of ``model`` with ``recipe`` applied to every expert weight
    (and attention projections when ``include_attention``). Shared experts are
    skipped under ``exclude_shared``. Routers, norms and embeddings are never
    touched. Quantized weights are held dequantized; the encoding is kept in
    the owner's ``quant`` dict."""
    if recipe.method in ("sparsegpt", "gptq"):
        raise MethodNotImplemented(f"{recipe.method} is not implemented; use "
                                   f"{'wanda/magnitude' if recipe.method == 'sparsegpt' else 'rtn/awq'}")
    if recipe.needs_traces and traces is None:
        raise ArgumentError(f"{recipe.method} needs calibration traces")
    out = copy.deepcopy(model)
    targets = collect_targets(out, traces if recipe.needs_traces else None,
                              recipe.exclude_shared, recipe.include_attention)
    for t in targets:
        w = getattr(t.owner, t.weight)
        if recipe.method in ("magnitude", "wanda"):
            norms = None
            if recipe.method == "wanda":
                norms = np.sqrt(np.sum(np.square(t.inputs.astype(np.float64)), axis=0))
            mask = prune(w, recipe.method, recipe.sparsity, recipe.n, recipe.m, norms)
            setattr(t.owner, t.weight, mask.apply(w))
            t.owner.quant.pop(t.weight, None)
        elif recipe.method == "rtn":
            qt = quantize_rtn(w, recipe.bits, recipe.group_size)
            t.owner.quant[t.weight] = qt
            setattr(t.owner, t.weight, qt.dequantize())
        else:
            res = awq_scale_search(w, _subsample(t.inputs, recipe.max_rows), recipe.bits, recipe.group_size,
                                   recipe.grid, act_stats=np.mean(np.abs(t.inputs.astype(np.float64)), axis=0))
            t.owner.quant[t.weight] = res.quantized
            setattr(t.owner, t.weight, res.quantized.dequantize())
    return out
