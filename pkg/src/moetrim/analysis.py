"""Calibration data, trace capture and the three scoring signals.

* expert importance: mean routing probability per (layer, expert)
* layer similarity: cosine between MoE input/output and between the residual
  endpoints around the (Norm, MoE) pair
* block similarity: cosine between block input and block output
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from moetrim.engine import MoEModel, TraceSet, capture_traces
from moetrim.errors import ArgumentError, ComputationError, InputError
from moetrim.tensor import cosine_rows

CALIB_MAGIC = b"MOEC1"
DISTRIBUTIONS = ("uniform", "zipf", "repetitive")


@dataclass
class CalibrationSet:
    samples: np.ndarray  # [n_samples, seq_len] uint32
    seq_len: int
    source: str = "synthetic"

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.uint32)
        if self.samples.ndim != 2 or self.samples.shape[1] != self.seq_len:
            raise InputError(f"samples must be [n, {self.seq_len}], got {self.samples.shape}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    def check_vocab(self, vocab_size: int) -> None:
        if self.samples.size and int(self.samples.max()) >= vocab_size:
            raise InputError(f"calibration token id {int(self.samples.max())} >= vocab size {vocab_size}")

    def subset(self, n: int) -> "CalibrationSet":
        return CalibrationSet(self.samples[:n], self.seq_len, self.source)


def build_calibration(n_samples: int, seq_len: int, seed: int = 0, vocab_size: int = 256,
                      source=None, distribution: str = "uniform") -> CalibrationSet:
    """Deterministic calibration set.

    With ``source`` (a 1-D token stream) windows of ``seq_len`` are cut at
    seeded random offsets. Otherwise tokens are drawn from a synthetic
    ``distribution``: ``uniform``, ``zipf`` (rank-frequency skew) or
    ``repetitive`` (short seeded motifs tiled along the sequence); the last two
    stand in for differently distributed text corpora.
    """
    if n_samples < 1 or seq_len < 1:
        raise ArgumentError("n_samples and seq_len must be >= 1")
    rng = np.random.default_rng(seed)
    if source is not None:
        stream = np.asarray(source, dtype=np.int64).reshape(-1)
        if stream.size == 0:
            raise InputError("empty token source")
        if stream.size < seq_len:
            raise InputError(f"token source has {stream.size} ids, need at least {seq_len}")
        starts = rng.integers(0, stream.size - seq_len + 1, size=n_samples)
        samples = np.stack([stream[s : s + seq_len] for s in starts])
        tag = "stream"
    elif distribution == "uniform":
        samples = rng.integers(0, vocab_size, size=(n_samples, seq_len))
        tag = "synthetic:uniform"
    elif distribution == "zipf":
        ranks = np.arange(1, vocab_size + 1, dtype=np.float64)
        p = 1.0 / ranks
        perm = rng.permutation(vocab_size)
        samples = perm[rng.choice(vocab_size, size=(n_samples, seq_len), p=p / p.sum())]
        tag = "synthetic:zipf"
    elif distribution == "repetitive":
        motif_len = max(1, min(8, seq_len))
        motifs = rng.integers(0, vocab_size, size=(n_samples, motif_len))
        reps = -(-seq_len // motif_len)
        samples = np.tile(motifs, (1, reps))[:, :seq_len]
        tag = "synthetic:repetitive"
    else:
        raise ArgumentError(f"unknown distribution {distribution!r}; choose from {DISTRIBUTIONS}")
    return CalibrationSet(samples, seq_len, tag)


def save_calibration(calib: CalibrationSet, path) -> None:
    from moetrim.io import atomic_write_bytes

    n, t = calib.samples.shape
    payload = CALIB_MAGIC + struct.pack("<II", n, t) + calib.samples.astype("<u4").tobytes()
    atomic_write_bytes(Path(path), payload)


def load_calibration(path) -> CalibrationSet:
    data = Path(path).read_bytes()
    if data[:5] != CALIB_MAGIC:
        raise InputError(f"{path}: not a calibration file (bad magic)")
    if len(data) < 13:
        raise InputError(f"{path}: truncated header")
    n, t = struct.unpack_from("<II", data, 5)
    body = data[13:]
    if len(body) != 4 * n * t:
        raise InputError(f"{path}: expected {4 * n * t} payload bytes, found {len(body)}")
    samples = np.frombuffer(body, dtype="<u4").reshape(n, t)
    return CalibrationSet(samples, t, f"file:{Path(path).name}")


def collect_traces(model: MoEModel, calib: CalibrationSet) -> TraceSet:
    calib.check_vocab(model.config.vocab_size)
    return capture_traces(model, calib.samples)


@dataclass
class ImportanceScores:
    """``scores[l]`` is the per-expert mean routing probability, or ``None``
    for layers without a routed MoE."""

    scores: list[np.ndarray | None]
    layer_origins: tuple[int, ...]
    token_count: int = 0

    def matrix(self) -> np.ndarray:
        """Dense ``[layers, max_experts]`` view padded with NaN."""
        width = max((s.size for s in self.scores if s is not None), default=0)
        out = np.full((len(self.scores), width), np.nan)
        for l, s in enumerate(self.scores):
            if s is not None:
                out[l, : s.size] = s
        return out

    def to_dict(self) -> dict:
        return {
            "layer_origins": list(self.layer_origins),
            "token_count": self.token_count,
            "scores": [None if s is None else [float(v) for v in s] for s in self.scores],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ImportanceScores":
        return cls([None if s is None else np.asarray(s, dtype=np.float64) for s in d["scores"]],
                   tuple(d["layer_origins"]), d.get("token_count", 0))


def expert_importance(traces: TraceSet) -> ImportanceScores:
    """Average the routing probabilities over every calibration token."""
    if traces.n_tokens == 0:
        raise InputError("empty traces")
    scores = []
    for probs in traces.router_probs:
        if probs is None:
            scores.append(None)
            continue
        flat = probs.reshape(-1, probs.shape[-1]).astype(np.float64)
        scores.append(flat.mean(axis=0))
    if all(s is None for s in scores):
        raise InputError("traces contain no routed MoE layer")
    return ImportanceScores(scores, tuple(traces.layer_origins), traces.n_tokens)


def mean_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Per-token cosine averaged over tokens; zero-norm tokens are skipped."""
    cos = cosine_rows(a.reshape(-1, a.shape[-1]), b.reshape(-1, b.shape[-1]))
    valid = cos[~np.isnan(cos)]
    if valid.size == 0:
        raise ComputationError("every token has a zero-norm feature; similarity undefined")
    return float(valid.mean())


@dataclass
class SimilarityProfile:
    """Per-layer ``moe`` (MoE input vs output), ``norm_moe`` (residual stream
    around Norm+MoE) and per-block ``block`` cosines. ``None`` marks layers
    whose FFN was removed."""

    moe: list[float | None]
    norm_moe: list[float | None]
    block: list[float]
    layer_origins: tuple[int, ...]
    token_count: int = 0
    layer_kinds: list[str] = field(default_factory=list)

    @staticmethod
    def normalized(values) -> list[float | None]:
        """Min-max rescaling to [0, 1] over the defined entries."""
        defined = [v for v in values if v is not None]
        if not defined:
            return list(values)
        lo, hi = min(defined), max(defined)
        span = hi - lo
        return [None if v is None else (0.0 if span == 0 else (v - lo) / span) for v in values]

    def to_dict(self) -> dict:
        return {
            "layer_origins": list(self.layer_origins),
            "layer_kinds": list(self.layer_kinds),
            "token_count": self.token_count,
            "moe": self.moe,
            "norm_moe": self.norm_moe,
            "block": self.block,
            "block_normalized": self.normalized(self.block),
            "norm_moe_normalized": self.normalized(self.norm_moe),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityProfile":
        return cls(d["moe"], d["norm_moe"], d["block"], tuple(d["layer_origins"]),
                   d.get("token_count", 0), d.get("layer_kinds", []))


def layer_similarity(traces: TraceSet) -> tuple[list[float | None], list[float | None]]:
    """Per-layer ``(S_moe, S_norm_moe)``.

    ``S_moe`` compares the FFN input (after Norm) with the FFN output;
    ``S_norm_moe`` compares the residual stream before the Norm with the
    residual stream after the FFN is added back. ``S_moe`` is ``None`` where
    the FFN output is zero for every token.
    """
    s_m, s_nm = [], []
    for l in range(traces.n_layers):
        if traces.layer_kinds[l] == "none":
            s_m.append(None)
            s_nm.append(None)
            continue
        try:
            s_m.append(mean_cosine(traces.moe_norm_output[l], traces.moe_output[l]))
        except ComputationError:
            # FFN output identically zero: the angle is undefined.
            s_m.append(None)
        s_nm.append(mean_cosine(traces.moe_norm_input[l], traces.moe_residual_output[l]))
    return s_m, s_nm


def block_similarity(traces: TraceSet) -> list[float]:
    return [mean_cosine(traces.block_input[l], traces.block_output[l]) for l in range(traces.n_layers)]


def similarity_profile(traces: TraceSet) -> SimilarityProfile:
    s_m, s_nm = layer_similarity(traces)
    return SimilarityProfile(s_m, s_nm, block_similarity(traces), tuple(traces.layer_origins),
                             traces.n_tokens, list(traces.layer_kinds))


def analyze(model: MoEModel, calib: CalibrationSet) -> tuple[ImportanceScores | None, SimilarityProfile]:
    """Capture traces and compute every score. Importance is ``None`` for a
    model without routed layers."""
    traces = collect_traces(model, calib)
    try:
        importance = expert_importance(traces)
    except InputError:
        importance = None
    return importance, similarity_profile(traces)


def analysis_report(importance: ImportanceScores | None, profile: SimilarityProfile, calib: CalibrationSet) -> dict:
    return {
        "calibration": {"n_samples": len(calib), "seq_len": calib.seq_len, "source": calib.source},
        "similarity": profile.to_dict(),
        "importance": None if importance is None else importance.to_dict(),
    }
