"""Decoder-only transformer with a per-layer KV cache and between-layer reduction hooks.

Pre-LayerNorm blocks, GELU feed-forward, absolute positional embeddings added once
at embedding time. A hook may shorten the hidden state after any layer's full
block; the layer's own cache keeps its pre-reduction length and every later
layer runs on the reduced sequence.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .kernels import gelu, layer_norm, make_rng, randn_matrix


class ContextLengthError(ValueError):
    pass


class TraceMissingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 8
    hidden_dim: int = 256
    ffn_dim: int = 1024
    num_heads: int = 8
    vocab_size: int = 512
    max_positions: int = 4096

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "ffn_dim", "num_heads", "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} is not divisible by num_heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads


LAYER_MATRICES = (
    "w_q", "w_k", "w_v", "w_o", "ffn_in", "ffn_out",
    "ln1_gain", "ln1_bias", "ln2_gain", "ln2_bias",
)


@dataclass
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    ffn_in: np.ndarray
    ffn_out: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray


@dataclass
class ModelWeights:
    config: ModelConfig
    layers: list[LayerWeights]
    embedding: np.ndarray
    positional: np.ndarray
    head: np.ndarray

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "ModelWeights":
        """Seeded synthetic weights: projections ~ N(0, 1/fan_in), embeddings ~ N(0, 0.02^2)."""
        rng = make_rng(seed)
        d, m = config.hidden_dim, config.ffn_dim
        layers = []
        for _ in range(config.num_layers):
            layers.append(
                LayerWeights(
                    w_q=randn_matrix(rng, d, d, 1 / math.sqrt(d)),
                    w_k=randn_matrix(rng, d, d, 1 / math.sqrt(d)),
                    w_v=randn_matrix(rng, d, d, 1 / math.sqrt(d)),
                    w_o=randn_matrix(rng, d, d, 1 / math.sqrt(d)),
                    ffn_in=randn_matrix(rng, d, m, 1 / math.sqrt(d)),
                    ffn_out=randn_matrix(rng, m, d, 1 / math.sqrt(m)),
                    ln1_gain=np.ones((1, d)),
                    ln1_bias=np.zeros((1, d)),
                    ln2_gain=np.ones((1, d)),
                    ln2_bias=np.zeros((1, d)),
                )
            )
        return cls(
            config=config,
            layers=layers,
            embedding=randn_matrix(rng, config.vocab_size, d, 0.02),
            positional=randn_matrix(rng, config.max_positions, d, 0.02),
            head=randn_matrix(rng, d, config.vocab_size, 1 / math.sqrt(d)),
        )

    def named_matrices(self):
        """(name, matrix) pairs in the on-disk declaration order."""
        for i, layer in enumerate(self.layers):
            for name in LAYER_MATRICES:
                yield f"layers.{i}.{name}", getattr(layer, name)
        yield "embedding", self.embedding
        yield "positional", self.positional
        yield "head", self.head

    def expected_shapes(self):
        c = self.config
        d, m = c.hidden_dim, c.ffn_dim
        per_layer = {
            "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_o": (d, d),
            "ffn_in": (d, m), "ffn_out": (m, d),
            "ln1_gain": (1, d), "ln1_bias": (1, d), "ln2_gain": (1, d), "ln2_bias": (1, d),
        }
        for i in range(c.num_layers):
            for name in LAYER_MATRICES:
                yield f"layers.{i}.{name}", per_layer[name]
        yield "embedding", (c.vocab_size, d)
        yield "positional", (c.max_positions, d)
        yield "head", (d, c.vocab_size)

    def embed_tokens(self, token_ids) -> np.ndarray:
        return self.embedding[np.asarray(token_ids, dtype=np.int64)]


@dataclass
class Sequence:
    """Prompt embeddings ``[X_audio; X_text]`` before positional encoding."""

    embeddings: np.ndarray
    audio_len: int
    text_len: int

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise ValueError("embeddings must be a 2-D matrix")
        if self.audio_len < 0 or self.text_len < 0:
            raise ValueError("audio_len and text_len must be non-negative")
        if self.embeddings.shape[0] != self.audio_len + self.text_len:
            raise ValueError(
                f"embeddings have {self.embeddings.shape[0]} rows, "
                f"expected audio_len + text_len = {self.audio_len + self.text_len}"
            )

    @property
    def prompt_len(self) -> int:
        return self.audio_len + self.text_len

    @property
    def audio(self) -> np.ndarray:
        return self.embeddings[: self.audio_len]

    @property
    def text(self) -> np.ndarray:
        return self.embeddings[self.audio_len:]


class KvCache:
    """Per-layer key/value storage, laid out (heads, capacity, head_dim) for decode."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self._k: list[np.ndarray | None] = [None] * config.num_layers
        self._v: list[np.ndarray | None] = [None] * config.num_layers
        self.lengths = [0] * config.num_layers
        self.next_position = 0

    @property
    def num_layers(self) -> int:
        return len(self.lengths)

    def set_layer(self, layer: int, keys: np.ndarray, values: np.ndarray, reserve: int = 0) -> None:
        n = keys.shape[0]
        h, hd = self.config.num_heads, self.config.head_dim
        cap = n + max(reserve, 1)
        kbuf = np.empty((h, cap, hd))
        vbuf = np.empty((h, cap, hd))
        kbuf[:, :n] = keys.reshape(n, h, hd).transpose(1, 0, 2)
        vbuf[:, :n] = values.reshape(n, h, hd).transpose(1, 0, 2)
        self._k[layer], self._v[layer] = kbuf, vbuf
        self.lengths[layer] = n

    def append(self, layer: int, key: np.ndarray, value: np.ndarray) -> None:
        n = self.lengths[layer]
        kbuf, vbuf = self._k[layer], self._v[layer]
        if n == kbuf.shape[1]:
            grow = max(n, 16)
            kbuf = np.concatenate([kbuf, np.empty((kbuf.shape[0], grow, kbuf.shape[2]))], axis=1)
            vbuf = np.concatenate([vbuf, np.empty((vbuf.shape[0], grow, vbuf.shape[2]))], axis=1)
            self._k[layer], self._v[layer] = kbuf, vbuf
        h, hd = self.config.num_heads, self.config.head_dim
        kbuf[:, n] = key.reshape(h, hd)
        vbuf[:, n] = value.reshape(h, hd)
        self.lengths[layer] = n + 1

    def head_views(self, layer: int) -> tuple[np.ndarray, np.ndarray]:
        n = self.lengths[layer]
        return self._k[layer][:, :n], self._v[layer][:, :n]

    def keys(self, layer: int) -> np.ndarray:
        """K_cache of ``layer`` as a (current_len, D) matrix."""
        k, _ = self.head_views(layer)
        return k.transpose(1, 0, 2).reshape(k.shape[1], -1)

    def values(self, layer: int) -> np.ndarray:
        _, v = self.head_views(layer)
        return v.transpose(1, 0, 2).reshape(v.shape[1], -1)

    def copy(self) -> "KvCache":
        other = KvCache(self.config)
        other._k = [None if k is None else k.copy() for k in self._k]
        other._v = [None if v is None else v.copy() for v in self._v]
        other.lengths = list(self.lengths)
        other.next_position = self.next_position
        return other


@dataclass
class LayerState:
    """What a hook sees after layer ``layer``'s full block."""

    layer: int
    hidden: np.ndarray
    keys: np.ndarray
    features: np.ndarray
    attention_colsum: np.ndarray | None
    audio_len: int
    positions: list[tuple[int, ...]]


@dataclass
class HookResult:
    hidden: np.ndarray
    audio_len: int
    positions: list[tuple[int, ...]]
    fallbacks: int = 0


class ReductionHooks(Protocol):
    def active(self, layer: int) -> bool: ...

    def after_layer(self, state: LayerState) -> HookResult | None: ...


class NoOpHooks:
    def active(self, layer: int) -> bool:
        return False

    def after_layer(self, state: LayerState) -> HookResult | None:
        return None


@dataclass
class LayerTrace:
    """Per-layer attention statistics, key states and post-attention features."""

    attention_colsum: list[np.ndarray] = field(default_factory=list)
    attention: list[np.ndarray | None] = field(default_factory=list)
    row_sum_error: list[float] = field(default_factory=list)
    keys: list[np.ndarray] = field(default_factory=list)
    features: list[np.ndarray] = field(default_factory=list)
    input_lengths: list[int] = field(default_factory=list)
    positions: list[list[tuple[int, ...]]] = field(default_factory=list)
    fallbacks: int = 0


@dataclass
class PrefillResult:
    cache: KvCache
    trace: LayerTrace
    final_hidden: np.ndarray
    positions: list[tuple[int, ...]]
    audio_len: int


def _check_cache(weights: ModelWeights, cache: KvCache) -> None:
    if cache.num_layers != weights.config.num_layers:
        raise ValueError(
            f"cache has {cache.num_layers} layers, model config has {weights.config.num_layers}"
        )


def _causal_attention(q, k, v, num_heads, want_colsum, keep_probs):
    """Multi-head causal self-attention, one head at a time to bound memory."""
    n, d = q.shape
    hd = d // num_heads
    scale = 1.0 / math.sqrt(hd)
    out = np.empty((n, d))
    colsum = np.zeros(n) if want_colsum else None
    probs = np.empty((num_heads, n, n)) if keep_probs else None
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    row_err = 0.0
    for h in range(num_heads):
        sl = slice(h * hd, (h + 1) * hd)
        scores = (q[:, sl] @ k[:, sl].T) * scale
        scores[upper] = -np.inf
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        out[:, sl] = scores @ v[:, sl]
        if want_colsum:
            colsum += scores.sum(axis=0)
            row_err = max(row_err, float(np.abs(scores.sum(axis=1) - 1.0).max()))
        if keep_probs:
            probs[h] = scores
    return out, colsum, probs, row_err


def prefill(
    weights: ModelWeights,
    seq: Sequence,
    hooks: ReductionHooks | None = None,
    trace: bool = False,
    keep_attention: bool = False,
    reserve: int = 0,
) -> PrefillResult:
    """Run the prompt through every layer, filling the KV cache.

    ``trace`` records per-layer key states, post-attention features and attention
    column sums; ``keep_attention`` additionally keeps full (H, n, n) probabilities
    and is only sensible for short prompts. ``reserve`` pre-sizes cache buffers
    for that many decode steps.
    """
    cfg = weights.config
    hooks = hooks or NoOpHooks()
    if seq.embeddings.shape[1] != cfg.hidden_dim:
        raise ValueError(
            f"sequence hidden size {seq.embeddings.shape[1]} != model hidden_dim {cfg.hidden_dim}"
        )
    n = seq.prompt_len
    if n > cfg.max_positions:
        raise ContextLengthError(f"prompt length {n} exceeds max_positions {cfg.max_positions}")
    if n == 0:
        raise ValueError("empty prompt")

    x = seq.embeddings + weights.positional[:n]
    positions = [(i,) for i in range(n)]
    audio_len = seq.audio_len
    cache = KvCache(cfg)
    cache.next_position = n
    tr = LayerTrace()

    for li, lw in enumerate(weights.layers):
        hook_on = hooks.active(li)
        h = layer_norm(x, lw.ln1_gain, lw.ln1_bias)
        q = h @ lw.w_q
        k = h @ lw.w_k
        v = h @ lw.w_v
        attn, colsum, probs, row_err = _causal_attention(
            q, k, v, cfg.num_heads, want_colsum=trace or hook_on, keep_probs=keep_attention
        )
        x = x + attn @ lw.w_o
        features = x
        h2 = layer_norm(x, lw.ln2_gain, lw.ln2_bias)
        x = x + gelu(h2 @ lw.ffn_in) @ lw.ffn_out
        cache.set_layer(li, k, v, reserve=reserve)

        if trace:
            tr.attention_colsum.append(colsum)
            tr.attention.append(probs)
            tr.row_sum_error.append(row_err)
            tr.keys.append(k)
            tr.features.append(features)
            tr.input_lengths.append(x.shape[0])
            tr.positions.append(list(positions))

        if hook_on:
            result = hooks.after_layer(
                LayerState(
                    layer=li,
                    hidden=x,
                    keys=k,
                    features=features,
                    attention_colsum=colsum,
                    audio_len=audio_len,
                    positions=positions,
                )
            )
            if result is not None:
                x, audio_len, positions = result.hidden, result.audio_len, result.positions
                tr.fallbacks += result.fallbacks

    return PrefillResult(cache=cache, trace=tr, final_hidden=x, positions=positions, audio_len=audio_len)


def logits_from_hidden(weights: ModelWeights, hidden_row: np.ndarray) -> np.ndarray:
    return hidden_row @ weights.head


def decode_step(weights: ModelWeights, cache: KvCache, new_embedding: np.ndarray) -> tuple[np.ndarray, KvCache]:
    """One autoregressive step: append this token's K/V to every layer, return logits.

    ``new_embedding`` is the token embedding without position; the position is
    taken from ``cache.next_position``.
    """
    _check_cache(weights, cache)
    cfg = weights.config
    pos = cache.next_position
    if pos >= cfg.max_positions:
        raise ContextLengthError(f"position {pos} exceeds max_positions {cfg.max_positions}")
    h_heads, hd = cfg.num_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(hd)
    x = np.asarray(new_embedding, dtype=np.float64).reshape(1, -1) + weights.positional[pos]
    for li, lw in enumerate(weights.layers):
        h = layer_norm(x, lw.ln1_gain, lw.ln1_bias)
        q = h @ lw.w_q
        cache.append(li, h @ lw.w_k, h @ lw.w_v)
        kc, vc = cache.head_views(li)
        scores = np.matmul(kc, q.reshape(h_heads, hd, 1))[:, :, 0] * scale
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        attn = np.matmul(scores[:, None, :], vc).reshape(1, -1)
        x = x + attn @ lw.w_o
        h2 = layer_norm(x, lw.ln2_gain, lw.ln2_bias)
        x = x + gelu(h2 @ lw.ffn_in) @ lw.ffn_out
    cache.next_position = pos + 1
    return logits_from_hidden(weights, x[0]), cache


@dataclass
class RunTimings:
    prefill_s: float
    decoding_s: float
    audio_s: float
    generated_tokens: int

    def __post_init__(self):
        if min(self.prefill_s, self.decoding_s, self.audio_s) < 0 or self.generated_tokens < 0:
            raise ValueError("timings must be non-negative")


@dataclass
class GenerateResult:
    token_ids: list[int]
    timings: RunTimings
    prefill: PrefillResult
    logits: list[np.ndarray]


def generate(
    weights: ModelWeights,
    seq: Sequence,
    hooks: ReductionHooks | None = None,
    steps: int = 1,
    audio_s: float | None = None,
    tokens_per_second: float = 50.0,
) -> GenerateResult:
    """Greedy generation: prefill, then ``steps`` decode steps.

    The first decode input is the argmax of the prefill logits at the last prompt
    row; each step's argmax feeds the next step. ``audio_s`` defaults to
    ``audio_len / tokens_per_second``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if audio_s is None:
        audio_s = seq.audio_len / tokens_per_second

    t0 = time.perf_counter()
    pre = prefill(weights, seq, hooks, reserve=steps)
    token = int(np.argmax(logits_from_hidden(weights, pre.final_hidden[-1])))
    t1 = time.perf_counter()

    cache = pre.cache
    tokens: list[int] = []
    all_logits: list[np.ndarray] = []
    for _ in range(steps):
        logits, cache = decode_step(weights, cache, weights.embedding[token])
        token = int(np.argmax(logits))
        tokens.append(token)
        all_logits.append(logits)
    t2 = time.perf_counter()

    timings = RunTimings(prefill_s=t1 - t0, decoding_s=t2 - t1, audio_s=audio_s, generated_tokens=steps)
    return GenerateResult(token_ids=tokens, timings=timings, prefill=pre, logits=all_logits)


def decode_only(weights: ModelWeights, cache: KvCache, first_token: int, steps: int) -> tuple[list[int], float]:
    """Time ``steps`` greedy decode steps from a copy of ``cache``."""
    cache = cache.copy()
    token = first_token
    tokens = []
    t0 = time.perf_counter()
    for _ in range(steps):
        logits, cache = decode_step(weights, cache, weights.embedding[token])
        token = int(np.argmax(logits))
        tokens.append(token)
    return tokens, time.perf_counter() - t0
