"""Layer-wise token budgets and transfer-entropy layer selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .policies import ScheduledReduction
from .runtime import ModelWeights, Sequence, prefill

SCHEDULE_KINDS = ("constant", "decay", "single_layer")

SIGMA_FLOOR = 1e-12


@dataclass(frozen=True)
class Schedule:
    kind: str
    start_layer: int
    budgets: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.budgets)

    @property
    def operation_layers(self) -> list[int]:
        return [i for i, b in enumerate(self.budgets) if b > 0]


def _validate(total_k: int, start_layer: int, num_layers: int, audio_len: int | None) -> None:
    if not 0 <= start_layer < num_layers:
        raise ValueError(f"start layer {start_layer} outside [0, {num_layers})")
    if total_k < 0:
        raise ValueError("total_k must be non-negative")
    if audio_len is not None and total_k > max(audio_len - 1, 0):
        raise ValueError(f"total_k={total_k} infeasible for {audio_len} audio tokens")


def largest_remainder(total: int, weights) -> list[int]:
    """Split ``total`` in proportion to ``weights``; leftover units go to the
    largest fractional parts, earlier positions first on ties."""
    weights = [Fraction(w) for w in weights]
    wsum = sum(weights)
    if wsum == 0:
        if total:
            raise ValueError("cannot distribute a positive total over zero weights")
        return [0] * len(weights)
    quotas = [total * w / wsum for w in weights]
    base = [math.floor(q) for q in quotas]
    leftover = total - sum(base)
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return base


def make_constant_schedule(total_k: int, start_layer: int, num_layers: int, audio_len: int | None = None) -> Schedule:
    _validate(total_k, start_layer, num_layers, audio_len)
    active = num_layers - start_layer
    split = largest_remainder(total_k, [1] * active)
    return Schedule("constant", start_layer, tuple([0] * start_layer + split))


def make_decay_schedule(total_k: int, start_layer: int, num_layers: int, audio_len: int | None = None) -> Schedule:
    _validate(total_k, start_layer, num_layers, audio_len)
    active = num_layers - start_layer
    if active < 2:
        raise ValueError("decay schedule needs at least 2 active layers")
    split = largest_remainder(total_k, range(active - 1, -1, -1))
    return Schedule("decay", start_layer, tuple([0] * start_layer + split))


def make_single_layer_schedule(total_k: int, layer: int, num_layers: int, audio_len: int | None = None) -> Schedule:
    _validate(total_k, layer, num_layers, audio_len)
    budgets = [0] * num_layers
    budgets[layer] = total_k
    return Schedule("single_layer", layer, tuple(budgets))


def make_schedule(kind: str, total_k: int, layer: int, num_layers: int, audio_len: int | None = None) -> Schedule:
    if kind == "constant":
        return make_constant_schedule(total_k, layer, num_layers, audio_len)
    if kind == "decay":
        return make_decay_schedule(total_k, layer, num_layers, audio_len)
    if kind == "single_layer":
        return make_single_layer_schedule(total_k, layer, num_layers, audio_len)
    raise ValueError(f"unknown schedule kind {kind!r}; expected one of {', '.join(SCHEDULE_KINDS)}")


def layer_entropy(features) -> float:
    """Gaussian entropy proxy: sum over token rows of log(population std of the row)."""
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 2:
        raise ValueError(f"layer_entropy needs an N x D matrix with N >= 1, D >= 2; got {f.shape}")
    sigma = f.std(axis=1)
    return float(np.log(np.maximum(sigma, SIGMA_FLOOR)).sum())


def final_features_with_merge(weights: ModelWeights, seq: Sequence, layer: int, k_tokens: int) -> np.ndarray:
    """Final hidden states when ``k_tokens`` are weight-merged after ``layer``."""
    sched = make_single_layer_schedule(k_tokens, layer, weights.config.num_layers, seq.audio_len)
    return prefill(weights, seq, ScheduledReduction("weighted_merge", list(sched.budgets))).final_hidden


def transfer_entropy(
    weights: ModelWeights,
    seq: Sequence,
    layer: int,
    k_tokens: int,
    reference_entropy: float | None = None,
) -> float:
    """|H(merge at the final layer) - H(final features with the merge at ``layer``)|.

    Pass ``reference_entropy`` to reuse the final-layer pass across candidates.
    """
    last = weights.config.num_layers - 1
    if not 0 <= layer <= last:
        raise ValueError(f"candidate layer {layer} outside [0, {last}]")
    if reference_entropy is None:
        reference_entropy = layer_entropy(final_features_with_merge(weights, seq, last, k_tokens))
    if layer == last:
        return 0.0
    return abs(reference_entropy - layer_entropy(final_features_with_merge(weights, seq, layer, k_tokens)))


@dataclass
class EntropyReport:
    layers: list[int]
    entropy: dict[int, float]
    te: dict[int, float]
    ranking: list[int]
    k_tokens: int

    @property
    def selected(self) -> int:
        return self.ranking[0]

    def rows(self):
        rank = {layer: r + 1 for r, layer in enumerate(self.ranking)}
        for layer in self.layers:
            yield {
                "layer": layer,
                "k_tokens": self.k_tokens,
                "entropy": self.entropy[layer],
                "te": self.te[layer],
                "rank": rank[layer],
            }


def rank_layers(te: dict[int, float]) -> list[int]:
    return sorted(te, key=lambda layer: (te[layer], layer))


def default_candidates(num_layers: int) -> list[int]:
    hi = max(1, num_layers // 2)
    return list(range(1, min(hi, num_layers - 1) + 1)) or [0]


def select_layer(
    weights: ModelWeights,
    seqs: Sequence | list[Sequence],
    candidates: list[int] | None,
    k_tokens: int,
) -> tuple[int, EntropyReport]:
    """Pick the candidate layer with the lowest transfer entropy (mean over ``seqs``)."""
    if isinstance(seqs, Sequence):
        seqs = [seqs]
    if candidates is None:
        candidates = default_candidates(weights.config.num_layers)
    candidates = sorted(set(candidates))
    if not candidates:
        raise ValueError("select_layer needs at least one candidate layer")
    if not seqs:
        raise ValueError("select_layer needs at least one sequence")
    last = weights.config.num_layers - 1
    entropy = {layer: 0.0 for layer in candidates}
    te = {layer: 0.0 for layer in candidates}
    for seq in seqs:
        ref = layer_entropy(final_features_with_merge(weights, seq, last, k_tokens))
        for layer in candidates:
            h = ref if layer == last else layer_entropy(final_features_with_merge(weights, seq, layer, k_tokens))
            entropy[layer] += h / len(seqs)
            te[layer] += abs(ref - h) / len(seqs)
    ranking = rank_layers(te)
    return ranking[0], EntropyReport(candidates, entropy, te, ranking, k_tokens)
