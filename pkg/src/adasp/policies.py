"""Audio-token reduction policies.

Every policy maps an audio block ``A`` (L_audio x D) to a shorter block and reports,
for each output row, which input rows it came from. Text rows never pass through
a policy; :class:`ScheduledReduction` re-attaches them unchanged.

Tie rules: merge selection prefers the lower adjacent index; FastV eviction
drops the higher index first.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .kernels import adjacent_cosine, as_matrix, make_rng
from .runtime import HookResult, LayerState, TraceMissingError

log = logging.getLogger(__name__)

POLICIES = ("weighted_merge", "average_merge", "atome", "fastv", "random_merge", "random_evict", "none")

WEIGHT_EPS = 1e-12


@dataclass
class MergePlan:
    merge_index: np.ndarray
    clusters: list[tuple[int, ...]]
    audio_len: int

    @property
    def k_tokens(self) -> int:
        return int(self.merge_index.size)

    @property
    def output_len(self) -> int:
        return self.audio_len - self.k_tokens


@dataclass
class ReducedState:
    hidden: np.ndarray
    kept_positions: list[tuple[int, ...]]
    fallbacks: int = 0


def _check_k(k_tokens: int, upper: int, what: str) -> None:
    if not 0 <= k_tokens <= upper:
        raise ValueError(f"k_tokens={k_tokens} out of range [0, {upper}] for {what}")


def compute_adjacent_similarity(key_states) -> np.ndarray:
    """p_i = cos(K_i, K_{i+1}) for i in [0, L_audio - 1)."""
    key_states = as_matrix(key_states)
    if key_states.shape[0] < 2:
        raise ValueError("adjacent similarity needs at least 2 audio tokens")
    return adjacent_cosine(key_states)


def group_runs(merge_index) -> list[tuple[int, ...]]:
    """Turn sorted merge indices into token clusters.

    A maximal run of consecutive indices i..j covers tokens i..j+1.
    """
    clusters: list[tuple[int, ...]] = []
    start = prev = None
    for idx in (int(i) for i in merge_index):
        if prev is not None and idx == prev + 1:
            prev = idx
            continue
        if start is not None:
            clusters.append(tuple(range(start, prev + 2)))
        start = prev = idx
    if start is not None:
        clusters.append(tuple(range(start, prev + 2)))
    return clusters


def build_merge_plan(similarity, k_tokens: int) -> MergePlan:
    p = np.asarray(similarity, dtype=np.float64)
    audio_len = p.size + 1
    _check_k(k_tokens, p.size, "merge plan")
    # stable sort on -p: equal scores keep ascending index order
    order = np.argsort(-p, kind="stable")
    merge_index = np.sort(order[:k_tokens])
    return MergePlan(merge_index=merge_index, clusters=group_runs(merge_index), audio_len=audio_len)


def plan_from_indices(merge_index, audio_len: int) -> MergePlan:
    idx = np.unique(np.asarray(merge_index, dtype=np.int64))
    if idx.size and (idx[0] < 0 or idx[-1] > audio_len - 2):
        raise ValueError("merge index outside [0, L_audio - 2]")
    return MergePlan(merge_index=idx, clusters=group_runs(idx), audio_len=audio_len)


def compute_merge_weights(attention, audio_len: int) -> np.ndarray:
    """Cumulative attention received by each audio column.

    ``attention`` is (H, L, L), an already head-summed (L, L) matrix, or a length-L
    vector of column sums. Rows are queries, columns keys.
    """
    if attention is None:
        raise TraceMissingError(
            "attention trace is missing; run prefill with trace=True (or an active hook) "
            "so attention column sums are recorded"
        )
    att = np.asarray(attention, dtype=np.float64)
    if att.ndim == 3:
        colsum = att.sum(axis=(0, 1))
    elif att.ndim == 2:
        colsum = att.sum(axis=0)
    elif att.ndim == 1:
        colsum = att
    else:
        raise ValueError(f"unsupported attention shape {att.shape}")
    if colsum.size < audio_len:
        raise ValueError(f"attention covers {colsum.size} columns, need at least {audio_len}")
    return colsum[:audio_len].copy()


def weighted_merge(audio, plan: MergePlan, weights) -> ReducedState:
    """Replace each cluster by its weight-averaged row; other rows pass through untouched."""
    a = as_matrix(audio)
    w = np.asarray(weights, dtype=np.float64)
    if a.shape[0] != plan.audio_len or w.size != plan.audio_len:
        raise ValueError(
            f"plan expects {plan.audio_len} audio rows; got features {a.shape[0]}, weights {w.size}"
        )
    out = np.empty((plan.output_len, a.shape[1]))
    kept: list[tuple[int, ...]] = []
    fallbacks = 0
    row = 0
    i = 0
    for cluster in plan.clusters + [None]:
        stop = cluster[0] if cluster is not None else a.shape[0]
        if stop > i:
            out[row: row + stop - i] = a[i:stop]
            kept.extend((j,) for j in range(i, stop))
            row += stop - i
        if cluster is None:
            break
        lo, hi = cluster[0], cluster[-1] + 1
        cw = w[lo:hi]
        total = cw.sum()
        if total < WEIGHT_EPS:
            fallbacks += 1
            out[row] = a[lo:hi].mean(axis=0)
        else:
            out[row] = (cw[:, None] * a[lo:hi]).sum(axis=0) / total
        kept.append(cluster)
        row += 1
        i = hi
    if fallbacks:
        log.warning("weighted_merge: %d cluster(s) with vanishing weight fell back to the mean", fallbacks)
    return ReducedState(hidden=out, kept_positions=kept, fallbacks=fallbacks)


def average_merge(audio, plan: MergePlan) -> ReducedState:
    return weighted_merge(audio, plan, np.ones(plan.audio_len))


def evict(audio, removed) -> ReducedState:
    a = as_matrix(audio)
    keep = np.ones(a.shape[0], dtype=bool)
    keep[np.asarray(removed, dtype=np.int64)] = False
    idx = np.flatnonzero(keep)
    return ReducedState(hidden=a[idx].copy(), kept_positions=[(int(j),) for j in idx])


def baseline_random_merge(audio, k_tokens: int, rng: np.random.Generator) -> ReducedState:
    a = as_matrix(audio)
    _check_k(k_tokens, max(a.shape[0] - 1, 0), "random_merge")
    idx = rng.choice(max(a.shape[0] - 1, 0), size=k_tokens, replace=False) if k_tokens else []
    return average_merge(a, plan_from_indices(idx, a.shape[0]))


def baseline_random_evict(audio, k_tokens: int, rng: np.random.Generator) -> ReducedState:
    a = as_matrix(audio)
    _check_k(k_tokens, max(a.shape[0] - 1, 0), "random_evict")
    removed = rng.choice(a.shape[0], size=k_tokens, replace=False) if k_tokens else []
    return evict(a, removed)


def atome_pairs(similarity, k_tokens: int) -> list[int]:
    """Greedy non-overlapping adjacent pairs by descending similarity."""
    p = np.asarray(similarity, dtype=np.float64)
    audio_len = p.size + 1
    _check_k(k_tokens, audio_len // 2, "atome (pair capacity floor(L_audio/2))")
    used = np.zeros(audio_len, dtype=bool)
    chosen: list[int] = []
    for i in np.argsort(-p, kind="stable"):
        if len(chosen) == k_tokens:
            break
        if not used[i] and not used[i + 1]:
            used[i] = used[i + 1] = True
            chosen.append(int(i))
    if len(chosen) < k_tokens:
        raise ValueError(
            f"atome: greedy pairing found only {len(chosen)} disjoint pairs, k_tokens={k_tokens}"
        )
    return sorted(chosen)


def baseline_atome_merge(audio, key_states, k_tokens: int) -> ReducedState:
    a = as_matrix(audio)
    if a.shape[0] < 2:
        _check_k(k_tokens, 0, "atome")
        return ReducedState(hidden=a.copy(), kept_positions=[(j,) for j in range(a.shape[0])])
    pairs = atome_pairs(compute_adjacent_similarity(key_states), k_tokens)
    # disjoint pairs never chain, so every cluster has exactly two tokens
    return average_merge(a, plan_from_indices(pairs, a.shape[0]))


def baseline_fastv_evict(audio, weights, k_tokens: int) -> ReducedState:
    a = as_matrix(audio)
    w = np.asarray(weights, dtype=np.float64)
    _check_k(k_tokens, a.shape[0], "fastv")
    idx = np.arange(w.size)
    # primary key ascending weight, secondary descending index
    order = np.lexsort((-idx, w))
    return evict(a, order[:k_tokens])


def apply_policy(
    policy: str,
    audio: np.ndarray,
    k_tokens: int,
    keys: np.ndarray | None = None,
    weights: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> ReducedState:
    """Dispatch on a policy identifier over one audio block."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {', '.join(POLICIES)}")
    L = audio.shape[0]
    if policy == "none" or k_tokens == 0:
        return ReducedState(hidden=np.array(audio, copy=True), kept_positions=[(j,) for j in range(L)])
    if policy in ("weighted_merge", "average_merge"):
        _check_k(k_tokens, L - 1, policy)
        plan = build_merge_plan(compute_adjacent_similarity(keys), k_tokens)
        if policy == "average_merge":
            return average_merge(audio, plan)
        if weights is None:
            raise TraceMissingError("weighted_merge needs attention column sums from the trace")
        return weighted_merge(audio, plan, weights)
    if policy == "atome":
        return baseline_atome_merge(audio, keys, k_tokens)
    if policy == "fastv":
        if weights is None:
            raise TraceMissingError("fastv needs attention column sums from the trace")
        return baseline_fastv_evict(audio, weights, k_tokens)
    if rng is None:
        raise ValueError(f"{policy} needs an rng")
    if policy == "random_merge":
        return baseline_random_merge(audio, k_tokens, rng)
    return baseline_random_evict(audio, k_tokens, rng)


@dataclass
class ScheduledReduction:
    """Runtime hook applying ``policy`` with ``budgets[l]`` tokens after layer ``l``.

    Keys and attention weights come from the same layer's forward pass.
    """

    policy: str
    budgets: list[int]
    seed: int = 0
    fallbacks: int = 0
    applied: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        self._rng = make_rng(self.seed)

    def active(self, layer: int) -> bool:
        return self.policy != "none" and layer < len(self.budgets) and self.budgets[layer] > 0

    def after_layer(self, state: LayerState) -> HookResult | None:
        k = self.budgets[state.layer]
        n_audio = state.audio_len
        if k > max(n_audio - 1, 0) and self.policy != "fastv":
            raise ValueError(f"layer {state.layer}: budget {k} exceeds {n_audio} audio tokens - 1")
        weights = None
        if self.policy in ("weighted_merge", "fastv"):
            weights = compute_merge_weights(state.attention_colsum, n_audio)
        red = apply_policy(
            self.policy,
            state.hidden[:n_audio],
            k,
            keys=state.keys[:n_audio],
            weights=weights,
            rng=self._rng,
        )
        hidden = np.concatenate([red.hidden, state.hidden[n_audio:]], axis=0)
        positions = [
            tuple(p for j in group for p in state.positions[j]) for group in red.kept_positions
        ] + list(state.positions[n_audio:])
        self.fallbacks += red.fallbacks
        self.applied[state.layer] = k
        return HookResult(
            hidden=hidden, audio_len=red.hidden.shape[0], positions=positions, fallbacks=red.fallbacks
        )
