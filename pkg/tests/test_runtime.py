import numpy as np
import pytest

from adasp import io as adasp_io
from adasp.bench import expected_lengths, make_sequence
from adasp.policies import POLICIES, ScheduledReduction, apply_policy
from adasp.runtime import (
    ContextLengthError,
    HookResult,
    KvCache,
    ModelConfig,
    ModelWeights,
    decode_step,
    generate,
    prefill,
)
from adasp.schedule import make_constant_schedule, make_decay_schedule


class DropAudioHook:
    """Drops the last ``n`` audio rows after ``layer``."""

    def __init__(self, layer, n):
        self.layer, self.n = layer, n

    def active(self, layer):
        return layer == self.layer

    def after_layer(self, state):
        keep = state.audio_len - self.n
        hidden = np.concatenate([state.hidden[:keep], state.hidden[state.audio_len:]])
        positions = state.positions[:keep] + state.positions[state.audio_len:]
        return HookResult(hidden, keep, positions)


class ZeroMergeHook:
    def active(self, layer):
        return True

    def after_layer(self, state):
        red = apply_policy("weighted_merge", state.hidden[: state.audio_len], 0,
                           keys=state.keys[: state.audio_len], weights=state.attention_colsum)
        hidden = np.concatenate([red.hidden, state.hidden[state.audio_len:]])
        return HookResult(hidden, state.audio_len, list(state.positions))


def test_noop_prefill_lengths(tiny_weights):
    seq = make_sequence(tiny_weights, 1, 6, 2)
    pre = prefill(tiny_weights, seq)
    assert pre.final_hidden.shape == (8, 16)
    assert pre.cache.lengths == [8, 8, 8, 8]


def test_hook_after_second_layer_shortens_later_caches(tiny_weights):
    seq = make_sequence(tiny_weights, 1, 6, 2)
    pre = prefill(tiny_weights, seq, DropAudioHook(layer=1, n=3))
    assert pre.cache.lengths == [8, 8, 5, 5]
    assert pre.final_hidden.shape[0] == 5
    assert pre.cache.keys(2).shape == (5, 16)


def test_prefill_is_bit_deterministic(tiny_config):
    outs = []
    for _ in range(2):
        w = ModelWeights.init(tiny_config, seed=11)
        seq = make_sequence(w, 4, 10, 3)
        outs.append(prefill(w, seq, ScheduledReduction("weighted_merge", [0, 3, 0, 0])).final_hidden)
    assert outs[0].tobytes() == outs[1].tobytes()


def test_context_length_error(tiny_weights):
    seq = make_sequence(tiny_weights, 1, 120, 10)
    with pytest.raises(ContextLengthError):
        prefill(tiny_weights, seq)


def test_decode_grows_every_layer_by_one(tiny_weights):
    seq = make_sequence(tiny_weights, 1, 3, 2)
    pre = prefill(tiny_weights, seq)
    _, cache = decode_step(tiny_weights, pre.cache, tiny_weights.embedding[0])
    assert cache.lengths == [6] * 4


def test_decode_256_steps_after_100():
    cfg = ModelConfig(num_layers=2, hidden_dim=8, ffn_dim=16, num_heads=2, vocab_size=16, max_positions=400)
    w = ModelWeights.init(cfg, 0)
    res = generate(w, make_sequence(w, 0, 90, 10), steps=256)
    assert res.prefill.cache.lengths == [356, 356]
    assert len(res.token_ids) == 256


def test_decode_matches_full_prefill(tiny_weights):
    """Incremental decoding must equal a full causal pass over the extended prompt."""
    seq = make_sequence(tiny_weights, 2, 5, 2)
    pre = prefill(tiny_weights, seq)
    tok = 3
    logits, _ = decode_step(tiny_weights, pre.cache, tiny_weights.embedding[tok])
    ext = type(seq)(np.vstack([seq.embeddings, tiny_weights.embedding[tok]]), 5, 3)
    full = prefill(tiny_weights, ext)
    np.testing.assert_allclose(logits, full.final_hidden[-1] @ tiny_weights.head, atol=1e-10)


def test_decode_rejects_mismatched_cache(tiny_weights):
    other = KvCache(ModelConfig(num_layers=2, hidden_dim=16, ffn_dim=32, num_heads=2, vocab_size=32))
    with pytest.raises(ValueError, match="layers"):
        decode_step(tiny_weights, other, tiny_weights.embedding[0])


def test_generate_timings_and_greedy_determinism(tiny_weights, tiny_seq):
    a = generate(tiny_weights, tiny_seq, steps=1)
    assert len(a.logits) == 1
    assert a.timings.prefill_s > 0 and a.timings.decoding_s > 0
    b = generate(tiny_weights, tiny_seq, steps=5)
    c = generate(tiny_weights, tiny_seq, steps=5)
    assert b.token_ids == c.token_ids


def test_zero_merge_hook_is_identity(tiny_weights):
    seq = make_sequence(tiny_weights, 5, 12, 3)
    plain = generate(tiny_weights, seq, steps=6)
    zero = generate(tiny_weights, seq, ZeroMergeHook(), steps=6)
    assert plain.token_ids == zero.token_ids
    assert plain.prefill.final_hidden.tobytes() == zero.prefill.final_hidden.tobytes()


def test_causality(tiny_weights):
    rng = np.random.default_rng(0)
    seq = make_sequence(tiny_weights, 1, 8, 4)
    base = prefill(tiny_weights, seq).final_hidden
    for t in range(seq.prompt_len - 1):
        emb = seq.embeddings.copy()
        emb[t + 1:] += rng.standard_normal(emb[t + 1:].shape)
        pert = prefill(tiny_weights, type(seq)(emb, 8, 4)).final_hidden
        np.testing.assert_array_equal(pert[: t + 1] @ tiny_weights.head, base[: t + 1] @ tiny_weights.head)


def test_trace_attention_rows_and_mass(tiny_weights):
    seq = make_sequence(tiny_weights, 1, 9, 3)
    pre = prefill(tiny_weights, seq, trace=True, keep_attention=True)
    H, L = tiny_weights.config.num_heads, seq.prompt_len
    for li in range(tiny_weights.config.num_layers):
        probs = pre.trace.attention[li]
        assert np.abs(probs.sum(axis=-1) - 1).max() <= 1e-9
        assert pre.trace.row_sum_error[li] <= 1e-9
        assert np.triu(probs, k=1).max() == 0.0
        np.testing.assert_allclose(pre.trace.attention_colsum[li], probs.sum(axis=(0, 1)), atol=1e-12)
        assert pre.trace.attention_colsum[li].sum() == pytest.approx(H * L, abs=1e-6)


@pytest.mark.parametrize("policy", [p for p in POLICIES if p != "none"])
@pytest.mark.parametrize("kind", ["constant", "decay"])
def test_text_positions_survive_and_bookkeeping_matches(tiny_weights, policy, kind):
    seq = make_sequence(tiny_weights, 2, 20, 4)
    make = make_constant_schedule if kind == "constant" else make_decay_schedule
    sched = make(6, 1, 4, seq.audio_len)
    pre = prefill(tiny_weights, seq, ScheduledReduction(policy, list(sched.budgets), seed=1), trace=True)
    assert pre.cache.lengths == expected_lengths(seq.prompt_len, sched.budgets)
    text_tags = [(i,) for i in range(seq.audio_len, seq.prompt_len)]
    for positions in pre.trace.positions + [pre.positions]:
        assert positions[-seq.text_len:] == text_tags
    assert pre.positions[-seq.text_len:] == text_tags
    audio_tags = [p for tag in pre.positions[: pre.audio_len] for p in tag]
    if policy.endswith("merge") or policy == "atome":
        assert audio_tags == list(range(seq.audio_len))
    else:
        assert audio_tags == sorted(audio_tags)
    np.testing.assert_array_equal(
        pre.final_hidden[-seq.text_len:].shape, (seq.text_len, tiny_weights.config.hidden_dim)
    )


def test_weights_and_sequence_round_trip(tmp_path, tiny_weights, tiny_seq):
    path = adasp_io.save_weights(tiny_weights, tmp_path / "m.bin")
    back = adasp_io.load_weights(path)
    assert back.config == tiny_weights.config
    for (n1, a), (n2, b) in zip(tiny_weights.named_matrices(), back.named_matrices()):
        assert n1 == n2 and a.tobytes() == b.tobytes()
    manifest = (tmp_path / "m.manifest.txt").read_text().splitlines()
    assert manifest[0] == "layers.0.w_q 16 16"
    assert manifest[-1] == "head 16 32"
    raw = path.read_bytes()
    assert raw[:8] == b"ADSPWTS\0"
    assert int.from_bytes(raw[8:16], "little") == 1
    assert int.from_bytes(raw[16:24], "little") == 4

    spath = adasp_io.save_sequence(tiny_seq, tmp_path / "s.bin")
    sback = adasp_io.load_sequence(spath)
    assert (sback.audio_len, sback.text_len) == (tiny_seq.audio_len, tiny_seq.text_len)
    assert sback.embeddings.tobytes() == tiny_seq.embeddings.tobytes()


def test_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "junk.bin"
    p.write_bytes(b"NOTAFILE" + bytes(64))
    with pytest.raises(adasp_io.FormatError, match="magic"):
        adasp_io.load_weights(p)


def test_config_validation():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(hidden_dim=10, num_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(num_layers=0)
