import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphkv.costs import cost_model
from graphkv.errors import CapacityError, DomainError, SealedSegmentError
from graphkv.lm_core import (
    BOS,
    EOS,
    GRAPH_SLOT,
    VOCAB_SIZE,
    KVCache,
    LmConfig,
    Tokenizer,
    ToyLm,
    detokenize,
    extend,
    greedy_decode,
    prefill,
    tokenize,
)

TOK = Tokenizer()


def _tokens(seed: int, n: int) -> list[int]:
    return [BOS] + [int(t) for t in np.random.default_rng(seed).integers(0, 256, n - 1)]


def test_tokenize_examples():
    assert tokenize(TOK, "") == [BOS]
    assert len(tokenize(TOK, "ab")) == 3


@given(st.text())
def test_byte_round_trip(text):
    assert detokenize(TOK, tokenize(TOK, text)) == text


def test_decode_skips_specials():
    assert TOK.decode([BOS, 104, 105, EOS]) == "hi"


def test_prefill_single_token(small_lm):
    cache, logits = prefill(small_lm, [BOS])
    assert cache.token_count == 1 and logits.shape == (VOCAB_SIZE,)


def test_prefill_deterministic(small_lm):
    toks = _tokens(0, 40)
    _, a = prefill(small_lm, toks)
    _, b = prefill(small_lm, toks)
    assert np.array_equal(a, b)
    _, c = prefill(ToyLm(small_lm.config), toks)
    assert np.array_equal(a, c)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 200), st.data())
def test_split_equivalence(small_lm, n, data):
    toks = _tokens(n, n)
    cut = data.draw(st.integers(1, n - 1))
    full, lf = prefill(small_lm, toks)
    part, _ = prefill(small_lm, toks[:cut])
    part.seal()
    fork = part.fork()
    _, ls = extend(small_lm, fork, toks[cut:])
    assert np.abs(lf - ls).max() <= 1e-5
    assert greedy_decode(small_lm, full, 8).token_ids == greedy_decode(small_lm, fork, 8).token_ids


def test_causality(small_lm):
    toks = _tokens(3, 60)
    changed = toks[:30] + [(t + 1) % 256 for t in toks[30:]]
    _, a = prefill(small_lm, toks[:30])
    c1, _ = prefill(small_lm, toks)
    c2, _ = prefill(small_lm, changed)
    for layer in range(small_lm.config.layers):
        assert np.array_equal(c1.keys(layer)[:, :30], c2.keys(layer)[:, :30])
    _, b = prefill(small_lm, changed[:30])
    assert np.array_equal(a, b)


def test_capacity(small_lm):
    cap = small_lm.config.max_seq
    with pytest.raises(CapacityError):
        prefill(small_lm, _tokens(1, cap + 1))
    cache, _ = prefill(small_lm, _tokens(1, cap - 2))
    with pytest.raises(CapacityError):
        extend(small_lm, cache, [1, 2, 3])
    out = greedy_decode(small_lm, cache, 10)
    assert cache.token_count <= cap and len(out.token_ids) <= 3


def test_extend_zero_tokens(small_lm):
    cache, logits = prefill(small_lm, _tokens(2, 10))
    before = cache.nbytes()
    _, again = extend(small_lm, cache, [])
    assert np.array_equal(again, logits) and cache.nbytes() == before and cache.token_count == 10


def test_shared_prefix_is_immutable(small_lm):
    prefix, _ = prefill(small_lm, _tokens(4, 50))
    prefix.seal()
    digest = prefix.prefix_digest()
    a, b = prefix.fork(), prefix.fork()
    extend(small_lm, a, [65, 66])
    extend(small_lm, b, [67, 68, 69])
    assert a.suffix_tokens == [65, 66] and b.suffix_tokens == [67, 68, 69]
    assert prefix.prefix_digest() == digest and prefix.suffix_tokens == []


def test_sealed_prefix_rejects_writes(small_lm):
    cache, _ = prefill(small_lm, _tokens(5, 8))
    cache.seal()
    with pytest.raises(SealedSegmentError):
        small_lm.forward(cache, [1], segment="prefix")
    with pytest.raises(ValueError):
        cache.keys(0)[0, 0, 0] = 1.0


def test_fork_requires_seal_and_release_blocks(small_lm):
    cache, _ = prefill(small_lm, _tokens(6, 8))
    with pytest.raises(SealedSegmentError):
        cache.fork()
    cache.seal()
    cache.release()
    with pytest.raises(SealedSegmentError):
        cache.fork()


def test_drop_suffix_restores_prefix_state(small_lm):
    cache, logits = prefill(small_lm, _tokens(7, 12))
    cache.seal()
    fork = cache.fork()
    extend(small_lm, fork, [1, 2])
    fork.drop_suffix()
    assert fork.token_count == 12 and np.array_equal(fork.last_logits, logits)


def test_max_new_zero(small_lm):
    cache, _ = prefill(small_lm, _tokens(8, 5))
    assert greedy_decode(small_lm, cache, 0).token_ids == []


def test_argmax_tie_lowest_id(small_lm):
    cache, _ = prefill(small_lm, [BOS])
    flat = -cache.last_logits + 5.0

    def bias(step, generated):
        return flat if step == 0 else None

    out = greedy_decode(small_lm, cache, 1, bias)
    assert out.token_ids == [0]


def test_never_emits_specials(small_lm):
    cache, _ = prefill(small_lm, [BOS])
    bias = np.zeros(VOCAB_SIZE)
    bias[[BOS, GRAPH_SLOT]] = 1e9
    out = greedy_decode(small_lm, cache, 4, lambda step, gen: bias)
    assert BOS not in out.token_ids and GRAPH_SLOT not in out.token_ids


def test_stops_at_eos(small_lm):
    cache, _ = prefill(small_lm, [BOS])
    bias = np.zeros(VOCAB_SIZE)
    bias[EOS] = 1e9
    out = greedy_decode(small_lm, cache, 10, lambda step, gen: bias)
    assert out.token_ids == [EOS] and out.text == ""


def test_timestamps_strictly_increase(small_lm):
    cache, _ = prefill(small_lm, [BOS])
    out = greedy_decode(small_lm, cache, 6, clock=lambda: 5)
    assert all(b > a for a, b in zip(out.timestamps_ns, out.timestamps_ns[1:]))


def test_soft_prefix_slot(small_lm):
    soft = np.ones(small_lm.config.soft_dim)
    cache, logits = prefill(small_lm, [BOS, 65], soft_prefix=soft)
    assert cache.prefix_tokens[0] == GRAPH_SLOT and cache.token_count == 3
    _, plain = prefill(small_lm, [BOS, 65])
    assert not np.allclose(logits, plain)
    with pytest.raises(DomainError):
        prefill(small_lm, [BOS], soft_prefix=np.ones(3))


def test_cost_accounting(small_lm):
    cache, _ = prefill(small_lm, _tokens(9, 20))
    cache.seal()
    fork = cache.fork()
    extend(small_lm, fork, [1, 2, 3])
    shape = small_lm.shape
    assert cache.prefill_cost == cost_model(0, 20, shape)
    assert fork.prefill_cost == cost_model(20, 3, shape)
    assert cost_model(0, 20, shape) + cost_model(20, 3, shape) == cost_model(0, 23, shape)


def test_config_validation():
    with pytest.raises(DomainError):
        LmConfig(dim=30, heads=4)


def test_empty_prefill_rejected(small_lm):
    with pytest.raises(DomainError):
        prefill(small_lm, [])
    with pytest.raises(DomainError):
        greedy_decode(small_lm, KVCache(small_lm.config), 3)
