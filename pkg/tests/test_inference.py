"""Split-model generation with mirrored caches versus full recompute."""

import numpy as np
import pytest

from fedsplit.errors import (
    ChannelClosedError,
    ConfigError,
    ContextOverflowError,
    ProtocolError,
    ShapeError,
)
from fedsplit.inference import (
    GenerationConfig,
    GenerationResult,
    InferenceServer,
    InferenceStack,
    KVCache,
    generate,
)
from fedsplit.model import (
    ModelConfig,
    PartitionSpec,
    build_monolithic,
    build_partitioned,
)
from fedsplit.tensor import no_grad
from fedsplit.wire import CacheStepMsg, HiddenStateMsg, MaskMeta

CFG = ModelConfig(
    vocab_size=32, hidden_size=16, num_heads=2, num_blocks=3, mlp_hidden=24, max_context=48
)
PART = PartitionSpec(1, 1, 1)


def build_stack(seed=0, **kwargs):
    front, middle, back = build_partitioned(CFG, PART, seed=seed)
    return InferenceStack(front, middle, back, **kwargs)


def random_prompt(rng, length):
    return [int(t) for t in rng.integers(0, CFG.vocab_size, size=length)]


def manual_greedy(session, prompt, steps):
    logits = session.prefill(prompt)
    tokens = []
    for _ in range(steps):
        tok = int(np.argmax(logits))
        tokens.append(tok)
        logits = session.decode_step(tok)
    return tokens


# ---------------------------------------------------------------------------
# cache mechanics


def test_cache_append_accumulates_positions():
    cache = KVCache(2)
    assert cache.length == 0
    entries = cache.entries_for(2)
    k = np.ones((1, 2, 3, 4))
    for entry in entries:
        full_k, full_v = entry.append(k, 2 * k)
        assert full_k.shape == (1, 2, 3, 4)
    assert cache.length == 3
    full_k, full_v = entries[0].append(k[:, :, :1], k[:, :, :1])
    assert full_k.shape == (1, 2, 4, 4)
    np.testing.assert_array_equal(full_v[:, :, :3], 2 * k)
    with pytest.raises(ProtocolError):
        cache.length  # blocks now disagree
    cache.clear()
    assert cache.length == 0


def test_cache_rejects_wrong_block_count_and_shapes():
    cache = KVCache(2)
    with pytest.raises(ProtocolError):
        cache.entries_for(3)
    entry = cache.entries_for(2)[0]
    with pytest.raises(ShapeError):
        entry.append(np.ones((1, 2, 1, 4)), np.ones((1, 2, 1, 5)))
    entry.append(np.ones((1, 2, 1, 4)), np.ones((1, 2, 1, 4)))
    with pytest.raises(ShapeError):
        entry.append(np.ones((1, 3, 1, 4)), np.ones((1, 3, 1, 4)))


def test_generation_config_validation():
    with pytest.raises(ConfigError):
        GenerationConfig(max_new_tokens=0)
    with pytest.raises(ConfigError):
        GenerationConfig(mode="beam")
    with pytest.raises(ConfigError):
        GenerationConfig(mode="temperature", temperature=0.0)
    assert GenerationConfig(mode="temperature", temperature=0.7).temperature == 0.7


# ---------------------------------------------------------------------------
# prefill


def test_prefill_matches_monolithic_last_logits_exactly():
    prompt = random_prompt(np.random.default_rng(1), 9)
    mono = build_monolithic(CFG, seed=0)
    with no_grad():
        reference = mono.forward(np.asarray([prompt])).data[0, -1]
    with build_stack(seed=0) as stack:
        logits = stack.session.prefill(prompt)
    np.testing.assert_array_equal(logits, reference)


def test_prefill_populates_both_cache_sides():
    prompt = random_prompt(np.random.default_rng(2), 7)
    with build_stack() as stack:
        stack.session.prefill(prompt)
        assert stack.session.front_cache.length == 7
        assert stack.session.back_cache.length == 7
        assert stack.server.session_length(stack.session.session_id) == 7


def test_prefill_comm_is_one_hidden_exchange():
    prompt = random_prompt(np.random.default_rng(3), 6)
    with build_stack() as stack:
        stack.session.prefill(prompt)
        stats = stack.session.channel.stats.snapshot()
    hidden = stats["classes"]["hidden_state"]
    assert hidden["sent_count"] == 1 and hidden["recv_count"] == 1
    assert hidden["sent_bytes"] == hidden["recv_bytes"]
    payload_bytes = 1 * 6 * CFG.hidden_size * 8
    assert payload_bytes < hidden["sent_bytes"] < 2 * payload_bytes
    assert stats["classes"]["cache_step"]["sent_count"] == 0


def test_prefill_rejects_overlong_and_invalid_prompts():
    with build_stack() as stack:
        with pytest.raises(ContextOverflowError):
            stack.session.prefill([1] * (CFG.max_context + 1))
        with pytest.raises(ShapeError):
            stack.session.prefill([])
        with pytest.raises(ShapeError):
            stack.session.prefill([0, CFG.vocab_size])
    with build_stack() as stack:
        stack.session.prefill([1, 2, 3])
        with pytest.raises(ProtocolError):
            stack.session.prefill([1, 2, 3])


def test_decode_before_prefill_rejected():
    with build_stack() as stack:
        with pytest.raises(ProtocolError):
            stack.session.decode_step(1)


# ---------------------------------------------------------------------------
# decode


def test_decode_extends_caches_by_one_on_both_sides():
    prompt = random_prompt(np.random.default_rng(4), 5)
    with build_stack() as stack:
        logits = stack.session.prefill(prompt)
        for step in range(3):
            tok = int(np.argmax(logits))
            logits = stack.session.decode_step(tok)
            expected = 5 + step + 1
            assert stack.session.front_cache.length == expected
            assert stack.session.back_cache.length == expected
            assert stack.server.session_length(stack.session.session_id) == expected


def test_cached_greedy_matches_uncached_token_for_token():
    rng = np.random.default_rng(5)
    cfg = GenerationConfig(max_new_tokens=16)
    for trial in range(10):
        prompt = random_prompt(rng, int(rng.integers(3, 12)))
        with build_stack(seed=0, use_cache=True) as cached:
            with_cache = cached.session.generate(prompt, cfg)
        with build_stack(seed=0, use_cache=False) as plain:
            without_cache = plain.session.generate(prompt, cfg)
        assert with_cache.ok and without_cache.ok
        assert with_cache.tokens == without_cache.tokens
        assert len(with_cache.tokens) == 16


def test_greedy_generation_is_deterministic():
    prompt = [3, 1, 4, 1, 5]
    cfg = GenerationConfig(max_new_tokens=8)
    runs = []
    for _ in range(2):
        with build_stack(seed=2) as stack:
            runs.append(generate(stack.session, prompt, cfg).tokens)
    assert runs[0] == runs[1]


def test_temperature_sampling_is_seed_deterministic():
    prompt = [3, 1, 4]
    cfg = GenerationConfig(max_new_tokens=8, mode="temperature", temperature=0.8, seed=11)
    runs = []
    for _ in range(2):
        with build_stack(seed=2) as stack:
            runs.append(stack.session.generate(prompt, cfg).tokens)
    assert runs[0] == runs[1]


def test_single_new_token_runs_exactly_one_decode_step():
    prompt = [1, 2, 3, 4]
    with build_stack() as stack:
        result = stack.session.generate(prompt, GenerationConfig(max_new_tokens=1))
        assert result.ok and len(result.tokens) == 1
        stats = stack.session.channel.stats.snapshot()
        assert stats["classes"]["cache_step"]["sent_count"] == 1
        assert stack.server.session_length(stack.session.session_id) == len(prompt) + 1


# ---------------------------------------------------------------------------
# scripted-weight oracle: blocks reduced to identity, head a shifted match


def scripted_stack(use_cache=True):
    cfg = ModelConfig(
        vocab_size=12, hidden_size=16, num_heads=2, num_blocks=3, mlp_hidden=8, max_context=32
    )
    front, middle, back = build_partitioned(cfg, PartitionSpec(1, 1, 1), lora=None, seed=0)
    for seg in (front, middle, back):
        for name, p in seg.named_parameters().items():
            if name.endswith(("attn.out.weight", "mlp.down.weight")):
                p.data = np.zeros_like(p.data)
    embed = np.zeros((12, 16))
    embed[np.arange(12), np.arange(12)] = 1.0
    front.embed.data = embed
    head = np.zeros((12, 16))
    for j in range(12):
        head[j, (j - 1) % 12] = 1.0
    back.head.data = head
    return InferenceStack(front, middle, back, use_cache=use_cache)


def test_scripted_model_counts_upward():
    with scripted_stack() as stack:
        result = stack.session.generate([5], GenerationConfig(max_new_tokens=8))
    assert result.tokens == [6, 7, 8, 9, 10, 11, 0, 1]


def test_stop_token_halts_before_emitting_it():
    with scripted_stack() as stack:
        result = stack.session.generate([5], GenerationConfig(max_new_tokens=8, stop_token=9))
    assert result.ok
    assert result.tokens == [6, 7, 8]
    with scripted_stack(use_cache=False) as stack:
        uncached = stack.session.generate([5], GenerationConfig(max_new_tokens=8, stop_token=9))
    assert uncached.tokens == [6, 7, 8]


# ---------------------------------------------------------------------------
# protocol violations


def test_server_rejects_desynced_and_unknown_sessions():
    middle = build_partitioned(CFG, PART, seed=0)[1]
    server = InferenceServer(middle)
    hidden = np.zeros((1, 4, CFG.hidden_size))
    with pytest.raises(ProtocolError, match="unknown session"):
        server.handle(CacheStepMsg(hidden[:, :1], position=0, session_id=9, step_id=0))
    server.handle(
        HiddenStateMsg(hidden, MaskMeta(4, 0, 1), (0, 1, 2, 3), step_id=9, client_id=0)
    )
    with pytest.raises(ProtocolError, match="desync"):
        server.handle(CacheStepMsg(hidden[:, :1], position=7, session_id=9, step_id=1))
    with pytest.raises(ProtocolError, match="one position"):
        server.handle(CacheStepMsg(hidden[:, :2], position=4, session_id=9, step_id=1))
    reply = server.handle(CacheStepMsg(hidden[:, :1], position=4, session_id=9, step_id=1))
    assert reply.payload.shape == (1, 1, CFG.hidden_size)
    server.drop_session(9)
    with pytest.raises(ProtocolError):
        server.session_length(9)


def test_server_rejects_oversized_prefill_and_foreign_messages():
    small = ModelConfig(
        vocab_size=32, hidden_size=16, num_heads=2, num_blocks=3, mlp_hidden=24, max_context=5
    )
    middle = build_partitioned(small, PART, seed=0)[1]
    server = InferenceServer(middle)
    hidden = np.zeros((1, 6, small.hidden_size))
    with pytest.raises(ContextOverflowError):
        server.handle(
            HiddenStateMsg(hidden, MaskMeta(6, 0, 1), tuple(range(6)), step_id=1, client_id=0)
        )
    from fedsplit.wire import GradMsg

    with pytest.raises(ProtocolError):
        server.handle(GradMsg(hidden, step_id=0, client_id=0))


def test_decode_overflow_returns_partial_result_with_error():
    small = ModelConfig(
        vocab_size=32, hidden_size=16, num_heads=2, num_blocks=3, mlp_hidden=24, max_context=6
    )
    front, middle, back = build_partitioned(small, PART, seed=0)
    with InferenceStack(front, middle, back) as stack:
        result = stack.session.generate([1, 2, 3, 4, 5], GenerationConfig(max_new_tokens=8))
    assert not result.ok
    assert "max context" in result.error
    assert len(result.tokens) == 2


def test_transport_failure_returns_partial_result_with_error():
    prompt = [2, 7, 1]
    with build_stack(seed=3) as reference_stack:
        clean = reference_stack.session.generate(prompt, GenerationConfig(max_new_tokens=6))
    with build_stack(seed=3) as stack:
        session = stack.session
        real_request = session.channel.request
        calls = []

        def flaky(msg, timeout=None):
            if len(calls) >= 2:
                raise ChannelClosedError("link dropped")
            calls.append(1)
            return real_request(msg, timeout)

        session.channel.request = flaky
        result = session.generate(prompt, GenerationConfig(max_new_tokens=6))
    assert not result.ok
    assert "link dropped" in result.error
    assert result.tokens == clean.tokens[:2]


# ---------------------------------------------------------------------------
# communication profile


def per_step_bytes(stack, prompt, steps):
    session = stack.session
    logits = session.prefill(prompt)
    sizes = []
    for _ in range(steps):
        before = session.channel.stats.snapshot()["totals"]
        logits = session.decode_step(int(np.argmax(logits)))
        after = session.channel.stats.snapshot()["totals"]
        sizes.append(after["sent_bytes"] + after["recv_bytes"] - before["sent_bytes"] - before["recv_bytes"])
    return sizes


def test_cached_decode_bytes_independent_of_context_length():
    rng = np.random.default_rng(8)
    with build_stack() as short_stack:
        short = per_step_bytes(short_stack, random_prompt(rng, 6), 4)
    with build_stack() as long_stack:
        long = per_step_bytes(long_stack, random_prompt(rng, 24), 4)
    assert len(set(short)) == 1
    assert short == long


def test_uncached_decode_bytes_grow_with_context():
    rng = np.random.default_rng(9)
    prompt = random_prompt(rng, 8)
    with build_stack(use_cache=False) as stack:
        sizes = per_step_bytes(stack, prompt, 4)
    assert sizes == sorted(sizes) and sizes[0] < sizes[-1]
    per_position = np.diff(sizes)
    assert len(set(per_position.tolist())) == 1
    with build_stack() as cached_stack:
        cached = per_step_bytes(cached_stack, prompt, 4)
    assert max(cached) < min(sizes)


# ---------------------------------------------------------------------------
# concurrent sessions


def test_concurrent_sessions_share_a_server_without_mixing_caches():
    front, middle, back = build_partitioned(CFG, PART, seed=0)
    server = InferenceServer(middle)
    prompts = ([4, 9, 2], [17, 3, 8, 11])
    solo = []
    for prompt in prompts:
        with build_stack(seed=0) as stack:
            solo.append(manual_greedy(stack.session, prompt, 5))
    with InferenceStack(front, None, back, server=server) as s1:
        with InferenceStack(front, None, back, server=server) as s2:
            logits = [s1.session.prefill(prompts[0]), s2.session.prefill(prompts[1])]
            tokens = [[], []]
            sessions = [s1.session, s2.session]
            for _ in range(5):
                for i in (0, 1):
                    tok = int(np.argmax(logits[i]))
                    tokens[i].append(tok)
                    logits[i] = sessions[i].decode_step(tok)
    assert tokens[0] == solo[0]
    assert tokens[1] == solo[1]


def test_tcp_generation_matches_loopback():
    prompt = [6, 2, 9, 14]
    cfg = GenerationConfig(max_new_tokens=6)
    with build_stack(seed=4) as loop_stack:
        loop = loop_stack.session.generate(prompt, cfg)
    with build_stack(seed=4, transport="tcp") as tcp_stack:
        tcp = tcp_stack.session.generate(prompt, cfg)
    assert loop.ok and tcp.ok
    assert loop.tokens == tcp.tokens


def test_generation_result_flags():
    assert GenerationResult([1, 2]).ok
    assert not GenerationResult([1], error="boom").ok
