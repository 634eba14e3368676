"""Autoregressive generation across the split with mirrored key/value caches.

A generation session prefills once (one full-prompt hidden-state exchange)
and then ships exactly one token's hidden state per decode step in each
direction, while both sides extend block-local key/value caches. Turning the
cache off makes every step recompute the whole prefix, which reproduces the
same tokens at a per-step cost that grows with context length; the cached
and uncached paths exist side by side so that equivalence is checkable.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import (
    ChannelClosedError,
    ConfigError,
    ContextOverflowError,
    ProtocolError,
    ShapeError,
)
from .model import SegmentModel
from .transport import MessageChannel
from .wire import CacheStepMsg, HiddenStateMsg, MaskMeta

_SESSION_IDS = itertools.count(1)


class _CacheEntry:
    """Append-only post-rotary key/value history for one block."""

    __slots__ = ("k", "v")

    def __init__(self):
        self.k: np.ndarray | None = None
        self.v: np.ndarray | None = None

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[2]

    def append(self, k_new: np.ndarray, v_new: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if k_new.shape != v_new.shape:
            raise ShapeError(f"key shape {k_new.shape} != value shape {v_new.shape}")
        if self.k is None:
            self.k = k_new.copy()
            self.v = v_new.copy()
        else:
            if k_new.shape[:2] != self.k.shape[:2] or k_new.shape[3] != self.k.shape[3]:
                raise ShapeError(
                    f"cache append shape {k_new.shape} does not extend {self.k.shape}"
                )
            self.k = np.concatenate([self.k, k_new], axis=2)
            self.v = np.concatenate([self.v, v_new], axis=2)
        return self.k, self.v


class KVCache:
    """Per-block key/value history owned by one side of one session."""

    def __init__(self, num_blocks: int):
        if num_blocks < 1:
            raise ShapeError("a cache needs at least one block")
        self._entries = [_CacheEntry() for _ in range(num_blocks)]

    def entries_for(self, num_blocks: int) -> list[_CacheEntry]:
        if num_blocks != len(self._entries):
            raise ProtocolError(
                f"cache built for {len(self._entries)} blocks used with {num_blocks}"
            )
        return list(self._entries)

    @property
    def length(self) -> int:
        lengths = {entry.length for entry in self._entries}
        if len(lengths) != 1:
            raise ProtocolError(f"cache blocks disagree on length: {sorted(lengths)}")
        return lengths.pop()

    def clear(self) -> None:
        self._entries = [_CacheEntry() for _ in self._entries]


@dataclass(frozen=True)
class GenerationConfig:
    """Decode policy for one generation call."""

    max_new_tokens: int = 16
    mode: str = "greedy"
    temperature: float = 1.0
    stop_token: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be at least 1")
        if self.mode not in ("greedy", "temperature"):
            raise ConfigError(f"decode mode must be greedy or temperature, got {self.mode!r}")
        if self.mode == "temperature" and not self.temperature > 0:
            raise ConfigError("temperature must be positive when sampling")


@dataclass
class GenerationResult:
    """Generated tokens plus an error flag for truncated runs."""

    tokens: list[int]
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _select_token(logits: np.ndarray, cfg: GenerationConfig, rng: np.random.Generator) -> int:
    if cfg.mode == "greedy":
        return int(np.argmax(logits))
    scaled = logits / cfg.temperature
    scaled = scaled - np.max(scaled)
    probs = np.exp(scaled)
    probs /= probs.sum()
    return int(rng.choice(len(probs), p=probs))


class InferenceServer:
    """Serves prefill and decode for any number of concurrent sessions.

    A hidden-state message runs the trunk over the whole payload and
    (re)initializes the cache for its session id, so uncached full-prefix
    clients and cached prefills share one entry point. A cache-step message
    extends an existing session by exactly one position; a position that
    does not equal the session's cache length is a desync and is rejected
    before any state changes.
    """

    def __init__(self, middle: SegmentModel):
        self.middle = middle
        self._sessions: dict[int, KVCache] = {}
        self._lock = threading.Lock()

    def session_length(self, session_id: int) -> int:
        with self._lock:
            if session_id not in self._sessions:
                raise ProtocolError(f"unknown session {session_id}")
            return self._sessions[session_id].length

    def handle(self, msg) -> HiddenStateMsg | CacheStepMsg:
        with self._lock:
            if isinstance(msg, HiddenStateMsg):
                return self._handle_prefill(msg)
            if isinstance(msg, CacheStepMsg):
                return self._handle_decode(msg)
            raise ProtocolError(
                f"inference server cannot handle {type(msg).__name__} messages"
            )

    def _handle_prefill(self, msg: HiddenStateMsg) -> HiddenStateMsg:
        seq_len = msg.payload.shape[1]
        if seq_len > self.middle.config.max_context:
            raise ContextOverflowError(
                f"prefill of {seq_len} positions exceeds max context "
                f"{self.middle.config.max_context}"
            )
        cache = KVCache(len(self.middle.blocks))
        with T.no_grad():
            out = self.middle.forward(
                msg.payload,
                pad_lens=msg.mask_meta.pads,
                positions=msg.positions,
                cache=cache,
            )
        self._sessions[msg.step_id] = cache
        return HiddenStateMsg(
            out.data, msg.mask_meta, msg.positions, step_id=msg.step_id, client_id=msg.client_id
        )

    def _handle_decode(self, msg: CacheStepMsg) -> CacheStepMsg:
        if msg.session_id not in self._sessions:
            raise ProtocolError(f"decode step for unknown session {msg.session_id}")
        cache = self._sessions[msg.session_id]
        if msg.position != cache.length:
            raise ProtocolError(
                f"cache desync in session {msg.session_id}: step position {msg.position}, "
                f"server cache length {cache.length}"
            )
        if msg.position >= self.middle.config.max_context:
            raise ContextOverflowError(
                f"decode position {msg.position} exceeds max context "
                f"{self.middle.config.max_context}"
            )
        if msg.payload.shape[1] != 1:
            raise ProtocolError(
                f"decode payload must cover exactly one position, got {msg.payload.shape}"
            )
        with T.no_grad():
            out = self.middle.forward(
                msg.payload, pad_lens=0, positions=[msg.position], cache=cache
            )
        return CacheStepMsg(
            out.data, position=msg.position, session_id=msg.session_id, step_id=msg.step_id
        )

    def drop_session(self, session_id: int) -> None:
        with self._lock:
            self._sessions.pop(session_id, None)

    def serve_channel(self, channel: MessageChannel, timeout: float | None = None) -> None:
        """Request/reply loop until the peer closes the channel."""
        while True:
            try:
                msg = channel.recv(timeout)
            except ChannelClosedError:
                return
            try:
                reply = self.handle(msg)
            except Exception:
                channel.close()
                raise
            channel.send(reply)


class GenerationSession:
    """Client half of one generation: the front and back segments plus caches."""

    def __init__(
        self,
        front: SegmentModel,
        back: SegmentModel,
        channel: MessageChannel,
        use_cache: bool = True,
        session_id: int | None = None,
        client_id: int = 0,
    ):
        self.front = front
        self.back = back
        self.channel = channel
        self.use_cache = use_cache
        self.session_id = next(_SESSION_IDS) if session_id is None else session_id
        self.client_id = client_id
        self.front_cache = KVCache(len(front.blocks)) if use_cache else None
        self.back_cache = KVCache(len(back.blocks)) if use_cache else None
        self.tokens: list[int] = []
        self._steps = itertools.count()
        self._prefilled = False

    @property
    def max_context(self) -> int:
        return self.front.config.max_context

    def _check_prompt(self, prompt: Sequence[int]) -> list[int]:
        toks = [int(t) for t in prompt]
        if not toks:
            raise ShapeError("prompt must contain at least one token")
        vocab = self.front.config.vocab_size
        bad = [t for t in toks if not 0 <= t < vocab]
        if bad:
            raise ShapeError(f"prompt tokens {bad[:4]} outside vocabulary of {vocab}")
        if len(toks) > self.max_context:
            raise ContextOverflowError(
                f"prompt of {len(toks)} tokens exceeds max context {self.max_context}"
            )
        return toks

    def _full_pass(self, tokens: list[int]) -> np.ndarray:
        """Uncached path: recompute the whole prefix and keep no state."""
        ids = np.asarray([tokens])
        positions = tuple(range(len(tokens)))
        mask = MaskMeta(len(tokens), 0, 1)
        with T.no_grad():
            h = self.front.forward(ids)
        reply = self.channel.request(
            HiddenStateMsg(h.data, mask, positions, step_id=self.session_id, client_id=self.client_id)
        )
        if reply.step_id != self.session_id:
            raise ProtocolError("prefix reply does not belong to this session")
        with T.no_grad():
            logits = self.back.forward(reply.payload)
        return logits.data[0, -1]

    def prefill(self, prompt: Sequence[int]) -> np.ndarray:
        """Full-prompt pass; returns the logits at the last position."""
        toks = self._check_prompt(prompt)
        if self._prefilled:
            raise ProtocolError("session already prefilled; use a fresh session")
        self._prefilled = True
        self.tokens = list(toks)
        if not self.use_cache:
            return self._full_pass(self.tokens)
        ids = np.asarray([toks])
        positions = tuple(range(len(toks)))
        mask = MaskMeta(len(toks), 0, 1)
        with T.no_grad():
            h = self.front.forward(ids, cache=self.front_cache)
        reply = self.channel.request(
            HiddenStateMsg(h.data, mask, positions, step_id=self.session_id, client_id=self.client_id)
        )
        if reply.step_id != self.session_id:
            raise ProtocolError("prefill reply does not belong to this session")
        with T.no_grad():
            logits = self.back.forward(reply.payload, cache=self.back_cache)
        return logits.data[0, -1]

    def decode_step(self, last_token: int) -> np.ndarray:
        """Feed one token; returns the logits predicting the next one."""
        if not self._prefilled:
            raise ProtocolError("decode before prefill")
        position = len(self.tokens)
        if position >= self.max_context:
            raise ContextOverflowError(
                f"decode position {position} exceeds max context {self.max_context}"
            )
        self.tokens.append(int(last_token))
        if not self.use_cache:
            return self._full_pass(self.tokens)
        ids = np.asarray([[int(last_token)]])
        with T.no_grad():
            h = self.front.forward(ids, positions=[position], cache=self.front_cache)
        msg = CacheStepMsg(
            h.data, position=position, session_id=self.session_id, step_id=next(self._steps)
        )
        reply = self.channel.request(msg)
        if reply.session_id != self.session_id or reply.position != position:
            raise ProtocolError(
                f"decode reply for session {reply.session_id} position {reply.position}; "
                f"expected session {self.session_id} position {position}"
            )
        with T.no_grad():
            logits = self.back.forward(reply.payload, positions=[position], cache=self.back_cache)
        return logits.data[0, -1]

    def generate(self, prompt: Sequence[int], cfg: GenerationConfig) -> GenerationResult:
        """Prefill then decode until the stop token or the token budget.

        The stop token is never emitted. Transport failures and protocol
        violations mid-run return whatever was generated so far with the
        error recorded instead of raising.
        """
        toks = self._check_prompt(prompt)
        rng = np.random.default_rng(cfg.seed)
        out: list[int] = []
        try:
            logits = self.prefill(toks)
            while len(out) < cfg.max_new_tokens:
                token = _select_token(logits, cfg, rng)
                if cfg.stop_token is not None and token == cfg.stop_token:
                    break
                out.append(token)
                logits = self.decode_step(token)
        except (ChannelClosedError, ProtocolError) as exc:
            return GenerationResult(out, error=f"{type(exc).__name__}: {exc}")
        return GenerationResult(out)


def prefill(session: GenerationSession, prompt: Sequence[int]) -> np.ndarray:
    """Module-level convenience alias for ``GenerationSession.prefill``."""
    return session.prefill(prompt)


def decode_step(session: GenerationSession, last_token: int) -> np.ndarray:
    """Module-level convenience alias for ``GenerationSession.decode_step``."""
    return session.decode_step(last_token)


def generate(session: GenerationSession, prompt: Sequence[int], cfg: GenerationConfig) -> GenerationResult:
    """Module-level convenience alias for ``GenerationSession.generate``."""
    return session.generate(prompt, cfg)


class InferenceStack:
    """A wired client session, its server, and the serving thread."""

    def __init__(
        self,
        front: SegmentModel,
        middle: SegmentModel | None,
        back: SegmentModel,
        transport: str = "loopback",
        use_cache: bool = True,
        session_id: int | None = None,
        server: InferenceServer | None = None,
        record_frames: bool = False,
    ):
        from .transport import LoopbackChannel, tcp_pair

        if server is None:
            if middle is None:
                raise ConfigError("either a trunk segment or a server is required")
            server = InferenceServer(middle)
        if transport == "loopback":
            server_end, client_end = LoopbackChannel.pair()
        elif transport == "tcp":
            server_end, client_end = tcp_pair()
        else:
            raise ConfigError(f"unknown transport {transport!r}")
        self.server = server
        self.server_channel = MessageChannel(server_end, record_frames=record_frames)
        self.session = GenerationSession(
            front,
            back,
            MessageChannel(client_end, record_frames=record_frames),
            use_cache=use_cache,
            session_id=session_id,
        )
        self._thread = threading.Thread(
            target=server.serve_channel, args=(self.server_channel,), daemon=True
        )
        self._thread.start()

    def close(self) -> None:
        self.session.channel.close()
        self.server_channel.close()
        self._thread.join(timeout=5.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
