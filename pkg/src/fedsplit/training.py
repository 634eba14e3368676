"""Split LoRA training: the four-hop relay between client and server.

One training step moves four messages: the client sends the hidden states
from its front blocks, the server returns its trunk's output, the client
backpropagates its loss locally and sends the gradient at the server's
output, and the server returns the gradient at the cut so the client can
finish its own backward. Adapters on all three segments step with plain SGD.

Gaussian noise of standard deviation ``scale`` can be added to the hidden
states the client ships (default target) or, experimentally, to the relayed
gradient. With ``scale == 0`` every payload is passed through untouched, so a
zero-noise split run is bit-for-bit the monolithic run.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ProtocolError, ShapeError
from .model import (
    ModelConfig,
    SegmentModel,
    apply_sgd_step,
    grad_norm,
    init_parameter_set,
)
from .tensor import Tensor, reshape, softmax_cross_entropy
from .transport import MessageChannel
from .wire import CacheStepMsg, CommStats, GradMsg, HiddenStateMsg, MaskMeta

IGNORE_INDEX = -1

NOISE_TARGETS = ("none", "forward_hidden", "backward_grad")


@dataclass(frozen=True)
class NoiseConfig:
    """Gaussian perturbation of one relay hop.

    ``scale`` is the standard deviation. ``forward_hidden`` perturbs the
    client-to-server hidden states (the privacy mechanism); ``backward_grad``
    perturbs the client-to-server gradient instead (experimental; known to
    destabilize training).
    """

    scale: float = 0.0
    target: str = "forward_hidden"
    seed: int = 0

    def __post_init__(self):
        if self.scale < 0:
            raise ShapeError("noise scale must be non-negative")
        if self.target not in NOISE_TARGETS:
            raise ShapeError(f"noise target must be one of {NOISE_TARGETS}")


class NoiseSource:
    """Seeded stream of Gaussian draws; every call samples fresh noise."""

    def __init__(self, cfg: NoiseConfig):
        self.cfg = cfg
        self._rng = np.random.default_rng(cfg.seed)

    @property
    def active(self) -> bool:
        return self.cfg.scale > 0.0 and self.cfg.target != "none"

    def draw(self, shape: tuple[int, ...]) -> np.ndarray:
        return self._rng.normal(0.0, self.cfg.scale, size=shape)


def inject_noise(h: np.ndarray, source: NoiseSource | None) -> np.ndarray:
    """Add one fresh Gaussian draw to ``h``; identity when inactive.

    The zero-scale path returns ``h`` itself so disabled noise cannot change
    a single bit of the payload.
    """
    if source is None or not source.active:
        return h
    return h + source.draw(h.shape)


# ---------------------------------------------------------------------------
# loss


def sequence_loss(logits: Tensor, targets: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Token-mean cross-entropy over (batch, seq) targets; -1 marks ignored."""
    tgt = np.asarray(targets)
    if logits.data.ndim != 3:
        raise ShapeError(f"sequence logits must be 3-D, got {logits.data.shape}")
    if tgt.shape != logits.data.shape[:2]:
        raise ShapeError(
            f"targets shape {tgt.shape} does not match logits batch/seq {logits.data.shape[:2]}"
        )
    vocab = logits.data.shape[-1]
    flat = reshape(logits, (-1, vocab))
    loss, grad = softmax_cross_entropy(flat, tgt.reshape(-1), ignore_index=IGNORE_INDEX)
    return loss, grad.reshape(logits.data.shape)


# ---------------------------------------------------------------------------
# records


@dataclass
class TrainStepRecord:
    step: int
    client_id: int
    loss: float
    grad_norms: dict[str, float]
    comm: dict
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "step": self.step,
            "client_id": self.client_id,
            "loss": self.loss,
            "grad_norms": self.grad_norms,
            "comm": self.comm,
        }
        if self.extra:
            out["extra"] = self.extra
        return out


@dataclass
class Batch:
    tokens: np.ndarray  # (batch, seq) int
    targets: np.ndarray  # (batch, seq) int, IGNORE_INDEX where unsupervised
    pad_lens: tuple[int, ...]

    @property
    def mask_meta(self) -> MaskMeta:
        return MaskMeta(self.tokens.shape[1], self.pad_lens, self.tokens.shape[0])


# ---------------------------------------------------------------------------
# endpoints


class TrainingClient:
    """Owns the front and back segments plus one channel to the server."""

    def __init__(
        self,
        client_id: int,
        front: SegmentModel,
        back: SegmentModel,
        channel: MessageChannel,
        lr: float,
        noise: NoiseConfig | None = None,
    ):
        self.client_id = client_id
        self.front = front
        self.back = back
        self.channel = channel
        self.lr = lr
        self.noise = NoiseSource(noise or NoiseConfig(scale=0.0, target="none"))
        self._step_count = 0

    def next_step_id(self) -> int:
        sid = self._step_count
        self._step_count += 1
        return sid

    # -- four-hop relay, split into halves so batch strategies can interleave

    def begin_step(self, batch: Batch, step_id: int) -> HiddenStateMsg:
        """Front forward; returns the hidden-state message to ship."""
        h = self.front.forward(batch.tokens, pad_lens=batch.pad_lens)
        payload = h.data
        if self.noise.cfg.target == "forward_hidden":
            payload = inject_noise(payload, self.noise)
        return HiddenStateMsg(
            payload,
            batch.mask_meta,
            tuple(range(batch.tokens.shape[1])),
            step_id=step_id,
            client_id=self.client_id,
        )

    def middle_done(self, reply: HiddenStateMsg, batch: Batch, step_id: int) -> tuple[GradMsg, float]:
        """Back forward + local backward; returns the relay gradient and loss."""
        if reply.step_id != step_id or reply.client_id != self.client_id:
            raise ProtocolError(
                f"server replied for step ({reply.client_id}, {reply.step_id}), "
                f"expected ({self.client_id}, {step_id})"
            )
        logits = self.back.forward(reply.payload, pad_lens=batch.pad_lens)
        loss, _ = sequence_loss(logits, batch.targets)
        loss.backward()
        relay = self.back.take_input_grad()
        if self.noise.cfg.target == "backward_grad":
            relay = inject_noise(relay, self.noise)
        return GradMsg(relay, step_id=step_id, client_id=self.client_id), float(loss.data)

    def finish_step(self, grad_reply: GradMsg, step_id: int) -> dict[str, float]:
        """Front backward from the relayed gradient, then adapter updates."""
        if grad_reply.step_id != step_id or grad_reply.client_id != self.client_id:
            raise ProtocolError("gradient reply does not match the in-flight step")
        self.front.backward(grad_reply.payload)
        front_grads = self.front.collect_grads()
        back_grads = self.back.collect_grads()
        norms = {"front": grad_norm(front_grads), "back": grad_norm(back_grads)}
        apply_sgd_step(self.front.trainable_parameters(), front_grads, self.lr)
        apply_sgd_step(self.back.trainable_parameters(), back_grads, self.lr)
        return norms

    def train_step(self, batch: Batch, step: int) -> TrainStepRecord:
        """One full relay against the connected server."""
        before = self.channel.stats.snapshot()
        step_id = self.next_step_id()
        forward_msg = self.begin_step(batch, step_id)
        reply = self.channel.request(forward_msg)
        grad_msg, loss = self.middle_done(reply, batch, step_id)
        grad_reply = self.channel.request(grad_msg)
        norms = self.finish_step(grad_reply, step_id)
        comm = CommStats.delta(self.channel.stats.snapshot(), before)
        return TrainStepRecord(step, self.client_id, loss, norms, comm)


class TrainingServer:
    """Owns the middle trunk; serves forward/backward for one step at a time.

    ``observer`` (if set) sees every client hidden-state message after the
    reply has been dispatched, so passive observation cannot reorder or delay
    protocol traffic.
    """

    def __init__(self, middle: SegmentModel, lr: float, observer=None):
        self.middle = middle
        self.lr = lr
        self.observer = observer
        self.last_grad_norm = 0.0
        self._pending: tuple[int, int] | None = None
        self._lock = threading.Lock()

    def handle(self, msg) -> HiddenStateMsg | GradMsg:
        with self._lock:
            if isinstance(msg, HiddenStateMsg):
                return self._handle_forward(msg)
            if isinstance(msg, GradMsg):
                return self._handle_backward(msg)
            if isinstance(msg, CacheStepMsg):
                raise ProtocolError("cache-step message sent to a training server")
            raise ProtocolError(f"unexpected message type {type(msg).__name__}")

    def _handle_forward(self, msg: HiddenStateMsg) -> HiddenStateMsg:
        if self._pending is not None:
            raise ProtocolError(
                f"forward for ({msg.client_id}, {msg.step_id}) while step {self._pending} is in flight"
            )
        out = self.middle.forward(
            msg.payload, pad_lens=msg.mask_meta.pads, positions=msg.positions
        )
        self._pending = (msg.client_id, msg.step_id)
        return HiddenStateMsg(
            out.data, msg.mask_meta, msg.positions, step_id=msg.step_id, client_id=msg.client_id
        )

    def _handle_backward(self, msg: GradMsg) -> GradMsg:
        if self._pending != (msg.client_id, msg.step_id):
            raise ProtocolError(
                f"gradient for unknown step ({msg.client_id}, {msg.step_id}); "
                f"in flight: {self._pending}"
            )
        input_grad = self.middle.backward(msg.payload)
        grads = self.middle.collect_grads()
        self.last_grad_norm = grad_norm(grads)
        apply_sgd_step(self.middle.trainable_parameters(), grads, self.lr)
        self._pending = None
        return GradMsg(input_grad, step_id=msg.step_id, client_id=msg.client_id)

    def serve_channel(self, channel: MessageChannel, timeout: float | None = None) -> None:
        """Request/reply loop until the peer closes the channel."""
        from .errors import ChannelClosedError

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
            if self.observer is not None and isinstance(msg, HiddenStateMsg):
                self.observer.observe(msg)


# ---------------------------------------------------------------------------
# sequential orchestration


class SequentialTrainer:
    """Round-robin scheduling: one client completes its full step at a time.

    The server is driven by one thread per client channel; because the
    orchestrator serializes the clients, at most one thread is active at any
    moment and the schedule is deterministic.
    """

    def __init__(
        self,
        clients: Sequence[TrainingClient],
        server: TrainingServer,
        server_channels: Sequence[MessageChannel],
    ):
        if len(clients) != len(server_channels):
            raise ProtocolError("one server channel per client is required")
        self.clients = list(clients)
        self.server = server
        self.server_channels = list(server_channels)
        self._threads = [
            threading.Thread(target=server.serve_channel, args=(ch,), daemon=True)
            for ch in server_channels
        ]
        for t in self._threads:
            t.start()

    def run_round(self, batches: Sequence[Batch], round_index: int) -> list[TrainStepRecord]:
        if len(batches) != len(self.clients):
            raise ProtocolError(f"expected {len(self.clients)} batches, got {len(batches)}")
        records = []
        for client, batch in zip(self.clients, batches):
            t0 = time.perf_counter()
            rec = client.train_step(batch, step=round_index)
            rec.grad_norms["middle"] = self.server.last_grad_norm
            rec.extra["strategy"] = "sequential"
            rec.extra["elapsed_ms"] = (time.perf_counter() - t0) * 1e3
            records.append(rec)
        return records

    def run(
        self,
        batch_source: Callable[[int, int], Batch],
        rounds: int,
    ) -> list[TrainStepRecord]:
        """``batch_source(client_id, round_index)`` feeds each client-step."""
        records = []
        for r in range(rounds):
            batches = [batch_source(c.client_id, r) for c in self.clients]
            records.extend(self.run_round(batches, r))
        return records

    def shutdown(self) -> None:
        for client in self.clients:
            client.channel.close()
        for t in self._threads:
            t.join(timeout=5.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def run_sequential_round(
    clients: Sequence[TrainingClient],
    server: TrainingServer,
    server_channels: Sequence[MessageChannel],
    batches: Sequence[Batch],
    round_index: int = 0,
) -> list[TrainStepRecord]:
    """One round-robin pass over the clients (convenience wrapper)."""
    trainer = SequentialTrainer(clients, server, server_channels)
    try:
        return trainer.run_round(batches, round_index)
    finally:
        trainer.shutdown()


# ---------------------------------------------------------------------------
# monolithic oracle


def train_monolithic(
    model: SegmentModel,
    batch_source: Callable[[int], Batch],
    steps: int,
    lr: float,
) -> list[float]:
    """Unsplit LoRA training loop used as the equivalence oracle.

    Runs the same forward, loss, backward, and SGD arithmetic as a one-client
    split session with zero noise, so its loss trace is the bitwise reference.
    """
    losses = []
    for step in range(steps):
        batch = batch_source(step)
        logits = model.forward(batch.tokens, pad_lens=batch.pad_lens)
        loss, _ = sequence_loss(logits, batch.targets)
        loss.backward()
        model.discard_pending()
        grads = model.collect_grads()
        apply_sgd_step(model.trainable_parameters(), grads, lr)
        losses.append(float(loss.data))
    return losses


# ---------------------------------------------------------------------------
# noise propagation probe


def noise_gradient_propagation_check(
    config: ModelConfig,
    deltas: Sequence[float],
    draws: int = 20,
    seed: int = 0,
    batch: int = 2,
    seq_len: int = 16,
) -> dict:
    """Measure how hidden-state noise perturbs the last block's weight gradient.

    Splits the model before its final block, runs the prefix once per trial,
    then compares the gradient of the final block's down-projection weight
    with and without Gaussian noise on the prefix output. Returns per-delta
    mean perturbation norms; zero noise must give exactly zero perturbation,
    and the mean must grow with the noise scale.
    """
    params = init_parameter_set(config, None, seed)
    prefix = SegmentModel("front", config, None, params, 0, config.num_blocks - 1)
    tail = SegmentModel(
        "back", config, None, params, config.num_blocks - 1, 1, trainable_base=True
    )
    target_name = f"blocks.{config.num_blocks - 1}.mlp.down.weight"

    rng = np.random.default_rng(seed + 1)
    tokens = rng.integers(0, config.vocab_size, size=(batch, seq_len))
    targets = rng.integers(0, config.vocab_size, size=(batch, seq_len))

    with T.no_grad():
        h_clean = prefix.forward(tokens).data

    def weight_grad(hidden: np.ndarray) -> np.ndarray:
        logits = tail.forward(hidden)
        loss, _ = sequence_loss(logits, targets)
        loss.backward()
        tail.discard_pending()
        grads = tail.collect_grads(zero=True)
        return grads[target_name]

    g_clean = weight_grad(h_clean)
    noise_rng = np.random.default_rng(seed + 2)
    results = []
    for delta in deltas:
        norms = []
        for _ in range(draws):
            if delta == 0.0:
                noisy = h_clean
            else:
                noisy = h_clean + noise_rng.normal(0.0, delta, size=h_clean.shape)
            g_noisy = weight_grad(noisy)
            norms.append(float(np.linalg.norm(g_noisy - g_clean)))
        results.append(float(np.mean(norms)))
    means = dict(zip([float(d) for d in deltas], results))
    ordered = [means[float(d)] for d in sorted(float(d) for d in deltas)]
    return {
        "deltas": [float(d) for d in deltas],
        "mean_grad_perturbation": results,
        "draws": draws,
        "monotone_in_delta": all(a <= b + 1e-15 for a, b in zip(ordered, ordered[1:])),
        "target_weight": target_name,
    }


# ---------------------------------------------------------------------------
# convenience wiring


def connect_pair(
    front: SegmentModel,
    middle: SegmentModel,
    back: SegmentModel,
    client_id: int,
    lr: float,
    noise: NoiseConfig | None = None,
    transport: str = "loopback",
    server: TrainingServer | None = None,
) -> tuple[TrainingClient, TrainingServer, MessageChannel]:
    """Wire one client and (optionally shared) server over a fresh channel."""
    from .transport import LoopbackChannel, tcp_pair

    if transport == "loopback":
        server_end, client_end = LoopbackChannel.pair()
    elif transport == "tcp":
        server_end, client_end = tcp_pair()
    else:
        raise ShapeError(f"unknown transport {transport!r}")
    server_channel = MessageChannel(server_end)
    client_channel = MessageChannel(client_end)
    if server is None:
        server = TrainingServer(middle, lr)
    client = TrainingClient(client_id, front, back, client_channel, lr, noise)
    return client, server, server_channel
