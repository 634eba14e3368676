"""Multi-client scheduling: round-robin, batched concatenation, hierarchy.

Three ways to let several clients share one server trunk:

- ``sequential``: one client finishes its whole step before the next starts
  (the plain training engine drives this).
- ``client_batch``: every step the server gathers one hidden-state message
  per client, concatenates them along the batch axis, and runs a single
  trunk forward and a single trunk backward for the group. Results are
  sliced back out in client-id order, so arrival order cannot change any
  number. The trunk's weight gradient is then, by linearity, the sum of the
  gradients the same clients would have produced solo.
- ``server_hierarchical``: each client trains against its own trunk replica
  concurrently; every ``sync_interval`` steps the replicas' adapters are
  averaged and redistributed, FedAvg style.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import (
    BarrierTimeoutError,
    BatchIncompatibilityError,
    ConfigError,
    ProtocolError,
)
from .model import (
    LoraConfig,
    ModelConfig,
    PartitionSpec,
    SegmentModel,
    apply_sgd_step,
    build_partitioned,
    fedavg_merge,
    grad_norm,
)
from .training import (
    IGNORE_INDEX,
    Batch,
    NoiseConfig,
    TrainStepRecord,
    TrainingClient,
    TrainingServer,
)
from .transport import LoopbackChannel, MessageChannel, tcp_pair
from .wire import GradMsg, HiddenStateMsg

MODES = ("sequential", "client_batch", "server_hierarchical")


@dataclass(frozen=True)
class StrategyConfig:
    """How the client population shares the server trunk."""

    mode: str = "sequential"
    num_clients: int = 1
    sync_interval: int = 10
    merge_weights: tuple[float, ...] | None = None
    merge_clients: bool = False
    barrier_timeout: float = 30.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.num_clients < 1:
            raise ConfigError("num_clients must be at least 1")
        if self.sync_interval < 1:
            raise ConfigError("sync_interval must be at least 1")
        if self.barrier_timeout <= 0:
            raise ConfigError("barrier_timeout must be positive")
        if self.merge_weights is not None:
            w = tuple(float(x) for x in self.merge_weights)
            if len(w) != self.num_clients:
                raise ConfigError(f"got {len(w)} merge weights for {self.num_clients} clients")
            if any(x < 0 for x in w) or sum(w) <= 0:
                raise ConfigError("merge weights must be non-negative with a positive sum")
            object.__setattr__(self, "merge_weights", w)


# ---------------------------------------------------------------------------
# barrier


@dataclass
class BarrierState:
    """Accumulates one message per expected client before a batched phase."""

    expected: tuple[int, ...]
    pending: dict = field(default_factory=dict)
    arrival_order: list = field(default_factory=list)

    def add(self, msg) -> None:
        cid = msg.client_id
        if cid not in self.expected:
            raise ProtocolError(f"message from unexpected client {cid}")
        if cid in self.pending:
            raise ProtocolError(f"client {cid} sent twice within one barrier")
        self.pending[cid] = msg
        self.arrival_order.append(cid)

    @property
    def released(self) -> bool:
        return len(self.pending) == len(self.expected)

    def take(self) -> list:
        """The collected messages in client-id order; valid once released."""
        if not self.released:
            missing = sorted(set(self.expected) - set(self.pending))
            raise ProtocolError(f"barrier not released; waiting on clients {missing}")
        return [self.pending[cid] for cid in sorted(self.expected)]


def collect_barrier(channels: dict[int, MessageChannel], timeout: float) -> BarrierState:
    """Receive one message from every client channel.

    Waits on the channels in client-id order; each receive blocks until that
    client's message is queued, so the outcome is independent of true arrival
    order. A client silent past the shared deadline raises a barrier timeout
    naming it.
    """
    state = BarrierState(tuple(sorted(channels)))
    deadline = time.monotonic() + timeout
    for cid in state.expected:
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            raise BarrierTimeoutError(f"client {cid} missed the barrier after {timeout}s")
        try:
            msg = channels[cid].recv(timeout=remaining)
        except BarrierTimeoutError:
            raise
        except ProtocolError:
            raise BarrierTimeoutError(
                f"client {cid} missed the barrier after {timeout}s"
            ) from None
        if msg.client_id != cid:
            raise ProtocolError(
                f"channel for client {cid} delivered a message from client {msg.client_id}"
            )
        state.add(msg)
    return state


# ---------------------------------------------------------------------------
# client-batch concatenation


class ClientBatchServer:
    """Runs the trunk once per step over all clients' concatenated batches."""

    def __init__(self, middle: SegmentModel, lr: float):
        self.middle = middle
        self.lr = lr
        self.last_grad_norm = 0.0
        self.last_grads: dict[str, np.ndarray] = {}
        self._pending: dict[int, tuple[int, slice]] | None = None

    def batch_forward(self, msgs: Sequence[HiddenStateMsg]) -> list[HiddenStateMsg]:
        """One trunk forward over the client-id-ordered concatenation.

        Every message must agree on sequence length (and therefore rotary
        positions); heterogeneous groups are rejected rather than silently
        re-padded so each reply slice stays exactly the solo-forward result.
        """
        if not msgs:
            raise ProtocolError("batch forward needs at least one message")
        if self._pending is not None:
            raise ProtocolError("batch forward while a step is in flight")
        ordered = sorted(msgs, key=lambda m: m.client_id)
        ids = [m.client_id for m in ordered]
        if len(set(ids)) != len(ids):
            raise ProtocolError(f"duplicate client ids in batch: {ids}")
        head = ordered[0]
        for m in ordered[1:]:
            if m.payload.shape[1] != head.payload.shape[1]:
                raise BatchIncompatibilityError(
                    f"client {m.client_id} has seq_len {m.payload.shape[1]} but "
                    f"client {head.client_id} has {head.payload.shape[1]}"
                )
            if m.payload.shape[2:] != head.payload.shape[2:]:
                raise BatchIncompatibilityError(
                    f"client {m.client_id} hidden shape {m.payload.shape[2:]} does not "
                    f"match {head.payload.shape[2:]}"
                )
            if m.positions != head.positions:
                raise BatchIncompatibilityError("clients disagree on rotary positions")
        payload = np.concatenate([m.payload for m in ordered], axis=0)
        pads = tuple(p for m in ordered for p in m.mask_meta.pads)
        out = self.middle.forward(payload, pad_lens=pads, positions=head.positions)
        pending: dict[int, tuple[int, slice]] = {}
        replies = []
        start = 0
        for m in ordered:
            rows = slice(start, start + m.payload.shape[0])
            start = rows.stop
            pending[m.client_id] = (m.step_id, rows)
            replies.append(
                HiddenStateMsg(
                    out.data[rows].copy(),
                    m.mask_meta,
                    m.positions,
                    step_id=m.step_id,
                    client_id=m.client_id,
                )
            )
        self._pending = pending
        return replies

    def batch_backward(self, grad_msgs: Sequence[GradMsg]) -> list[GradMsg]:
        """Concatenated trunk backward, SGD step, per-client gradient slices.

        Gradient accumulation is linear over batch rows, so the trunk weight
        gradient of this single pass equals the sum of the per-client solo
        gradients; ``last_grads`` keeps a copy for inspection.
        """
        if self._pending is None:
            raise ProtocolError("batch backward before batch forward")
        ordered = sorted(grad_msgs, key=lambda m: m.client_id)
        got = [m.client_id for m in ordered]
        expected = sorted(self._pending)
        if got != expected:
            raise BarrierTimeoutError(
                f"gradient group mismatch: expected clients {expected}, got {got}"
            )
        parts = []
        for m in ordered:
            step_id, rows = self._pending[m.client_id]
            if m.step_id != step_id:
                raise ProtocolError(
                    f"client {m.client_id} sent a gradient for step {m.step_id}, "
                    f"expected {step_id}"
                )
            if m.payload.shape[0] != rows.stop - rows.start:
                raise ProtocolError(
                    f"client {m.client_id} gradient has {m.payload.shape[0]} rows, "
                    f"expected {rows.stop - rows.start}"
                )
            parts.append(m.payload)
        input_grad = self.middle.backward(np.concatenate(parts, axis=0))
        grads = self.middle.collect_grads()
        self.last_grads = {n: g.copy() for n, g in grads.items()}
        self.last_grad_norm = grad_norm(grads)
        apply_sgd_step(self.middle.trainable_parameters(), grads, self.lr)
        replies = []
        for m in ordered:
            rows = self._pending[m.client_id][1]
            replies.append(GradMsg(input_grad[rows].copy(), step_id=m.step_id, client_id=m.client_id))
        self._pending = None
        return replies


def client_batch_step(server: ClientBatchServer, msgs: Sequence[HiddenStateMsg]) -> list[HiddenStateMsg]:
    """Forward half of one batched step; see ``ClientBatchServer.batch_forward``."""
    return server.batch_forward(msgs)


def client_batch_backward(server: ClientBatchServer, grad_msgs: Sequence[GradMsg]) -> list[GradMsg]:
    """Backward half of one batched step; see ``ClientBatchServer.batch_backward``."""
    return server.batch_backward(grad_msgs)


def align_batches(batches: Sequence[Batch], pad_id: int = 0) -> list[Batch]:
    """Left-pad every batch to the group's longest sequence length.

    Client-batch concatenation requires a uniform seq_len; this normalizer
    runs on the client side before shipping, never inside the server, so the
    server-side slice-equivalence property stays exact.
    """
    if not batches:
        return []
    target = max(b.tokens.shape[1] for b in batches)
    out = []
    for b in batches:
        extra = target - b.tokens.shape[1]
        if extra == 0:
            out.append(b)
            continue
        rows = b.tokens.shape[0]
        tokens = np.concatenate(
            [np.full((rows, extra), pad_id, dtype=b.tokens.dtype), b.tokens], axis=1
        )
        targets = np.concatenate(
            [np.full((rows, extra), IGNORE_INDEX, dtype=b.targets.dtype), b.targets], axis=1
        )
        out.append(Batch(tokens, targets, tuple(p + extra for p in b.pad_lens)))
    return out


class ClientBatchTrainer:
    """Drives M concurrent client steps against one batched trunk.

    Client threads run the ordinary four-hop step; the coordinator gathers
    one message per client at each of the two barriers, runs the batched
    trunk pass, and routes each slice back to its owner.
    """

    def __init__(
        self,
        clients: Sequence[TrainingClient],
        server: ClientBatchServer,
        server_channels: Sequence[MessageChannel],
        barrier_timeout: float = 30.0,
    ):
        if len(clients) != len(server_channels):
            raise ProtocolError("one server channel per client is required")
        ids = [c.client_id for c in clients]
        if len(set(ids)) != len(ids):
            raise ProtocolError(f"duplicate client ids: {ids}")
        self.clients = list(clients)
        self.server = server
        self.channels = {c.client_id: ch for c, ch in zip(clients, server_channels)}
        self.barrier_timeout = barrier_timeout

    def run_round(self, batches: Sequence[Batch], round_index: int) -> list[TrainStepRecord]:
        if len(batches) != len(self.clients):
            raise ProtocolError(f"expected {len(self.clients)} batches, got {len(batches)}")
        t0 = time.perf_counter()
        results: list[TrainStepRecord | None] = [None] * len(self.clients)
        failures: list[Exception] = []

        def drive(i: int) -> None:
            try:
                results[i] = self.clients[i].train_step(batches[i], step=round_index)
            except Exception as exc:
                failures.append(exc)

        threads = [
            threading.Thread(target=drive, args=(i,), daemon=True)
            for i in range(len(self.clients))
        ]
        for t in threads:
            t.start()
        try:
            forward = collect_barrier(self.channels, self.barrier_timeout)
            for reply in self.server.batch_forward(forward.take()):
                self.channels[reply.client_id].send(reply)
            backward = collect_barrier(self.channels, self.barrier_timeout)
            for reply in self.server.batch_backward(backward.take()):
                self.channels[reply.client_id].send(reply)
        except Exception:
            for ch in self.channels.values():
                ch.close()
            for t in threads:
                t.join(timeout=5.0)
            raise
        for t in threads:
            t.join(timeout=self.barrier_timeout)
        if failures:
            raise failures[0]
        elapsed = (time.perf_counter() - t0) * 1e3
        records = []
        for rec in results:
            if rec is None:
                raise ProtocolError("a client thread finished without producing a record")
            rec.grad_norms["middle"] = self.server.last_grad_norm
            rec.extra["strategy"] = "client_batch"
            rec.extra["elapsed_ms"] = elapsed
            records.append(rec)
        return records

    def run(
        self, batch_source: Callable[[int, int], Batch], rounds: int
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
        for ch in self.channels.values():
            ch.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


# ---------------------------------------------------------------------------
# hierarchical sub-servers


@dataclass
class MergeRecord:
    """What one synchronization point averaged and what it left out."""

    step: int
    merged_clients: tuple[int, ...]
    excluded_clients: tuple[int, ...]
    weights: tuple[float, ...]

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "merged_clients": list(self.merged_clients),
            "excluded_clients": list(self.excluded_clients),
            "weights": list(self.weights),
        }


@dataclass
class _Pipeline:
    client: TrainingClient
    server: TrainingServer
    channel: MessageChannel
    weight: float


class HierarchicalTrainer:
    """M isolated client/trunk-replica pipelines with periodic averaging.

    Between merges every pipeline is fully independent, so its parameters
    are a pure function of its data shard and the last merge point. At each
    synchronization the surviving replicas' adapters are averaged (weighted)
    and written back to every survivor and to the central reference trunk;
    client adapters can optionally be averaged the same way. A pipeline
    whose phase raised is excluded from that and later merges and reported
    in the merge log.
    """

    def __init__(
        self,
        central: SegmentModel,
        clients: Sequence[TrainingClient],
        sub_servers: Sequence[TrainingServer],
        server_channels: Sequence[MessageChannel],
        config: StrategyConfig,
    ):
        n = len(clients)
        if n != config.num_clients:
            raise ConfigError(f"strategy expects {config.num_clients} clients, got {n}")
        if len(sub_servers) != n or len(server_channels) != n:
            raise ProtocolError("one sub-server and one channel per client are required")
        ids = [c.client_id for c in clients]
        if len(set(ids)) != len(ids):
            raise ProtocolError(f"duplicate client ids: {ids}")
        reference = central.state_dict()
        for client, server in zip(clients, sub_servers):
            state = server.middle.state_dict()
            if set(state) != set(reference) or any(
                not np.array_equal(state[k], reference[k]) for k in reference
            ):
                raise ProtocolError(
                    f"sub-server for client {client.client_id} does not start from "
                    "the central parameters"
                )
        weights = config.merge_weights or tuple(1.0 for _ in clients)
        self.central = central
        self.config = config
        self.pipelines = [
            _Pipeline(c, s, ch, w)
            for c, s, ch, w in zip(clients, sub_servers, server_channels, weights)
        ]
        self.failed: dict[int, str] = {}
        self.merge_log: list[MergeRecord] = []
        self._threads = [
            threading.Thread(target=p.server.serve_channel, args=(p.channel,), daemon=True)
            for p in self.pipelines
        ]
        for t in self._threads:
            t.start()

    def _live(self) -> list[_Pipeline]:
        return [p for p in self.pipelines if p.client.client_id not in self.failed]

    def run_phase(
        self,
        batch_source: Callable[[int, int], Batch],
        start_step: int,
        steps: int,
    ) -> list[TrainStepRecord]:
        """Run every live pipeline for ``steps`` local steps, concurrently."""
        collected: dict[int, list[TrainStepRecord]] = {}
        errors: dict[int, str] = {}

        def drive(pipe: _Pipeline) -> None:
            cid = pipe.client.client_id
            recs: list[TrainStepRecord] = []
            collected[cid] = recs
            try:
                for s in range(steps):
                    step = start_step + s
                    t0 = time.perf_counter()
                    rec = pipe.client.train_step(batch_source(cid, step), step=step)
                    rec.grad_norms["middle"] = pipe.server.last_grad_norm
                    rec.extra["strategy"] = "server_hierarchical"
                    rec.extra["elapsed_ms"] = (time.perf_counter() - t0) * 1e3
                    recs.append(rec)
            except Exception as exc:
                errors[cid] = f"{type(exc).__name__}: {exc}"

        threads = [threading.Thread(target=drive, args=(p,), daemon=True) for p in self._live()]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        self.failed.update(errors)
        records = [rec for recs in collected.values() for rec in recs]
        records.sort(key=lambda r: (r.step, r.client_id))
        return records

    def merge(self, at_step: int) -> MergeRecord:
        """Average the survivors' adapters and redistribute the result."""
        live = self._live()
        if not live:
            raise ProtocolError("every pipeline has failed; nothing to merge")
        weights = [p.weight for p in live]
        merged = fedavg_merge([p.server.middle for p in live], weights)
        state = merged.state_dict()
        self.central.load_adapter_state(state)
        for p in live:
            p.server.middle.load_adapter_state(state)
        if self.config.merge_clients:
            front_state = fedavg_merge([p.client.front for p in live], weights).state_dict()
            back_state = fedavg_merge([p.client.back for p in live], weights).state_dict()
            for p in live:
                p.client.front.load_adapter_state(front_state)
                p.client.back.load_adapter_state(back_state)
        total = sum(weights)
        record = MergeRecord(
            step=at_step,
            merged_clients=tuple(p.client.client_id for p in live),
            excluded_clients=tuple(sorted(self.failed)),
            weights=tuple(w / total for w in weights),
        )
        self.merge_log.append(record)
        return record

    def run(
        self, batch_source: Callable[[int, int], Batch], steps: int
    ) -> list[TrainStepRecord]:
        """Alternate sync_interval-long phases with merges for ``steps`` steps."""
        records = []
        done = 0
        while done < steps:
            span = min(self.config.sync_interval, steps - done)
            records.extend(self.run_phase(batch_source, done, span))
            done += span
            self.merge(done)
        return records

    def shutdown(self) -> None:
        for p in self.pipelines:
            p.client.channel.close()
            p.channel.close()
        for t in self._threads:
            t.join(timeout=5.0)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def run_hierarchical(
    central: SegmentModel,
    sub_servers: Sequence[TrainingServer],
    clients: Sequence[TrainingClient],
    server_channels: Sequence[MessageChannel],
    batch_source: Callable[[int, int], Batch],
    steps: int,
    sync_interval: int = 10,
    merge_weights: Sequence[float] | None = None,
    merge_clients: bool = False,
) -> tuple[list[TrainStepRecord], list[MergeRecord]]:
    """One-shot hierarchical session; returns (step records, merge log)."""
    config = StrategyConfig(
        mode="server_hierarchical",
        num_clients=len(clients),
        sync_interval=sync_interval,
        merge_weights=tuple(merge_weights) if merge_weights is not None else None,
        merge_clients=merge_clients,
    )
    trainer = HierarchicalTrainer(central, clients, sub_servers, server_channels, config)
    try:
        records = trainer.run(batch_source, steps)
        return records, list(trainer.merge_log)
    finally:
        trainer.shutdown()


# ---------------------------------------------------------------------------
# session wiring


def _channel_pair(transport: str) -> tuple:
    if transport == "loopback":
        return LoopbackChannel.pair()
    if transport == "tcp":
        return tcp_pair()
    raise ConfigError(f"unknown transport {transport!r}")


def _client_noise(noise: NoiseConfig | None, client_id: int) -> NoiseConfig | None:
    """Give each client its own noise stream while keeping one config knob."""
    if noise is None:
        return None
    return replace(noise, seed=noise.seed + client_id)


def build_shared_trunk_session(
    config: ModelConfig,
    partition: PartitionSpec,
    num_clients: int,
    lr: float,
    lora: LoraConfig | None = LoraConfig(),
    seed: int = 0,
    noise: NoiseConfig | None = None,
    transport: str = "loopback",
    record_frames: bool = False,
) -> tuple[list[TrainingClient], SegmentModel, list[MessageChannel]]:
    """M clients with private front/back copies sharing one trunk instance.

    Every client starts from the identical seeded parameter set; the copies
    diverge as the clients train. Used by the sequential and client-batch
    modes; the caller wraps the returned trunk in the server of its choice.
    """
    front, middle, back = build_partitioned(config, partition, lora, seed)
    clients = []
    server_channels = []
    for cid in range(num_clients):
        server_end, client_end = _channel_pair(transport)
        clients.append(
            TrainingClient(
                cid,
                front.clone(),
                back.clone(),
                MessageChannel(client_end),
                lr,
                _client_noise(noise, cid),
            )
        )
        server_channels.append(MessageChannel(server_end, record_frames=record_frames))
    return clients, middle, server_channels


def build_hierarchical_session(
    config: ModelConfig,
    partition: PartitionSpec,
    num_clients: int,
    lr: float,
    lora: LoraConfig | None = LoraConfig(),
    seed: int = 0,
    noise: NoiseConfig | None = None,
    transport: str = "loopback",
    record_frames: bool = False,
) -> tuple[SegmentModel, list[TrainingClient], list[TrainingServer], list[MessageChannel]]:
    """A central trunk plus one fully private pipeline per client."""
    front, central, back = build_partitioned(config, partition, lora, seed)
    clients = []
    sub_servers = []
    server_channels = []
    for cid in range(num_clients):
        server_end, client_end = _channel_pair(transport)
        clients.append(
            TrainingClient(
                cid,
                front.clone(),
                back.clone(),
                MessageChannel(client_end),
                lr,
                _client_noise(noise, cid),
            )
        )
        sub_servers.append(TrainingServer(central.clone(), lr))
        server_channels.append(MessageChannel(server_end, record_frames=record_frames))
    return central, clients, sub_servers, server_channels
