"""Frame transports: an in-process loopback and a TCP socket pair.

Both move the exact bytes produced by the wire codec, so a conversation is
byte-identical whichever transport carries it. ``MessageChannel`` layers
encode/decode and traffic accounting on top of either.
"""

from __future__ import annotations

import queue
import socket
import threading

from .errors import ChannelClosedError, ProtocolError
from .wire import HEADER, CommStats, Message, decode_message, encode_message, parse_header

_CLOSE = object()


class LoopbackChannel:
    """One endpoint of an in-process bidirectional frame queue pair."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    @staticmethod
    def pair() -> tuple["LoopbackChannel", "LoopbackChannel"]:
        a_to_b: queue.Queue = queue.Queue()
        b_to_a: queue.Queue = queue.Queue()
        return LoopbackChannel(b_to_a, a_to_b), LoopbackChannel(a_to_b, b_to_a)

    def send_frame(self, frame: bytes) -> None:
        if self._closed:
            raise ChannelClosedError("send on a closed channel")
        self._outbox.put(frame)

    def recv_frame(self, timeout: float | None = None) -> bytes:
        if self._closed:
            raise ChannelClosedError("recv on a closed channel")
        try:
            item = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise ProtocolError(f"recv timed out after {timeout}s") from None
        if item is _CLOSE:
            self._closed = True
            raise ChannelClosedError("peer closed the channel")
        return item

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSE)


class TcpChannel:
    """One endpoint of a TCP connection carrying length-prefixed frames."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._closed = False
        self._send_lock = threading.Lock()

    def send_frame(self, frame: bytes) -> None:
        if self._closed:
            raise ChannelClosedError("send on a closed channel")
        with self._send_lock:
            try:
                self._sock.sendall(frame)
            except OSError as exc:
                raise ChannelClosedError(f"socket send failed: {exc}") from exc

    def _read_exact(self, n: int, deadline_msg: str) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            try:
                chunk = self._sock.recv(remaining)
            except OSError as exc:
                raise ChannelClosedError(f"socket recv failed: {exc}") from exc
            if not chunk:
                raise ChannelClosedError(deadline_msg)
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def recv_frame(self, timeout: float | None = None) -> bytes:
        if self._closed:
            raise ChannelClosedError("recv on a closed channel")
        self._sock.settimeout(timeout)
        try:
            header = self._read_exact(HEADER.size, "peer closed the connection")
            _, body_len = parse_header(header)
            body = self._read_exact(body_len, "connection closed mid-frame")
        except socket.timeout:
            raise ProtocolError(f"recv timed out after {timeout}s") from None
        return header + body

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            try:
                self._sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self._sock.close()


def tcp_listen(host: str = "127.0.0.1", port: int = 0) -> tuple[socket.socket, int]:
    """Bind a listener; returns it and the bound port (useful with port 0)."""
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    sock.bind((host, port))
    sock.listen()
    return sock, sock.getsockname()[1]


def tcp_accept(listener: socket.socket, timeout: float | None = None) -> TcpChannel:
    listener.settimeout(timeout)
    try:
        conn, _ = listener.accept()
    except socket.timeout:
        raise ProtocolError("accept timed out") from None
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return TcpChannel(conn)


def tcp_connect(host: str, port: int, timeout: float | None = 10.0) -> TcpChannel:
    sock = socket.create_connection((host, port), timeout=timeout)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return TcpChannel(sock)


DEFAULT_ENDPOINT: tuple[str, int] = ("127.0.0.1", 0)


def set_default_endpoint(host: str, port: int) -> None:
    """Override where new in-process TCP pairs bind (port 0 picks one)."""
    global DEFAULT_ENDPOINT
    DEFAULT_ENDPOINT = (host, int(port))


def tcp_pair(host: str | None = None, port: int | None = None) -> tuple[TcpChannel, TcpChannel]:
    """A connected (server-side, client-side) channel pair.

    Defaults come from ``DEFAULT_ENDPOINT``; a fixed port works for pairs
    created one after another, since each listener closes before the next
    binds.
    """
    if host is None:
        host = DEFAULT_ENDPOINT[0]
    if port is None:
        port = DEFAULT_ENDPOINT[1]
    listener, port = tcp_listen(host, port)
    result: dict = {}

    def _accept():
        result["server"] = tcp_accept(listener, timeout=10.0)

    t = threading.Thread(target=_accept)
    t.start()
    client = tcp_connect(host, port)
    t.join(timeout=10.0)
    listener.close()
    if "server" not in result:
        raise ProtocolError("tcp pair accept did not complete")
    return result["server"], client


class MessageChannel:
    """Encode/decode layer over a frame channel with traffic accounting.

    ``stats`` accumulates per-class counters for this endpoint. With
    ``record_frames`` the raw bytes of every frame sent and received are kept
    for audits (frame logs must match across transports and must not change
    when passive observers are attached elsewhere).
    """

    def __init__(
        self,
        frames,
        stats: CommStats | None = None,
        scalar_width: int = 8,
        record_frames: bool = False,
    ):
        self._frames = frames
        self.stats = stats if stats is not None else CommStats()
        self.scalar_width = scalar_width
        self.sent_log: list[bytes] | None = [] if record_frames else None
        self.recv_log: list[bytes] | None = [] if record_frames else None

    def send(self, msg: Message) -> None:
        frame = encode_message(msg, self.scalar_width)
        self._frames.send_frame(frame)
        self.stats.record_send(msg.wire_class, len(frame))
        if self.sent_log is not None:
            self.sent_log.append(frame)

    def recv(self, timeout: float | None = None) -> Message:
        frame = self._frames.recv_frame(timeout)
        msg = decode_message(frame)
        self.stats.record_recv(msg.wire_class, len(frame))
        if self.recv_log is not None:
            self.recv_log.append(frame)
        return msg

    def request(self, msg: Message, timeout: float | None = None) -> Message:
        """Send and wait for the matching reply; counts one round trip."""
        self.send(msg)
        reply = self.recv(timeout)
        self.stats.record_round_trip()
        return reply

    def close(self) -> None:
        self._frames.close()
