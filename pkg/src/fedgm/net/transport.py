"""Message transports: paired in-process queues and framed TCP sockets.

Both transports move the same encoded frame bytes, so an experiment's outputs
cannot depend on which one carried them.  The in-process pair exists for
deterministic tests; TCP is the deployment path (plaintext framing, TLS left
as an extension point on the socket layer).
"""

from __future__ import annotations

import queue
import socket
import struct
from typing import Protocol

from .framing import TruncatedFrameError, decode_frame, encode_frame

DEFAULT_PORT = 7431
_RECV_TIMEOUT = 120.0


class ConnectionClosed(ConnectionError):
    """Peer went away before a full frame arrived."""


class Connection(Protocol):
    def send(self, msg: dict) -> None: ...
    def recv(self) -> dict: ...
    def close(self) -> None: ...


class InProcConn:
    """One endpoint of a queue pair; frames are encoded exactly as on TCP."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def send(self, msg: dict) -> None:
        if self._closed:
            raise ConnectionClosed("connection closed")
        self._outbox.put(encode_frame(msg))

    def send_bytes(self, frame: bytes) -> None:
        if self._closed:
            raise ConnectionClosed("connection closed")
        self._outbox.put(frame)

    def recv_bytes(self) -> bytes:
        try:
            data = self._inbox.get(timeout=_RECV_TIMEOUT)
        except queue.Empty as exc:
            raise ConnectionClosed("recv timed out") from exc
        if data is None:
            raise ConnectionClosed("peer closed")
        return data

    def recv(self) -> dict:
        return decode_frame(self.recv_bytes())

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(None)


def inproc_pair() -> tuple[InProcConn, InProcConn]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return InProcConn(b_to_a, a_to_b), InProcConn(a_to_b, b_to_a)


class TcpConn:
    """Framed messages over a connected socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.sock.settimeout(_RECV_TIMEOUT)

    def send(self, msg: dict) -> None:
        self.send_bytes(encode_frame(msg))

    def send_bytes(self, frame: bytes) -> None:
        try:
            self.sock.sendall(frame)
        except OSError as exc:
            raise ConnectionClosed(str(exc)) from exc

    def _recv_exact(self, n: int) -> bytes:
        chunks = []
        got = 0
        while got < n:
            try:
                chunk = self.sock.recv(n - got)
            except socket.timeout as exc:
                raise ConnectionClosed("recv timed out") from exc
            except OSError as exc:
                raise ConnectionClosed(str(exc)) from exc
            if not chunk:
                raise ConnectionClosed("peer closed mid-frame" if got else "peer closed")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def recv_bytes(self) -> bytes:
        header = self._recv_exact(4)
        (length,) = struct.unpack(">I", header)
        return header + self._recv_exact(length)

    def recv(self) -> dict:
        return decode_frame(self.recv_bytes())

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def connect_tcp(host: str, port: int) -> TcpConn:
    sock = socket.create_connection((host, port), timeout=_RECV_TIMEOUT)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return TcpConn(sock)
