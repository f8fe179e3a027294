"""Message transports: in-process queues and loopback TCP sockets.

Both present the same server-side interface (send_to_client / recv_from_client)
and account bytes with the same canonical encoding, so byte counters, traces,
and numerical results are identical across transports. The in-process variant
steps each client agent inline (single-threaded round robin); the socket
variant runs one thread per client speaking newline-delimited records.

Trace records are appended in the server's event order: a send when the
server emits it, a reply when the server collects it.
"""

from __future__ import annotations

import socket
import threading
from collections import deque
from typing import Callable, Optional

from .errors import ProtocolDesync
from .messages import Message, WireSchema, decode, encode


class ByteCounters:
    def __init__(self, num_clients: int):
        self.to_client = {k: 0 for k in range(1, num_clients + 1)}
        self.from_client = {k: 0 for k in range(1, num_clients + 1)}
        self.messages = 0

    @property
    def total_to_clients(self) -> int:
        return sum(self.to_client.values())

    @property
    def total_from_clients(self) -> int:
        return sum(self.from_client.values())

    @property
    def total(self) -> int:
        return self.total_to_clients + self.total_from_clients

    def snapshot(self) -> dict:
        return {
            "messages": self.messages,
            "bytes_to_clients": self.total_to_clients,
            "bytes_from_clients": self.total_from_clients,
            "bytes_total": self.total,
        }


class BaseTransport:
    def __init__(self, schema: WireSchema, num_clients: int,
                 trace_path: Optional[str] = None, byte_accounting: bool = True):
        self.schema = schema
        self.num_clients = num_clients
        self.counters = ByteCounters(num_clients)
        self.byte_accounting = byte_accounting
        self._trace_file = open(trace_path, "w") if trace_path else None
        self.drop_rules: list[Callable[[int, Message], bool]] = []

    def inject_drop(self, rule: Callable[[int, Message], bool]) -> None:
        """Drop the first server->client send matching `rule` (fault testing)."""
        self.drop_rules.append(rule)

    def _record(self, k: int, msg: Message, outgoing: bool, line: str | None = None) -> None:
        self.counters.messages += 1
        if not (self.byte_accounting or self._trace_file):
            return
        if line is None:
            line = encode(msg)
        if self.byte_accounting:
            nbytes = len(line.encode("utf-8"))
            if outgoing:
                self.counters.to_client[k] += nbytes
            else:
                self.counters.from_client[k] += nbytes
        if self._trace_file:
            self._trace_file.write(line)

    def _should_drop(self, k: int, msg: Message) -> bool:
        for rule in list(self.drop_rules):
            if rule(k, msg):
                self.drop_rules.remove(rule)
                return True
        return False

    def send_to_client(self, k: int, msg: Message) -> None:
        raise NotImplementedError

    def recv_from_client(self, k: int) -> Message:
        raise NotImplementedError

    def close(self) -> None:
        if self._trace_file:
            self._trace_file.close()
            self._trace_file = None


class InProcessTransport(BaseTransport):
    """Single-threaded round robin: delivering a message immediately steps
    the addressed agent; its replies queue until the server collects them."""

    def __init__(self, agents: dict, schema: WireSchema,
                 trace_path: Optional[str] = None, byte_accounting: bool = True):
        super().__init__(schema, len(agents), trace_path, byte_accounting)
        self.agents = agents
        self._outboxes: dict[int, deque] = {k: deque() for k in agents}

    def send_to_client(self, k: int, msg: Message) -> None:
        self.schema.validate(msg)
        if self._should_drop(k, msg):
            return
        self._record(k, msg, outgoing=True)
        replies = self.agents[k].handle_message(msg)
        for reply in replies:
            self.schema.validate(reply)  # sender-side check
            self._outboxes[k].append(reply)

    def recv_from_client(self, k: int) -> Message:
        if not self._outboxes[k]:
            raise ProtocolDesync(f"no pending message from client {k}")
        msg = self._outboxes[k].popleft()
        self._record(k, msg, outgoing=False)
        return msg


class SocketTransport(BaseTransport):
    """One loopback TCP connection per client, one thread per client agent."""

    def __init__(self, agents: dict, schema: WireSchema,
                 trace_path: Optional[str] = None, byte_accounting: bool = True):
        super().__init__(schema, len(agents), trace_path, byte_accounting)
        self.agents = agents
        self._listener = socket.create_server(("127.0.0.1", 0))
        host, port = self._listener.getsockname()
        self._threads = []
        self._errors: list[BaseException] = []
        for k, agent in agents.items():
            th = threading.Thread(target=self._client_loop,
                                  args=(k, agent, host, port), daemon=True)
            th.start()
            self._threads.append(th)
        self._conns: dict[int, socket.socket] = {}
        self._readers = {}
        for _ in agents:
            conn, _addr = self._listener.accept()
            reader = conn.makefile("r", encoding="utf-8")
            hello = reader.readline()
            k = int(hello.strip())
            self._conns[k] = conn
            self._readers[k] = reader

    def _client_loop(self, k: int, agent, host: str, port: int) -> None:
        try:
            with socket.create_connection((host, port)) as sock:
                sock.sendall(f"{k}\n".encode())
                reader = sock.makefile("r", encoding="utf-8")
                while True:
                    line = reader.readline()
                    if not line:
                        return
                    msg = decode(line)
                    replies = agent.handle_message(msg)
                    for reply in replies:
                        self.schema.validate(reply)
                        sock.sendall(encode(reply).encode("utf-8"))
                    if msg.kind == "control" and msg.payload.get("event") == "converged":
                        return
        except BaseException as err:  # surfaced on the next server-side call
            self._errors.append(err)

    def _check_errors(self) -> None:
        if self._errors:
            err = self._errors[0]
            raise ProtocolDesync(f"client thread failed: {err!r}") from err

    def send_to_client(self, k: int, msg: Message) -> None:
        self._check_errors()
        self.schema.validate(msg)
        if self._should_drop(k, msg):
            return
        line = encode(msg)
        self._record(k, msg, outgoing=True, line=line)
        self._conns[k].sendall(line.encode("utf-8"))

    def recv_from_client(self, k: int) -> Message:
        self._check_errors()
        line = self._readers[k].readline()
        if not line:
            self._check_errors()
            raise ProtocolDesync(f"connection to client {k} closed mid-round")
        msg = decode(line)
        self.schema.validate(msg)
        self._record(k, msg, outgoing=False, line=line)
        return msg

    def close(self) -> None:
        for conn in self._conns.values():
            try:
                conn.close()
            except OSError:
                pass
        self._listener.close()
        for th in self._threads:
            th.join(timeout=5.0)
        super().close()
