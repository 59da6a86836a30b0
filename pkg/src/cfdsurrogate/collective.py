"""Ring all-reduce over TCP sockets, process layouts and a link-cost model.

Wire format: every message is a 16-byte little-endian header
``(magic u32, opcode u32, payload_length u64)`` followed by the payload.
Control payloads are UTF-8 JSON; data payloads are raw little-endian floats.
"""

from __future__ import annotations

import errno
import json
import logging
import socket
import struct
import threading
import time
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

MAGIC = 0x43545253  # b"SRTC" little-endian
FRAME = struct.Struct("<IIQ")
DEFAULT_TIMEOUT = 30.0

OP_JOIN, OP_REJECT, OP_PEERS, OP_HELLO, OP_READY, OP_GO, OP_DATA, OP_LEN = range(1, 9)


class CollectiveError(RuntimeError):
    pass


class RendezvousError(CollectiveError):
    pass


class ProtocolError(CollectiveError):
    pass


class CommunicationError(CollectiveError):
    def __init__(self, message: str, rank: int | None = None):
        super().__init__(message)
        self.rank = rank


# ------------------------------------------------------------------- layouts

@dataclass(frozen=True, order=True)
class Layout:
    """``nodes x slots`` placement, filled rank-major."""

    nodes: int
    slots: int

    def __post_init__(self):
        if self.nodes < 1 or self.slots < 1:
            raise ValueError(f"layout extents must be positive, got {self.nodes}x{self.slots}")

    @classmethod
    def parse(cls, text: str) -> "Layout":
        try:
            n, s = text.lower().split("x")
            return cls(int(n), int(s))
        except ValueError:
            raise ValueError(f"layout must look like NxS, got {text!r}") from None

    def __str__(self) -> str:
        return f"{self.nodes}x{self.slots}"

    @property
    def world(self) -> int:
        return self.nodes * self.slots

    def place(self, rank: int) -> tuple[int, int]:
        if not 0 <= rank < self.world:
            raise ValueError(f"rank {rank} outside layout {self}")
        return divmod(rank, self.slots)

    def ring_hops(self) -> list[tuple[int, int, bool]]:
        """``(src, dst, intra_node)`` for each ring link ``r -> r+1``."""
        p = self.world
        return [(r, (r + 1) % p, self.place(r)[0] == self.place((r + 1) % p)[0]) for r in range(p)]

    def transpose(self) -> "Layout":
        return Layout(self.slots, self.nodes)


@dataclass(frozen=True)
class LinkCostModel:
    intra_latency: float = 2e-6
    intra_per_byte: float = 1 / 25e9
    inter_latency: float = 5e-6
    inter_per_byte: float = 1 / 3.125e9
    compute_per_sample: float = 0.0

    def __post_init__(self):
        if min(self.intra_latency, self.intra_per_byte, self.inter_latency,
               self.inter_per_byte, self.compute_per_sample) < 0:
            raise ValueError("costs must be non-negative")
        if self.inter_per_byte < self.intra_per_byte:
            raise ValueError("inter-node per-byte cost must not be below intra-node cost")

    def hop_cost(self, intra: bool, nbytes: float) -> float:
        if intra:
            return self.intra_latency + nbytes * self.intra_per_byte
        return self.inter_latency + nbytes * self.inter_per_byte


def simulate_allreduce_time(layout: Layout, nbytes: int, model: LinkCostModel) -> float:
    """Modeled ring all-reduce time in seconds.

    A chunk of ``nbytes / P`` makes ``2(P-1)`` consecutive hops around the
    ring, paying latency plus per-byte cost of each hop's link class. The
    result is the slowest chunk's path.
    """
    if nbytes <= 0:
        raise ValueError("nbytes must be positive")
    p = layout.world
    if p == 1:
        return 0.0
    costs = [model.hop_cost(intra, nbytes / p) for _, _, intra in layout.ring_hops()]
    steps = 2 * (p - 1)
    return max(sum(costs[(c + s) % p] for s in range(steps)) for c in range(p))


# -------------------------------------------------------------------- framing

def _send(sock: socket.socket, opcode: int, payload: bytes = b"") -> None:
    header = FRAME.pack(MAGIC, opcode, len(payload))
    if len(payload) < 65536:
        sock.sendall(header + payload)
    else:
        sock.sendall(header)
        sock.sendall(payload)


def _recv_exact(sock: socket.socket, n: int, peer: int | None) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        try:
            k = sock.recv_into(view[got:], n - got)
        except OSError as exc:
            raise CommunicationError(f"connection to rank {peer} failed: {exc}", peer) from exc
        if k == 0:
            raise CommunicationError(f"rank {peer} disconnected", peer)
        got += k
    return bytes(buf)


def _recv(sock: socket.socket, peer: int | None = None, expect: int | None = None):
    magic, opcode, length = FRAME.unpack(_recv_exact(sock, FRAME.size, peer))
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic:#x} from rank {peer}")
    if expect is not None and opcode != expect:
        if opcode == OP_REJECT:
            reason = json.loads(_recv_exact(sock, length, peer)).get("reason", "")
            raise RendezvousError(f"join rejected: {reason}")
        raise ProtocolError(f"expected opcode {expect}, got {opcode} from rank {peer}")
    return opcode, _recv_exact(sock, length, peer)


def _send_json(sock, opcode, obj):
    _send(sock, opcode, json.dumps(obj).encode())


def _recv_json(sock, expect, peer=None):
    return json.loads(_recv(sock, peer, expect)[1])


# --------------------------------------------------------------------- groups

class WorkerGroup:
    """Ring membership of one worker process."""

    def __init__(self, rank: int, world: int, address=None, send_sock=None, recv_sock=None):
        self.rank = rank
        self.world = world
        self.address = address
        self._next = send_sock
        self._prev = recv_sock

    @property
    def successor(self) -> int:
        return (self.rank + 1) % self.world

    @property
    def predecessor(self) -> int:
        return (self.rank - 1) % self.world

    def close(self) -> None:
        for s in (self._next, self._prev):
            if s is not None:
                try:
                    s.close()
                except OSError:
                    pass
        self._next = self._prev = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _exchange(self, opcode: int, payload: bytes) -> bytes:
        """Send to successor while receiving from predecessor."""
        err = []

        def send():
            try:
                _send(self._next, opcode, payload)
            except OSError as exc:
                err.append(exc)

        sender = threading.Thread(target=send, daemon=True)
        sender.start()
        _, data = _recv(self._prev, self.predecessor, opcode)
        sender.join()
        if err:
            raise CommunicationError(f"sending to rank {self.successor} failed: {err[0]}", self.successor)
        return data

    def allreduce(self, buffer: np.ndarray, op: str = "mean") -> np.ndarray:
        return ring_allreduce(self, buffer, op)

    def barrier(self) -> None:
        if self.world > 1:
            for _ in range(self.world - 1):
                self._exchange(OP_READY, b"")


def local_group() -> WorkerGroup:
    """Single-member group; collectives are identities."""
    return WorkerGroup(0, 1)


def _parse_address(address) -> tuple[str, int]:
    if isinstance(address, tuple):
        return address[0], int(address[1])
    host, _, port = str(address).rpartition(":")
    return host or "127.0.0.1", int(port)


def _listen(host: str, port: int) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(64)
    return srv


def _connect(host: str, port: int, deadline: float) -> socket.socket:
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=max(0.1, deadline - time.monotonic()))
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return sock
        except OSError:
            if time.monotonic() >= deadline:
                raise RendezvousError(f"could not reach {host}:{port} before timeout") from None
            time.sleep(0.05)


def _host_rendezvous(srv, world, ring_port, host, deadline):
    joined: dict[int, tuple[socket.socket, dict]] = {}
    try:
        while len(joined) < world - 1:
            srv.settimeout(max(0.01, deadline - time.monotonic()))
            try:
                conn, _ = srv.accept()
            except socket.timeout:
                raise RendezvousError(
                    f"timeout: {len(joined) + 1} of {world} ranks joined, missing "
                    f"{sorted(set(range(world)) - set(joined) - {0})}") from None
            conn.settimeout(max(0.01, deadline - time.monotonic()))
            try:
                req = _recv_json(conn, OP_JOIN)
            except CollectiveError:
                conn.close()
                continue
            rank, reason = req.get("rank"), None
            if req.get("world") != world:
                reason = f"world size {req.get('world')} does not match {world}"
            elif not isinstance(rank, int) or not 0 <= rank < world:
                reason = f"rank {rank} outside world of {world}"
            elif rank == 0 or rank in joined:
                reason = f"rank {rank} already joined"
            if reason:
                log.warning("rejecting join: %s", reason)
                _send_json(conn, OP_REJECT, {"reason": reason})
                conn.close()
                continue
            joined[rank] = (conn, req)
        peers = [[host, ring_port]] + [[joined[r][1]["host"], joined[r][1]["port"]] for r in range(1, world)]
        for conn, _ in joined.values():
            _send_json(conn, OP_PEERS, {"peers": peers})
        return peers, [joined[r][0] for r in range(1, world)]
    except BaseException:
        for conn, _ in joined.values():
            conn.close()
        raise


def rendezvous(world: int, address, rank: int, timeout: float = DEFAULT_TIMEOUT) -> WorkerGroup:
    """Join a ring of ``world`` workers coordinated by rank 0 at ``address``.

    Rank 0 hosts the listener. Every rank then connects to its successor,
    accepts its predecessor and waits on a barrier before returning.
    """
    if world < 1 or not 0 <= rank < world:
        raise ValueError(f"rank {rank} outside world of {world}")
    if world == 1:
        return WorkerGroup(0, 1, address)
    host, port = _parse_address(address)
    deadline = time.monotonic() + timeout
    ring_srv = _listen(host, 0)
    ring_port = ring_srv.getsockname()[1]
    control: list[socket.socket] = []
    try:
        if rank == 0:
            try:
                srv = _listen(host, port)
            except OSError as exc:
                if exc.errno != errno.EADDRINUSE:
                    raise
                # someone already hosts this rendezvous; ask it, which rejects rank 0
                conn = _connect(host, port, deadline)
                _send_json(conn, OP_JOIN, {"rank": 0, "world": world, "host": host, "port": ring_port})
                try:
                    _recv(conn, None, OP_PEERS)
                finally:
                    conn.close()
                raise RendezvousError("rank 0 already claimed")
            try:
                peers, control = _host_rendezvous(srv, world, ring_port, host, deadline)
            finally:
                srv.close()
        else:
            conn = _connect(host, port, deadline)
            control = [conn]
            conn.settimeout(max(0.01, deadline - time.monotonic()))
            _send_json(conn, OP_JOIN, {"rank": rank, "world": world, "host": host, "port": ring_port})
            try:
                peers = _recv_json(conn, OP_PEERS, 0)["peers"]
            except socket.timeout:
                raise RendezvousError("timeout waiting for peer table") from None

        succ = (rank + 1) % world
        send_sock = _connect(peers[succ][0], peers[succ][1], deadline)
        _send_json(send_sock, OP_HELLO, {"rank": rank})
        ring_srv.settimeout(max(0.01, deadline - time.monotonic()))
        try:
            recv_sock, _ = ring_srv.accept()
        except socket.timeout:
            raise RendezvousError("timeout waiting for ring predecessor") from None
        recv_sock.settimeout(None)
        send_sock.settimeout(None)
        hello = _recv_json(recv_sock, OP_HELLO)
        if hello.get("rank") != (rank - 1) % world:
            raise ProtocolError(f"expected predecessor {(rank - 1) % world}, got {hello.get('rank')}")
        group = WorkerGroup(rank, world, (host, port), send_sock, recv_sock)

        # barrier through rank 0
        if rank == 0:
            for conn in control:
                conn.settimeout(max(0.01, deadline - time.monotonic()))
                _recv(conn, None, OP_READY)
            for conn in control:
                _send(conn, OP_GO)
        else:
            _send(control[0], OP_READY)
            _recv(control[0], 0, OP_GO)
        return group
    except socket.timeout:
        raise RendezvousError("rendezvous timed out") from None
    finally:
        ring_srv.close()
        for conn in control:
            conn.close()


# ------------------------------------------------------------------ all-reduce

_REDUCERS = {"sum": np.add, "mean": np.add, "max": np.maximum}


def ring_allreduce(group: WorkerGroup, buffer: np.ndarray, op: str = "mean") -> np.ndarray:
    """Reduce ``buffer`` elementwise over every rank; all ranks get the same bytes.

    Reduce-scatter then all-gather over ``P`` chunks in ``2(P-1)`` steps. At
    step ``s`` rank ``r`` sends chunk ``(r - s) mod P`` to its successor, so
    each chunk's partial result is accumulated in a fixed rank sequence.
    """
    if op not in _REDUCERS:
        raise ValueError(f"unsupported reduction {op!r}")
    arr = np.asarray(buffer)
    p = group.world
    if p == 1:
        return arr.copy()
    dtype = arr.dtype.newbyteorder("<")
    flat = np.ascontiguousarray(arr, dtype=dtype).reshape(-1).copy()

    # all ranks must agree on the element count before chunking
    theirs = struct.unpack("<Q", group._exchange(OP_LEN, struct.pack("<Q", flat.size)))[0]
    if theirs != flat.size:
        raise ProtocolError(f"buffer length mismatch: rank {group.rank} has {flat.size}, "
                            f"rank {group.predecessor} has {theirs}")

    bounds = np.linspace(0, flat.size, p + 1).astype(np.int64)
    chunk = [slice(bounds[i], bounds[i + 1]) for i in range(p)]
    reduce = _REDUCERS[op]
    r = group.rank
    for s in range(p - 1):
        out_c, in_c = (r - s) % p, (r - s - 1) % p
        data = group._exchange(OP_DATA, flat[chunk[out_c]].tobytes())
        incoming = np.frombuffer(data, dtype=dtype)
        if incoming.size != flat[chunk[in_c]].size:
            raise ProtocolError(f"chunk size mismatch from rank {group.predecessor}")
        flat[chunk[in_c]] = reduce(incoming, flat[chunk[in_c]])
    for s in range(p - 1):
        out_c, in_c = (r + 1 - s) % p, (r - s) % p
        data = group._exchange(OP_DATA, flat[chunk[out_c]].tobytes())
        flat[chunk[in_c]] = np.frombuffer(data, dtype=dtype)
    if op == "mean":
        flat /= flat.dtype.type(p)
    return flat.reshape(arr.shape).astype(arr.dtype, copy=False)
