"""Durable replicated key-value store with Raft-style leader election.

Each replica keeps an append-only log file (fsync per write) and applies
entries to an in-memory map as soon as they are durably appended.  The
leader streams its log to followers; a write is acknowledged after the local
fsync (``ack_mode="local"``) or once a majority holds it (``"majority"``).

Election follows Raft: randomized timeouts, terms, majority votes, the
up-to-date-log voting restriction, plus pre-vote so a replica that was merely
starved of CPU cannot depose a healthy leader.
"""

from __future__ import annotations

import asyncio
import enum
import json
import logging
import os
import random
import struct
import time
import zlib
from dataclasses import dataclass, field

from .wire import RpcClient, RpcError, RpcUnavailable

log = logging.getLogger(__name__)


class Namespace(enum.IntEnum):
    FUNCTIONS = 1
    DATA_PLANES = 2
    WORKER_NODES = 3
    # Only accepted by a store opened with allow_sandboxes=True (persistence ablation).
    SANDBOXES = 4


PERSISTED_NAMESPACES = (Namespace.FUNCTIONS, Namespace.DATA_PLANES, Namespace.WORKER_NODES)


class Op(enum.IntEnum):
    PUT = 1
    DELETE = 2


class Role(str, enum.Enum):
    LEADER = "Leader"
    FOLLOWER = "Follower"
    CANDIDATE = "Candidate"


class NotLeader(RpcError):
    def __init__(self, leader_hint: str | None):
        super().__init__("not-leader", f"leader is {leader_hint}", {"leader": leader_hint})
        self.leader_hint = leader_hint


class StoreError(Exception):
    pass


@dataclass(frozen=True, slots=True)
class LogEntry:
    term: int
    index: int
    namespace: Namespace
    op: Op
    key: str
    value: bytes = b""


_ENTRY_HEAD = struct.Struct(">QQBBH")
_FRAME = struct.Struct(">II")  # length, crc32
_FILE_HEAD = struct.Struct(">8sQQ")
_MAGIC = b"LFSTORE1"


def encode_entry(e: LogEntry) -> bytes:
    key = e.key.encode()
    body = _ENTRY_HEAD.pack(e.term, e.index, e.namespace, e.op, len(key)) + key + e.value
    return _FRAME.pack(len(body), zlib.crc32(body)) + body


def decode_entry(body: bytes) -> LogEntry:
    term, index, ns, op, klen = _ENTRY_HEAD.unpack_from(body)
    off = _ENTRY_HEAD.size
    key = body[off:off + klen].decode()
    return LogEntry(term, index, Namespace(ns), Op(op), key, body[off + klen:])


def entry_to_wire(e: LogEntry) -> list:
    return [e.term, e.index, int(e.namespace), int(e.op), e.key, e.value.hex()]


def entry_from_wire(w: list) -> LogEntry:
    return LogEntry(w[0], w[1], Namespace(w[2]), Op(w[3]), w[4], bytes.fromhex(w[5]))


class DurableLog:
    """Append-only entry log with per-entry checksums.

    The file starts with a header naming the compaction base (highest index
    folded away by compaction and its term).  Loading stops at the first
    torn or corrupt entry and truncates the file there.
    """

    def __init__(self, path: str, fsync: bool = True):
        self.path = path
        self.fsync = fsync
        self.entries: list[LogEntry] = []
        self.base_index = 0
        self.base_term = 0
        self._pos: dict[int, int] = {}
        self._fd: int | None = None
        self.size = 0

    def open(self):
        os.makedirs(os.path.dirname(self.path) or ".", exist_ok=True)
        if not os.path.exists(self.path):
            self._write_file([], 0, 0)
        with open(self.path, "rb") as f:
            data = f.read()
        good = self._parse(data)
        if good < len(data):
            log.warning("log %s: truncating %d trailing bytes at offset %d", self.path, len(data) - good, good)
            with open(self.path, "r+b") as f:
                f.truncate(good)
                f.flush()
                os.fsync(f.fileno())
        self.size = good
        self._fd = os.open(self.path, os.O_WRONLY | os.O_APPEND)
        return self

    def _parse(self, data: bytes) -> int:
        if len(data) < _FILE_HEAD.size:
            raise StoreError(f"{self.path}: missing header")
        magic, self.base_index, self.base_term = _FILE_HEAD.unpack_from(data)
        if magic != _MAGIC:
            raise StoreError(f"{self.path}: bad magic")
        off = _FILE_HEAD.size
        self.entries = []
        while off + _FRAME.size <= len(data):
            length, crc = _FRAME.unpack_from(data, off)
            body = data[off + _FRAME.size: off + _FRAME.size + length]
            if len(body) != length or zlib.crc32(body) != crc:
                break
            self.entries.append(decode_entry(body))
            off += _FRAME.size + length
        self._reindex()
        return off

    def _reindex(self):
        self._pos = {e.index: i for i, e in enumerate(self.entries)}

    def _write_file(self, entries, base_index, base_term):
        tmp = self.path + ".tmp"
        with open(tmp, "wb") as f:
            f.write(_FILE_HEAD.pack(_MAGIC, base_index, base_term))
            for e in entries:
                f.write(encode_entry(e))
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.path)
        dfd = os.open(os.path.dirname(self.path) or ".", os.O_RDONLY)
        try:
            os.fsync(dfd)
        finally:
            os.close(dfd)

    def close(self):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None

    @property
    def last_index(self) -> int:
        if self.entries and self.entries[-1].index > self.base_index:
            return self.entries[-1].index
        return self.base_index

    @property
    def last_term(self) -> int:
        if self.entries and self.entries[-1].index > self.base_index:
            return self.entries[-1].term
        return self.base_term

    def term_at(self, index: int) -> int | None:
        """Term of the entry at ``index``; -1 if compacted away, None if absent."""
        if index == 0:
            return 0
        i = self._pos.get(index)
        if i is not None:
            return self.entries[i].term
        if index == self.base_index:
            return self.base_term
        if index < self.base_index:
            return -1
        return None

    def after(self, index: int, limit: int = 512) -> list[LogEntry]:
        # entries are index-ordered; find the first with index > given
        lo, hi = 0, len(self.entries)
        while lo < hi:
            mid = (lo + hi) // 2
            if self.entries[mid].index <= index:
                lo = mid + 1
            else:
                hi = mid
        return self.entries[lo:lo + limit]

    def append(self, entries: list[LogEntry]):
        if not entries:
            return
        last = self.last_index
        for e in entries:
            if e.index <= last:
                raise StoreError(f"non-increasing index {e.index} after {last}")
            last = e.index
        data = b"".join(encode_entry(e) for e in entries)
        os.write(self._fd, data)
        if self.fsync:
            os.fsync(self._fd)
        base = len(self.entries)
        self.entries.extend(entries)
        for i, e in enumerate(entries):
            self._pos[e.index] = base + i
        self.size += len(data)

    def truncate_from(self, index: int):
        """Drop every entry with index >= ``index`` (conflict resolution)."""
        keep = [e for e in self.entries if e.index < index]
        self.close()
        self._write_file(keep, self.base_index, self.base_term)
        self.entries = keep
        self._reindex()
        self.size = os.path.getsize(self.path)
        self._fd = os.open(self.path, os.O_WRONLY | os.O_APPEND)

    def compact(self, through: int):
        """Rewrite entries up to ``through`` as latest-value-per-key."""
        through = min(through, self.last_index)
        if through <= self.base_index:
            return
        base_term = self.term_at(through)
        latest: dict[tuple, LogEntry] = {}
        for e in self.entries:
            if e.index <= through:
                latest[(e.namespace, e.key)] = e
        kept = sorted((e for e in latest.values() if e.op == Op.PUT), key=lambda e: e.index)
        entries = kept + [e for e in self.entries if e.index > through]
        self.close()
        self._write_file(entries, through, base_term)
        self.entries = entries
        self.base_index, self.base_term = through, base_term
        self._reindex()
        self.size = os.path.getsize(self.path)
        self._fd = os.open(self.path, os.O_WRONLY | os.O_APPEND)


@dataclass
class ElectionState:
    current_term: int = 0
    voted_for: str | None = None
    role: Role = Role.FOLLOWER
    leader_hint: str | None = None


@dataclass
class StoreConfig:
    election_timeout_min: float = 0.15
    election_timeout_max: float = 0.30
    heartbeat_interval: float = 0.05
    ack_mode: str = "local"  # or "majority"
    compaction_threshold: int = 4 << 20
    fsync: bool = True


@dataclass
class _Peer:
    client: RpcClient
    next_index: int = 1
    match_index: int = 0
    last_ack: float = 0.0
    wake: asyncio.Event = field(default_factory=asyncio.Event)


class Replica:
    """One store replica; ``id`` is its advertised ``host:port``."""

    def __init__(self, id: str, peers: list[str], data_dir: str, config: StoreConfig | None = None,
                 allow_sandboxes: bool = False, seed: int | None = None):
        self.id = id
        self.config = config or StoreConfig()
        if self.config.ack_mode not in ("local", "majority"):
            raise StoreError(f"unknown ack_mode {self.config.ack_mode!r}")
        self.peer_ids = [p for p in peers if p != id]
        self.data_dir = data_dir
        self.allow_sandboxes = allow_sandboxes
        self.rng = random.Random(seed)
        self.state = ElectionState()
        self.log = DurableLog(os.path.join(data_dir, "store.log"), fsync=self.config.fsync)
        self.kv: dict[Namespace, dict[str, bytes]] = {ns: {} for ns in Namespace}
        self.writes = 0  # persistent writes issued as leader
        self.appended = 0  # entries appended locally, any role
        self.leader_terms: list[int] = []  # every term in which this replica became leader
        self.on_leader = None  # async callback(term)
        self.on_follower = None  # callback()
        self._peers: dict[str, _Peer] = {}
        self._deadline = 0.0
        self._last_leader_contact = 0.0
        self._tasks: list[asyncio.Task] = []
        self._leader_tasks: list[asyncio.Task] = []
        self._commit_waiters: list[tuple[int, asyncio.Future]] = []
        self._running = False

    # --- lifecycle ---------------------------------------------------------

    def _meta_path(self):
        return os.path.join(self.data_dir, "meta.json")

    def _load_meta(self):
        try:
            with open(self._meta_path()) as f:
                m = json.load(f)
            self.state.current_term = m["term"]
            self.state.voted_for = m["voted_for"]
        except FileNotFoundError:
            pass

    def _save_meta(self):
        tmp = self._meta_path() + ".tmp"
        with open(tmp, "w") as f:
            json.dump({"term": self.state.current_term, "voted_for": self.state.voted_for}, f)
            f.flush()
            if self.config.fsync:
                os.fsync(f.fileno())
        os.replace(tmp, self._meta_path())

    async def start(self):
        os.makedirs(self.data_dir, exist_ok=True)
        self._load_meta()
        self.log.open()
        for e in self.log.entries:
            self._apply(e)
        for pid in self.peer_ids:
            host, _, port = pid.rpartition(":")
            self._peers[pid] = _Peer(RpcClient(host, int(port), connect_timeout=self.config.election_timeout_min))
        self._running = True
        if not self.peer_ids:
            await self._become_leader()
        else:
            self._reset_deadline()
            self._tasks.append(asyncio.ensure_future(self._election_loop()))
        return self

    async def stop(self):
        self._running = False
        for t in self._tasks + self._leader_tasks:
            t.cancel()
        for p in self._peers.values():
            p.client.close()
        self.log.close()

    def handlers(self) -> dict:
        return {"store.vote": self.handle_vote, "store.prevote": self.handle_prevote,
                "store.append": self.handle_append}

    # --- state machine ----------------------------------------------------

    def _apply(self, e: LogEntry):
        table = self.kv[e.namespace]
        if e.op == Op.PUT:
            table[e.key] = e.value
        else:
            table.pop(e.key, None)

    def _rebuild(self):
        self.kv = {ns: {} for ns in Namespace}
        for e in self.log.entries:
            self._apply(e)

    def _check_ns(self, namespace):
        ns = Namespace(namespace)
        if ns == Namespace.SANDBOXES and not self.allow_sandboxes:
            raise StoreError("sandbox state is never persisted")
        return ns

    @property
    def is_leader(self) -> bool:
        return self.state.role == Role.LEADER

    def _require_leader(self):
        if not self.is_leader:
            raise NotLeader(self.state.leader_hint)

    async def put(self, namespace, key: str, value: bytes) -> int:
        return await self._write(self._check_ns(namespace), Op.PUT, key, value)

    async def delete(self, namespace, key: str) -> int:
        return await self._write(self._check_ns(namespace), Op.DELETE, key, b"")

    async def _write(self, ns, op, key, value) -> int:
        self._require_leader()
        e = LogEntry(self.state.current_term, self.log.last_index + 1, ns, op, key, value)
        try:
            self.log.append([e])
        except OSError as err:
            raise StoreError(f"storage failure: {err}") from err
        self.writes += 1
        self.appended += 1
        self._apply(e)
        for p in self._peers.values():
            p.wake.set()
        if self.config.ack_mode == "majority" and self.peer_ids:
            fut = asyncio.get_running_loop().create_future()
            self._commit_waiters.append((e.index, fut))
            self._check_commit()
            await fut
        if self.log.size > self.config.compaction_threshold:
            self._maybe_compact()
        return e.index

    def get(self, namespace, key: str) -> bytes | None:
        return self.kv[Namespace(namespace)].get(key)

    def scan(self, namespace) -> list[tuple[str, bytes]]:
        return sorted(self.kv[Namespace(namespace)].items())

    def _maybe_compact(self):
        # only fold entries every peer already holds; no snapshot shipping exists
        through = min([p.match_index for p in self._peers.values()] + [self.log.last_index])
        if through > self.log.base_index:
            self.log.compact(through)

    # --- election ----------------------------------------------------------

    def _reset_deadline(self):
        c = self.config
        self._deadline = time.monotonic() + self.rng.uniform(c.election_timeout_min, c.election_timeout_max)

    def _majority(self) -> int:
        return (len(self.peer_ids) + 1) // 2 + 1

    def _log_ok(self, last_index: int, last_term: int) -> bool:
        return (last_term, last_index) >= (self.log.last_term, self.log.last_index)

    def _step_down(self, term: int, leader: str | None = None):
        was_leader = self.is_leader
        if term > self.state.current_term:
            self.state.current_term = term
            self.state.voted_for = None
            self._save_meta()
        self.state.role = Role.FOLLOWER
        if leader is not None:
            self.state.leader_hint = leader
        if was_leader:
            for t in self._leader_tasks:
                t.cancel()
            self._leader_tasks = []
            for _, fut in self._commit_waiters:
                if not fut.done():
                    fut.set_exception(NotLeader(leader))
            self._commit_waiters = []
            log.info("%s stepped down in term %d", self.id, self.state.current_term)
            if self.on_follower:
                self.on_follower()

    async def _election_loop(self):
        while self._running:
            if self.is_leader:
                await asyncio.sleep(self.config.heartbeat_interval)
                continue
            delay = self._deadline - time.monotonic()
            if delay > 0:
                await asyncio.sleep(delay)
                continue
            self._reset_deadline()
            try:
                if await self._pre_vote():
                    await self._run_election()
            except asyncio.CancelledError:
                raise
            except Exception:
                log.exception("election round failed")

    async def _gather_votes(self, method: str, params: dict) -> list[dict]:
        timeout = self.config.election_timeout_min

        async def ask(p):
            try:
                return await p.client.call(method, params, timeout=timeout)
            except (RpcUnavailable, RpcError):
                return None

        replies = await asyncio.gather(*(ask(p) for p in self._peers.values()))
        return [r for r in replies if r]

    async def _pre_vote(self) -> bool:
        params = {"term": self.state.current_term + 1, "candidate": self.id,
                  "last_index": self.log.last_index, "last_term": self.log.last_term}
        replies = await self._gather_votes("store.prevote", params)
        granted = 1 + sum(1 for r in replies if r.get("granted"))
        return granted >= self._majority() and not self.is_leader

    async def _run_election(self):
        """Become candidate, request votes; return once the outcome is known."""
        st = self.state
        st.current_term += 1
        st.voted_for = self.id
        st.role = Role.CANDIDATE
        self._save_meta()
        term = st.current_term
        params = {"term": term, "candidate": self.id,
                  "last_index": self.log.last_index, "last_term": self.log.last_term}
        replies = await self._gather_votes("store.vote", params)
        if st.current_term != term or st.role != Role.CANDIDATE:
            return
        for r in replies:
            if r["term"] > term:
                self._step_down(r["term"])
                return
        votes = 1 + sum(1 for r in replies if r.get("granted"))
        if votes >= self._majority():
            await self._become_leader()
        else:
            st.role = Role.FOLLOWER
            self._reset_deadline()

    def handle_prevote(self, p: dict) -> dict:
        recent = time.monotonic() - self._last_leader_contact < self.config.election_timeout_min
        granted = (p["term"] > self.state.current_term
                   and not (recent or self.is_leader)
                   and self._log_ok(p["last_index"], p["last_term"]))
        return {"term": self.state.current_term, "granted": granted}

    def handle_vote(self, p: dict) -> dict:
        st = self.state
        if p["term"] < st.current_term:
            return {"term": st.current_term, "granted": False}
        if p["term"] > st.current_term:
            self._step_down(p["term"])
        granted = st.voted_for in (None, p["candidate"]) and self._log_ok(p["last_index"], p["last_term"])
        if granted:
            st.voted_for = p["candidate"]
            self._save_meta()
            self._reset_deadline()
        return {"term": st.current_term, "granted": granted}

    async def _become_leader(self):
        st = self.state
        if not self.peer_ids and st.role != Role.LEADER:
            st.current_term += 1
            st.voted_for = self.id
            self._save_meta()
        st.role = Role.LEADER
        st.leader_hint = self.id
        self.leader_terms.append(st.current_term)
        log.info("%s became leader for term %d", self.id, st.current_term)
        now = time.monotonic()
        for pid, peer in self._peers.items():
            peer.next_index = self.log.last_index + 1
            peer.match_index = 0
            peer.last_ack = now
            self._leader_tasks.append(asyncio.ensure_future(self._replicate(pid, peer, st.current_term)))
        if self.peer_ids:
            self._leader_tasks.append(asyncio.ensure_future(self._check_quorum(st.current_term)))
        if self.on_leader:
            await self.on_leader(st.current_term)

    async def _check_quorum(self, term: int):
        """Step down when a majority has been silent for a full election timeout."""
        while self.is_leader and self.state.current_term == term:
            await asyncio.sleep(self.config.election_timeout_max)
            now = time.monotonic()
            alive = 1 + sum(1 for p in self._peers.values() if now - p.last_ack < 2 * self.config.election_timeout_max)
            if alive < self._majority():
                log.warning("%s lost quorum in term %d", self.id, term)
                self._step_down(term)

    async def _replicate(self, pid: str, peer: _Peer, term: int):
        hb = self.config.heartbeat_interval
        while self.is_leader and self.state.current_term == term:
            prev = peer.next_index - 1
            prev_term = self.log.term_at(prev)
            if prev_term is None or prev_term == -1:
                # peer is behind the compaction base; resend from the base
                prev, prev_term = self.log.base_index, self.log.base_term
            entries = self.log.after(prev)
            params = {"term": term, "leader": self.id, "prev_index": prev, "prev_term": prev_term,
                      "entries": [entry_to_wire(e) for e in entries]}
            try:
                r = await peer.client.call("store.append", params, timeout=max(0.5, 4 * hb))
            except (RpcUnavailable, RpcError):
                r = None
            if r is not None:
                peer.last_ack = time.monotonic()
                if r["term"] > term:
                    self._step_down(r["term"])
                    return
                if r["success"]:
                    peer.match_index = r["match"]
                    peer.next_index = r["match"] + 1
                    self._check_commit()
                    if entries and len(entries) == 512:
                        continue
                else:
                    peer.next_index = max(1, min(peer.next_index - 1, r.get("last_index", 0) + 1))
                    continue
            peer.wake.clear()
            try:
                await asyncio.wait_for(peer.wake.wait(), hb)
            except asyncio.TimeoutError:
                pass

    def _check_commit(self):
        if not self._commit_waiters:
            return
        matches = sorted([self.log.last_index] + [p.match_index for p in self._peers.values()], reverse=True)
        committed = matches[self._majority() - 1]
        keep = []
        for idx, fut in self._commit_waiters:
            if idx <= committed:
                if not fut.done():
                    fut.set_result(idx)
            else:
                keep.append((idx, fut))
        self._commit_waiters = keep

    def handle_append(self, p: dict) -> dict:
        st = self.state
        if p["term"] < st.current_term:
            return {"term": st.current_term, "success": False, "last_index": self.log.last_index}
        if p["term"] > st.current_term or st.role != Role.FOLLOWER:
            self._step_down(p["term"], p["leader"])
        st.leader_hint = p["leader"]
        self._last_leader_contact = time.monotonic()
        self._reset_deadline()
        prev, prev_term = p["prev_index"], p["prev_term"]
        mine = self.log.term_at(prev)
        if mine is None or (mine != -1 and prev_term != -1 and mine != prev_term):
            return {"term": st.current_term, "success": False, "last_index": min(self.log.last_index, prev - 1)}
        new = []
        truncated = False
        for w in p["entries"]:
            e = entry_from_wire(w)
            have = self.log.term_at(e.index)
            if have is not None and have != -1 and e.index > self.log.base_index:
                if have == e.term:
                    continue
                self.log.truncate_from(e.index)
                truncated = True
            if e.index <= self.log.last_index:
                continue
            new.append(e)
        if truncated:
            self._rebuild()
        if new:
            self.log.append(new)
            self.appended += len(new)
            for e in new:
                self._apply(e)
        match = p["entries"][-1][1] if p["entries"] else prev
        return {"term": st.current_term, "success": True, "match": max(match, 0)}

    def status(self) -> dict:
        return {"id": self.id, "term": self.state.current_term, "role": self.state.role.value,
                "leader": self.state.leader_hint, "last_index": self.log.last_index,
                "writes": self.writes, "appended": self.appended, "leader_terms": self.leader_terms}
