"""The metadata master: drains client rings in batches and owns all mutation.

One poll iteration gathers up to ``batch_max`` requests across the client
rings (round-robin, arrival order preserved per client), validates each one
against the live metadata *plus* the effects already admitted earlier in the
same batch, persists every mutating request's log entry with a single
append_batch (two fences total), then applies the volatile updates in
collected order and finally answers.  Permission revocation for a committed
write happens before its log entry is persisted, so a crash can never leave a
writable committed page.

Clients hand over pre-resolved handles; the master re-checks them with field
echoes and dirty flags and falls back to its own search only when a hint went
stale (counted, never fatal).  With hints the per-creat key-comparison cost
is constant; with offloading disabled (FLAG_NO_HINT) the master resolves full
paths itself, which is the instrumented O(log n) baseline.
"""

from __future__ import annotations

import heapq
import struct
import threading
import time
from dataclasses import dataclass

from . import oplog as oplog_mod
from . import pmem, wire
from .blockmap import commit_mapping, gather_bytes
from .errors import (
    BadFd,
    Exists,
    KucoError,
    LeaseViolation,
    NotADirectory,
    NotEmpty,
    NotFound,
    OutOfSpace,
    StaleHandle,
    Status,
    status_for,
)
from .metadata import (
    CompCounter,
    Dentry,
    FsState,
    KIND_DIR,
    KIND_FILE,
    MAX_LEVEL,
    ROOT_INO,
    name_key,
    resolve_path,
)
from .oplog import NameOp, OpLog, RenameOp, WriteOp
from .rangelock import LockRing

PAGE_SIZE = pmem.PAGE_SIZE


@dataclass
class MasterConfig:
    batch_max: int = 64
    offload_index: bool = True
    gather_window_ns: int = 200_000
    checkpoint_fill: float = 0.75
    epoch_every_requests: int = 1024
    epoch_interval_ns: int = 10_000_000
    lease_chunk_pages: int = 1024
    ring_slots: int = 8
    lease_ns: int = 100_000_000


@dataclass
class Seat:
    cid: int
    ring: wire.MessageRing
    key: bytes
    epoch_rec: object = None
    active: bool = False


class _Plan:
    __slots__ = ("req", "record", "seq", "pre_log", "apply", "error", "value",
                 "reserved_ino")

    def __init__(self, req):
        self.req = req
        self.record = None
        self.seq = 0
        self.pre_log = None
        self.apply = None
        self.error: Status | None = None
        self.value = b""
        self.reserved_ino: int | None = None


class _BatchView:
    """Effects admitted earlier in the current batch, visible to validation."""

    def __init__(self):
        self.created: dict[tuple[int, bytes], int] = {}
        self.deleted: set[tuple[int, bytes]] = set()
        self.created_in_dir: dict[int, int] = {}
        self.deleted_inos: set[int] = set()

    def add_created(self, parent: int, name_b: bytes, ino: int):
        self.created[(parent, name_b)] = ino
        self.created_in_dir[parent] = self.created_in_dir.get(parent, 0) + 1

    def add_deleted(self, parent: int, name_b: bytes, ino: int | None = None):
        key = (parent, name_b)
        if key in self.created:
            del self.created[key]
            self.created_in_dir[parent] -= 1
        self.deleted.add(key)
        if ino is not None:
            self.deleted_inos.add(ino)


class Master:
    def __init__(self, region: pmem.Region, allocator: pmem.PageAllocator,
                 log: OpLog, state: FsState, config: MasterConfig | None = None,
                 key: bytes = b"\x13" * 16):
        self.region = region
        self.allocator = allocator
        self.log = log
        self.state = state
        self.config = config or MasterConfig()
        self.key = key
        self.seats: dict[int, Seat] = {}
        self._next_cid = 1
        self.comp = CompCounter()
        self.stale_hints = 0
        self.tower_caps = 0
        self.requests = 0
        self.batches = 0
        self.op_counts: dict[str, int] = {}
        self.busy_ns = 0
        self.req_latency_ns = 0
        self.req_latency_count = 0
        self.journal: list | None = None
        self.apply_errors: list[str] = []
        self.cv = threading.Condition()
        self._poll_lock = threading.Lock()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._reqs_since_epoch = 0
        self._last_epoch_ns = time.monotonic_ns()
        self.checkpoints = 0

    # -- client plumbing -----------------------------------------------------

    def new_seat(self) -> Seat:
        cid = self._next_cid
        self._next_cid += 1
        seat = Seat(cid, wire.MessageRing(cid), self.key)
        self.seats[cid] = seat
        return seat

    def notify(self):
        with self.cv:
            self.cv.notify()

    # -- main loop -----------------------------------------------------------

    def start(self):
        self._stop.clear()
        self._thread = threading.Thread(target=self.run_loop, name="kucofs-master",
                                        daemon=True)
        self._thread.start()

    def stop(self):
        if self._thread is None:
            return
        self._stop.set()
        self.notify()
        self._thread.join()
        self._thread = None

    @property
    def running(self) -> bool:
        return self._thread is not None

    def run_loop(self):
        while not self._stop.is_set():
            n = self.poll_once(gather_window=True)
            if n == 0:
                with self.cv:
                    self.cv.wait(timeout=0.001)

    def poll_once(self, batch_max: int | None = None,
                  gather_window: bool = False) -> int:
        with self._poll_lock:
            t0 = time.perf_counter_ns()
            n = self._poll_locked(batch_max, gather_window)
            self.busy_ns += time.perf_counter_ns() - t0
            return n

    def _gather(self, batch_max: int) -> list[wire.Request]:
        out = []
        for seat in list(self.seats.values()):
            if len(out) >= batch_max:
                break
            out.extend(seat.ring.scan(batch_max - len(out)))
        return out

    def _poll_locked(self, batch_max, gather_window) -> int:
        cfg = self.config
        limit = batch_max if batch_max is not None else cfg.batch_max
        reqs = self._gather(limit)
        if reqs and gather_window and limit > 1 and len(reqs) < limit:
            deadline = time.monotonic_ns() + cfg.gather_window_ns
            while len(reqs) < limit and time.monotonic_ns() < deadline:
                time.sleep(0)
                more = self._gather(limit - len(reqs))
                if more:
                    reqs.extend(more)
        if not reqs:
            self._housekeeping()
            return 0
        t_start = time.perf_counter_ns()

        view = _BatchView()
        plans = [self._validate(req, view) for req in reqs]

        records = [p for p in plans if p.record is not None]
        if records:
            for p in records:
                p.seq = self.state.next_seq
                self.state.next_seq += 1
            encoded = [oplog_mod.encode_entry(p.seq, p.record.etype,
                                              oplog_mod.encode_payload(p.record))
                       for p in records]
            total = sum(len(e) for e in encoded)
            if not self.log.fits(total):
                self.checkpoint_now()
            if not self.log.fits(total):
                for p in records:
                    p.error = Status.LOG_FULL
                    p.record = None
                    p.apply = None
                    if p.reserved_ino is not None:
                        heapq.heappush(self.state.table._free, p.reserved_ino)
                records = []
            else:
                for p in records:
                    if p.pre_log is not None:
                        p.pre_log()
                self.log.append_batch(encoded)
                self.batches += 1
                if self.journal is not None:
                    for p in records:
                        self.journal.append((p.seq, p.record,
                                             self._journal_data(p.record)))

        for p in plans:
            if p.error is not None:
                self._respond(p, p.error)
            else:
                try:
                    p.apply(p)
                    self._respond(p, Status.OK)
                except Exception as exc:  # noqa: BLE001 - loop must never abort
                    # Validation is supposed to make apply infallible; a logged
                    # entry whose apply failed means volatile and persistent
                    # state have diverged, so surface it loudly in counters.
                    import traceback
                    self.apply_errors.append(traceback.format_exc())
                    status = status_for(exc) if isinstance(exc, KucoError) \
                        else Status.INVALID
                    self._respond(p, status)
        self.requests += len(reqs)
        self._reqs_since_epoch += len(reqs)
        elapsed = time.perf_counter_ns() - t_start
        self.req_latency_ns += elapsed  # whole batch cost ...
        self.req_latency_count += len(reqs)  # ... amortized over its requests
        self._housekeeping()
        return len(reqs)

    def _journal_data(self, rec) -> bytes | None:
        """Snapshot a committed write's bytes for the harness commit journal.

        The client's pages are fully written and flushed before WRITE_COMMIT
        is even posted, so gathering them here captures exactly what this
        commit makes visible, immune to later page reuse.
        """
        if not isinstance(rec, WriteOp):
            return None
        pages = []
        for p, c in rec.runs:
            pages.extend(range(p, p + c))
        first = rec.offset // PAGE_SIZE
        runs = []
        for i, page in enumerate(pages):
            idx = first + i
            a = max(rec.offset, idx * PAGE_SIZE)
            b = min(rec.offset + rec.size, (idx + 1) * PAGE_SIZE)
            runs.append((page, a - idx * PAGE_SIZE, b - a))
        return gather_bytes(self.region.volatile,
                            self.region.segments["data"].offset, runs)

    def _respond(self, plan: _Plan, status: Status):
        req = plan.req
        seat = self.seats[req.cid]
        name = wire_opname(req.opcode)
        self.op_counts[name] = self.op_counts.get(name, 0) + 1
        seat.ring.respond(req.slot, req.seq, int(status), plan.value)

    def _housekeeping(self):
        now = time.monotonic_ns()
        cfg = self.config
        if (self._reqs_since_epoch >= cfg.epoch_every_requests
                or now - self._last_epoch_ns >= cfg.epoch_interval_ns):
            self.state.epochs.advance()
            self._reqs_since_epoch = 0
            self._last_epoch_ns = now
        if self.log.fill_fraction >= cfg.checkpoint_fill:
            self.checkpoint_now()

    def checkpoint_now(self) -> int:
        seq = oplog_mod.checkpoint(self.region, self.log, self.allocator,
                                   self.state)
        self.checkpoints += 1
        return seq

    # -- validation ----------------------------------------------------------

    def _validate(self, req: wire.Request, view: _BatchView) -> _Plan:
        plan = _Plan(req)
        try:
            handler = _VALIDATORS[req.opcode]
        except KeyError:
            plan.error = Status.INVALID
            return plan
        try:
            handler(self, req, view, plan)
        except KucoError as exc:
            plan.error = status_for(exc)
        except (struct.error, ValueError, IndexError):
            plan.error = Status.INVALID
        return plan

    def _read_scratch(self, cid: int, page_no: int, length: int) -> bytes:
        if not self.allocator.is_leased_to(cid, [page_no]):
            raise KucoError("scratch page not leased to caller")
        addr = self.region.page_addr(page_no)
        return self.region.read(addr, length)

    def _get_name(self, req: wire.Request, scratch: int, off: int,
                  nlen: int) -> bytes:
        if scratch:
            return self._read_scratch(req.cid, scratch, nlen)
        return req.payload[off:off + nlen]

    def _tower_update(self, parent, tower_hints, bottom: Dentry) -> tuple[list, int]:
        """Build an insert update vector from client echoes, checked *now*.

        Level 0 is the separately validated bottom predecessor.  An upper
        level is usable only while the echoed predecessor still points at the
        echoed successor (pointer identity, no key comparison); the first
        mismatch caps the trustworthy height, so a new node never links
        through a lane whose order we cannot vouch for.
        """
        arena = self.state.arena
        head = parent.dir_list.head
        update: list = [bottom] + [head] * (MAX_LEVEL - 1)
        height = 1
        for i in range(1, MAX_LEVEL):
            pred_idx, succ_idx = tower_hints[i]
            pred = arena.get(pred_idx) if pred_idx else None
            if pred is None or not isinstance(pred, Dentry) or pred.freed \
                    or pred.forward is None or pred.level <= i:
                break
            succ = arena.get(succ_idx) if succ_idx else None
            if pred.forward[i] is not succ:
                break
            if pred is not head and pred.dirty:
                break
            update[i] = pred
            height = i + 1
        return update, height

    def _bottom_pred_for(self, parent, dent: Dentry, tower_hints) -> Dentry:
        """Locate dent's bottom predecessor via the level-0 echo, else walk."""
        pred_idx, _ = tower_hints[0]
        pred = self.state.arena.get(pred_idx) if pred_idx else None
        if pred is not None and isinstance(pred, Dentry) and not pred.freed \
                and pred.forward is not None and pred.forward[0] is dent:
            return pred
        self.stale_hints += 1
        return self._pred_of(parent, dent)

    def _validate_bottom_hint(self, parent, hint_arena, hint_key, hint_ino,
                              is_head, key, name_b):
        """Returns (update_or_None, existing_or_None); None update = stale."""
        sl = parent.dir_list
        arena = self.state.arena
        if is_head:
            pred = arena.get(hint_arena)
            if pred is not sl.head:
                return None, None
        else:
            pred = arena.get(hint_arena)
            if pred is None or not isinstance(pred, Dentry) or pred.freed \
                    or pred.dirty or pred.key != hint_key or pred.ino != hint_ino:
                return None, None
            self.comp.count += 1
            if (pred.key, pred.name_b) >= (key, name_b):
                return None, None
        nxt = pred.forward[0]
        if nxt is not None:
            self.comp.count += 1
            if (nxt.key, nxt.name_b) < (key, name_b):
                return None, None
            if nxt.key == key and nxt.name_b == name_b:
                return pred, nxt
        return pred, None

    def _insert_point_now(self, parent, req_fields, key, name_b):
        """(update vector, height cap, existing) from echoes checked against
        the current structure; falls back to a counted search on staleness.

        The tower's pointer echoes are only order-sound while no arena slot
        was recycled since the client snapshotted them (a recycled slot can
        hold an unrelated dentry at the same index), so any recycle since
        then caps the insert at the field-validated bottom level.
        """
        hint_arena, hint_key, hint_ino, hint_flags, tower, epoch = req_fields
        pred, existing = self._validate_bottom_hint(
            parent, hint_arena, hint_key, hint_ino, hint_flags & 1, key, name_b)
        if pred is None:
            self.stale_hints += 1
            update, existing = parent.dir_list.search(key, name_b, self.comp)
            return update, MAX_LEVEL, existing
        if epoch != self.state.arena.reuses:
            self.tower_caps += 1
            return [pred] + [parent.dir_list.head] * (MAX_LEVEL - 1), 1, existing
        update, height = self._tower_update(parent, tower, pred)
        return update, height, existing

    # CREAT / MKDIR ----------------------------------------------------------

    def _validate_creat(self, req, view, plan):
        kind = KIND_DIR if req.opcode == wire.OP_MKDIR else KIND_FILE
        if req.flags & wire.FLAG_NO_HINT:
            mode, nlen, _, scratch = wire.PATH_HEAD.unpack_from(req.payload)
            path = self._get_name(req, scratch, wire.PATH_HEAD.size,
                                  nlen).decode(errors="surrogateescape")
            dirname, _, base = path.rstrip("/").rpartition("/")
            res = resolve_path(self.state.table, dirname or "/", self.comp)
            parent = res.target_inode
            if parent is None:
                raise NotFound(dirname or "/")
            if parent.kind != KIND_DIR:
                raise NotADirectory(dirname)
            name_b = base.encode()
            key = name_key(name_b)
            update, existing = parent.dir_list.search(key, name_b, self.comp)
            hint_fields = None
        else:
            (parent_ino, parent_gen, mode, hint_arena, hint_key, hint_ino,
             hint_flags, nlen, scratch,
             arena_epoch) = wire.CREAT_HEAD.unpack_from(req.payload)
            tower = wire.unpack_tower(req.payload, wire.CREAT_HEAD.size)
            name_b = self._get_name(
                req, scratch, wire.CREAT_HEAD.size + wire.TOWER_STRUCT.size, nlen)
            key = name_key(name_b)
            parent = self.state.table.get_checked(parent_ino, parent_gen)
            if parent.kind != KIND_DIR:
                raise NotADirectory(str(parent_ino))
            if parent.ino in view.deleted_inos:
                raise NotFound("parent removed in batch")
            hint_fields = (hint_arena, hint_key, hint_ino, hint_flags, tower,
                           arena_epoch)
            existing = None

        pkey = (parent.ino, name_b)
        if pkey in view.created:
            raise Exists(name_b.decode(errors="surrogateescape"))
        pending_deleted = pkey in view.deleted
        if hint_fields is not None:
            _, _, existing = self._insert_point_now(parent, hint_fields,
                                                    key, name_b)
        if existing is not None and not pending_deleted:
            if req.flags & wire.FLAG_OPEN and not req.flags & wire.FLAG_EXCL:
                # open(O_CREAT) of a live file: plain open, no mutation
                target = self.state.table.get(existing.ino)
                if target is None or target.dirty:
                    raise NotFound(name_b.decode(errors="surrogateescape"))
                plan.apply = self._make_open_apply(target)
                return
            raise Exists(name_b.decode(errors="surrogateescape"))

        ino, gen = self.state.table.reserve()
        plan.reserved_ino = ino
        plan.record = NameOp(oplog_mod.T_MKDIR if kind == KIND_DIR
                             else oplog_mod.T_CREAT, ino, parent.ino, mode, name_b)
        view.add_created(parent.ino, name_b, ino)

        do_open = bool(req.flags & wire.FLAG_OPEN)
        state = self.state

        def apply(p):
            # The update vector is rebuilt here, at apply time: earlier
            # requests in this batch may have reshaped the lanes since
            # validation, and linking through a stale predecessor would break
            # lane ordering for every future search.
            inode = state.new_inode(ino, gen, kind, mode)
            inode.mtime = time.time_ns()
            state.table.publish(inode)  # step 2: inode visible in the table
            if hint_fields is not None:
                upd, cap, _ = self._insert_point_now(parent, hint_fields,
                                                     key, name_b)
            else:
                upd, cap = None, MAX_LEVEL
            if upd is None:
                upd, _ = parent.dir_list.search(key, name_b, self.comp)
            parent.dir_list.insert_at(upd, key, name_b, ino,
                                      max_level=cap)  # step 3: visible
            parent.mtime = inode.mtime
            if do_open:
                inode.open_count += 1
                self._ensure_ring(inode)
            p.value = struct.pack("<QQ", ino, gen)

        plan.apply = apply

    # UNLINK / RMDIR ---------------------------------------------------------

    def _lookup_unlink_target(self, req, view):
        """Returns (parent, dentry, target, update_or_None)."""
        table = self.state.table
        if req.flags & wire.FLAG_NO_HINT:
            _, nlen, _, scratch = wire.PATH_HEAD.unpack_from(req.payload)
            path = self._get_name(req, scratch, wire.PATH_HEAD.size,
                                  nlen).decode(errors="surrogateescape")
            res = resolve_path(table, path, self.comp)
            if res.target_dentry_obj is None or res.target_inode is None:
                raise NotFound(path)
            parent = res.parent_inode
            dent = res.target_dentry_obj
            target = res.target_inode
            update = None
        else:
            (parent_ino, parent_gen, dent_arena, dent_key, dent_ino,
             target_ino, target_gen) = wire.UNLINK_HEAD.unpack_from(req.payload)
            tower = wire.unpack_tower(req.payload, wire.UNLINK_HEAD.size)
            parent = table.get_checked(parent_ino, parent_gen)
            dent = self.state.arena.get(dent_arena)
            if dent is None or not isinstance(dent, Dentry) or dent.freed \
                    or dent.dirty or dent.key != dent_key or dent.ino != dent_ino:
                raise StaleHandle("dentry handle")
            target = table.get_checked(target_ino, target_gen)
            bottom = self._bottom_pred_for(parent, dent, tower)
            update, _height = self._tower_update(parent, tower, bottom)
        if (parent.ino, dent.name_b) in view.deleted or dent.ino in view.deleted_inos:
            raise NotFound("removed earlier in batch")
        return parent, dent, target, update

    def _pred_of(self, parent, dent: Dentry) -> Dentry:
        pred = parent.dir_list._find_pred_at(dent, 0, self.comp)
        if pred is None:
            raise StaleHandle("dentry not linked")
        return pred

    def _validate_unlink(self, req, view, plan):
        parent, dent, target, update = self._lookup_unlink_target(req, view)
        if target.kind != KIND_FILE:
            raise KucoError("unlink of a directory")
        plan.record = NameOp(oplog_mod.T_UNLINK, target.ino, parent.ino, 0,
                             dent.name_b)
        view.add_deleted(parent.ino, dent.name_b, target.ino)
        self._make_remove_apply(plan, parent, dent, target, update)

    def _validate_rmdir(self, req, view, plan):
        parent, dent, target, update = self._lookup_unlink_target(req, view)
        if target.kind != KIND_DIR:
            raise NotADirectory(dent.name_b.decode(errors="surrogateescape"))
        if target.ino == ROOT_INO:
            raise KucoError("cannot remove root")
        if view.created_in_dir.get(target.ino):
            raise NotEmpty(dent.name_b.decode(errors="surrogateescape"))
        for child in target.dir_list.iter_live():
            if (target.ino, child.name_b) not in view.deleted:
                raise NotEmpty(dent.name_b.decode(errors="surrogateescape"))
        plan.record = NameOp(oplog_mod.T_RMDIR, target.ino, parent.ino, 0,
                             dent.name_b)
        view.add_deleted(parent.ino, dent.name_b, target.ino)
        self._make_remove_apply(plan, parent, dent, target, update)

    def _make_remove_apply(self, plan, parent, dent, target, update):
        state = self.state
        allocator = self.allocator

        def apply(p):
            dent.dirty = True  # readers now skip it: the unpublishing store
            upd = update
            if upd is None:
                upd, _ = parent.dir_list.search(dent.key, dent.name_b, self.comp)
            parent.dir_list.unlink(dent, upd, self.comp)
            state.retire_dentry(dent)
            state.retire_inode(target, on_pages_free=allocator.free_pages)
            parent.mtime = time.time_ns()

        plan.apply = apply

    # RENAME -----------------------------------------------------------------

    def _validate_rename(self, req, view, plan):
        table = self.state.table
        if req.flags & wire.FLAG_NO_HINT:
            _, sn, dn, scratch = wire.PATH_HEAD.unpack_from(req.payload)
            blob = self._get_name(req, scratch, wire.PATH_HEAD.size, sn + dn)
            src_path = blob[:sn].decode(errors="surrogateescape")
            dst_path = blob[sn:sn + dn].decode(errors="surrogateescape")
            res = resolve_path(table, src_path, self.comp)
            if res.target_dentry_obj is None or res.target_inode is None:
                raise NotFound(src_path)
            src_parent, src_dent = res.parent_inode, res.target_dentry_obj
            target = res.target_inode
            dres = resolve_path(table, dst_path, self.comp)
            dst_parent = dres.parent_inode
            dst_name_b = dst_path.rstrip("/").rpartition("/")[2].encode()
            dst_existing = dres.target_dentry_obj
        else:
            (ino, gen, sp_ino, sp_gen, sd_arena, sd_key, sd_ino, dp_ino, dp_gen,
             dh_arena, dh_key, dh_ino, dh_flags, snlen, dnlen,
             scratch) = wire.RENAME_HEAD.unpack_from(req.payload)
            blob = self._get_name(req, scratch, wire.RENAME_HEAD.size,
                                  snlen + dnlen)
            dst_name_b = blob[snlen:snlen + dnlen]
            src_parent = table.get_checked(sp_ino, sp_gen)
            dst_parent = table.get_checked(dp_ino, dp_gen)
            src_dent = self.state.arena.get(sd_arena)
            if src_dent is None or not isinstance(src_dent, Dentry) \
                    or src_dent.freed or src_dent.dirty \
                    or src_dent.key != sd_key or src_dent.ino != sd_ino:
                raise StaleHandle("source dentry")
            target = table.get_checked(ino, gen)
            dkey = name_key(dst_name_b)
            pred, dst_existing = self._validate_bottom_hint(
                dst_parent, dh_arena, dh_key, dh_ino, dh_flags & 1,
                dkey, dst_name_b)
            if pred is None:
                self.stale_hints += 1
                _, dst_existing = dst_parent.dir_list.search(dkey, dst_name_b,
                                                             self.comp)
        if (src_parent.ino, src_dent.name_b) in view.deleted \
                or target.ino in view.deleted_inos:
            raise NotFound("source removed in batch")
        dst_pair = (dst_parent.ino, dst_name_b)
        if dst_pair in view.created:
            raise Exists(dst_name_b.decode(errors="surrogateescape"))
        if dst_existing is not None and not dst_existing.dirty \
                and dst_pair not in view.deleted:
            raise Exists(dst_name_b.decode(errors="surrogateescape"))
        if target.kind == KIND_DIR and self._inside_subtree(target, dst_parent):
            raise KucoError("cannot move a directory into itself")

        plan.record = RenameOp(oplog_mod.T_RENAME, target.ino, src_parent.ino,
                               dst_parent.ino, src_dent.name_b, dst_name_b)
        view.add_deleted(src_parent.ino, src_dent.name_b)
        view.add_created(dst_parent.ino, dst_name_b, target.ino)
        state = self.state

        def apply(p):
            dkey = name_key(dst_name_b)
            dst_update, _ = dst_parent.dir_list.search(dkey, dst_name_b, self.comp)
            dst_node = dst_parent.dir_list.insert_at(dst_update, dkey, dst_name_b,
                                                     target.ino, dirty0=True)
            src_dent.dirty = True  # source disappears ...
            src_update, _ = src_parent.dir_list.search(src_dent.key,
                                                       src_dent.name_b, self.comp)
            src_parent.dir_list.unlink(src_dent, src_update, self.comp)
            state.retire_dentry(src_dent)
            dst_node.dirty = False  # ... then the destination appears
            now = time.time_ns()
            src_parent.mtime = now
            dst_parent.mtime = now

        plan.apply = apply

    def _inside_subtree(self, root_dir, candidate) -> bool:
        if root_dir is candidate:
            return True
        stack = [root_dir]
        table = self.state.table
        while stack:
            node = stack.pop()
            if node.kind != KIND_DIR:
                continue
            for dent in node.dir_list.iter_live():
                child = table.get(dent.ino)
                if child is None:
                    continue
                if child is candidate:
                    return True
                if child.kind == KIND_DIR:
                    stack.append(child)
        return False

    # WRITE_COMMIT -----------------------------------------------------------

    def _validate_write_commit(self, req, view, plan):
        (ino, gen, offset, size, version, nruns,
         scratch) = wire.WRITE_HEAD.unpack_from(req.payload)
        if scratch:
            raw = self._read_scratch(req.cid, scratch, 2 + 12 * nruns)
            runs = wire.unpack_runs(raw, 2, nruns)
        else:
            if nruns > wire.MAX_INLINE_RUNS:
                raise KucoError("too many inline runs")
            runs = wire.unpack_runs(req.payload, wire.WRITE_HEAD.size, nruns)
        inode = self.state.table.get_checked(ino, gen)
        if inode.kind != KIND_FILE or ino in view.deleted_inos:
            raise StaleHandle("write target")
        if size < 1 or version < 1:
            raise KucoError("bad write geometry")
        first = offset // PAGE_SIZE
        last = (offset + size - 1) // PAGE_SIZE
        pages = []
        for p, c in runs:
            if c < 1 or p + c > self.region.data_pages:
                raise KucoError("bad extent run")
            pages.extend(range(p, p + c))
        if len(pages) != last - first + 1:
            raise KucoError("extent count does not cover the range")
        if not self.allocator.is_leased_to(req.cid, pages):
            raise LeaseViolation(f"client {req.cid} extents")
        plan.record = WriteOp(oplog_mod.T_WRITE, ino, offset, size, version,
                              tuple(runs))
        region = self.region
        allocator = self.allocator
        state = self.state

        def pre_log():
            region.set_permission(runs, pmem.READ_ONLY)

        def apply(p):
            replaced = commit_mapping(inode.block_map, first, pages, version)
            inode.size = max(inode.size, offset + size)
            inode.mtime = time.time_ns()
            inode.max_version = max(inode.max_version, version)
            allocator.commit(req.cid, pages)
            if replaced:
                state.retire_pages(replaced, allocator.free_pages)
            if inode.lock_ring is not None:
                inode.lock_ring.release(version)

        plan.pre_log = pre_log
        plan.apply = apply

    # non-mutating ops -------------------------------------------------------

    def _validate_open(self, req, view, plan):
        ino, gen, _ = wire.OPEN_BODY.unpack_from(req.payload)
        inode = self.state.table.get_checked(ino, gen)
        if ino in view.deleted_inos:
            raise NotFound(str(ino))
        plan.apply = self._make_open_apply(inode)

    def _make_open_apply(self, inode):
        def apply(p):
            inode.open_count += 1
            self._ensure_ring(inode)
            p.value = struct.pack("<QQ", inode.ino, inode.generation)
        return apply

    def _ensure_ring(self, inode):
        if inode.lock_ring is None:
            ring = LockRing(self.config.ring_slots)
            ring.seed_version(inode.max_version)
            inode.lock_ring = ring

    def _validate_close(self, req, view, plan):
        ino, gen, _ = wire.CLOSE_BODY.unpack_from(req.payload)
        exiting = bool(req.flags & wire.FLAG_EXIT)
        inode = None
        if ino or gen:
            try:
                inode = self.state.table.get_checked(ino, gen)
            except StaleHandle:
                if not exiting:
                    raise BadFd(f"ino {ino}") from None
        state = self.state
        allocator = self.allocator
        region = self.region

        def apply(p):
            if inode is not None and inode.open_count > 0:
                inode.open_count -= 1
                if inode.open_count == 0 and inode.lock_ring is not None:
                    ring = inode.lock_ring
                    inode.lock_ring = None
                    state.epochs.retire(ring, lambda _r: None)
            if exiting:
                seat = self.seats.get(req.cid)
                pool = sorted(allocator.leased.get(req.cid, ()))
                if pool:
                    runs = _pages_to_runs(pool)
                    region.set_permission(runs, pmem.READ_ONLY)
                allocator.release_client(req.cid)
                if seat is not None and seat.epoch_rec is not None:
                    state.epochs.deregister(req.cid)
                    seat.active = False

        plan.apply = apply

    def _validate_lease(self, req, view, plan):
        count, = wire.LEASE_BODY.unpack_from(req.payload)
        if not 1 <= count <= 4096:
            raise KucoError("lease count out of range")
        allocator = self.allocator
        region = self.region

        def apply(p):
            runs = allocator.alloc_pages(count)  # raises OutOfSpace intact
            if len(runs) > wire.MAX_RESP_RUNS:
                keep, spill = runs[:wire.MAX_RESP_RUNS], runs[wire.MAX_RESP_RUNS:]
                for page, n in spill:
                    allocator.free_pages(range(page, page + n))
                runs = keep
            region.set_permission(runs, pmem.WRITABLE, req.cid)
            allocator.lease_to(req.cid, runs)
            p.value = struct.pack("<H", len(runs)) + wire.pack_runs(runs)

        def apply_guarded(p):
            try:
                apply(p)
            except OutOfSpace:
                p.value = b""
                raise

        plan.apply = apply_guarded

    def _validate_read_fallback(self, req, view, plan):
        ino, gen, offset, size, dest = wire.READFB_BODY.unpack_from(req.payload)
        inode = self.state.table.get_checked(ino, gen)
        if inode.kind != KIND_FILE:
            raise KucoError("read of a directory")
        if size > PAGE_SIZE:
            raise KucoError("fallback reads are at most one page")
        if not self.allocator.is_leased_to(req.cid, [dest]):
            raise LeaseViolation("fallback destination page")
        region = self.region

        def apply(p):
            end = min(offset + size, inode.size)
            data = b""
            if end > offset:
                first = offset // PAGE_SIZE
                runs = []
                for idx in range(first, (end - 1) // PAGE_SIZE + 1):
                    page = inode.block_map.get_raw(idx) & ((1 << 40) - 1)
                    a = max(offset, idx * PAGE_SIZE)
                    b = min(end, (idx + 1) * PAGE_SIZE)
                    runs.append((page, a - idx * PAGE_SIZE, b - a))
                data = gather_bytes(region.volatile,
                                    region.segments["data"].offset, runs)
            if data:
                region.store(region.page_addr(dest), data)
            p.value = struct.pack("<I", len(data))

        plan.apply = apply

    def _validate_register(self, req, view, plan):
        seat = self.seats[req.cid]
        state = self.state

        def apply(p):
            if not seat.active:
                seat.epoch_rec = state.epochs.register(seat.cid)
                seat.active = True
            p.value = seat.key

        plan.apply = apply

    # -- stats ---------------------------------------------------------------

    def counters(self) -> dict:
        mean_lat = (self.req_latency_ns / self.req_latency_count
                    if self.req_latency_count else 0.0)
        return {
            "requests": self.requests,
            "batches": self.batches,
            "key_comparisons": self.comp.count,
            "stale_hints": self.stale_hints,
            "tower_caps": self.tower_caps,
            "apply_errors": len(self.apply_errors),
            "checkpoints": self.checkpoints,
            "op_counts": dict(self.op_counts),
            "mean_request_latency_ns": mean_lat,
            "implied_cap_ops_per_s": 1e9 / mean_lat if mean_lat else 0.0,
            "busy_ns": self.busy_ns,
        }


def _pages_to_runs(pages: list[int]) -> list[tuple[int, int]]:
    runs = []
    start = prev = pages[0]
    for p in pages[1:]:
        if p != prev + 1:
            runs.append((start, prev - start + 1))
            start = p
        prev = p
    runs.append((start, prev - start + 1))
    return runs


def wire_opname(opcode: int) -> str:
    return {
        wire.OP_OPEN: "open", wire.OP_CREAT: "creat", wire.OP_MKDIR: "mkdir",
        wire.OP_UNLINK: "unlink", wire.OP_RMDIR: "rmdir",
        wire.OP_RENAME: "rename", wire.OP_WRITE_COMMIT: "write_commit",
        wire.OP_LEASE_PAGES: "lease_pages", wire.OP_CLOSE: "close",
        wire.OP_READ_FALLBACK: "read_fallback", wire.OP_REGISTER: "register",
    }.get(opcode, f"op{opcode}")


_VALIDATORS = {
    wire.OP_OPEN: Master._validate_open,
    wire.OP_CREAT: Master._validate_creat,
    wire.OP_MKDIR: Master._validate_creat,
    wire.OP_UNLINK: Master._validate_unlink,
    wire.OP_RMDIR: Master._validate_rmdir,
    wire.OP_RENAME: Master._validate_rename,
    wire.OP_WRITE_COMMIT: Master._validate_write_commit,
    wire.OP_LEASE_PAGES: Master._validate_lease,
    wire.OP_CLOSE: Master._validate_close,
    wire.OP_READ_FALLBACK: Master._validate_read_fallback,
    wire.OP_REGISTER: Master._validate_register,
}
