"""Volatile metadata arena: inode table, skip-list directories, epoch reclaim.

Everything here is rebuildable from the persistent image (checkpoint + log),
so it lives as ordinary objects.  The concurrency contract is one mutator
(the master) against many lock-free readers (clients):

  * A dentry is published by setting its bottom-level link last, after the
    node and its express-lane links are fully formed, so readers never see a
    half-built entry.
  * Removal sets the dirty flag first; readers skip dirty entries, so an
    unlink or rename is visible atomically.
  * Removed nodes are retired to the epoch manager and only freed (poisoned)
    once every registered client has moved past the retire epoch.

Clients resolve pathnames themselves and hand the master *handles*: the
target's arena index plus echoed (key, ino) fields that the master checks
against the live object before trusting, along with per-level predecessor
echoes so an insert or unlink needs no master-side search.
"""

from __future__ import annotations

import heapq
import random
import threading
from dataclasses import dataclass, field

from .blockmap import BlockMap
from .errors import NotADirectory, NotFound, StaleHandle
from .util import fnv1a64

KIND_FILE = 1
KIND_DIR = 2

MAX_LEVEL = 16
MAX_NAME = 255

ROOT_INO = 0


class CompCounter:
    """Counts (key, name) entry comparisons; the offloading metric."""

    __slots__ = ("count",)

    def __init__(self):
        self.count = 0


_NULL_COUNTER = CompCounter()


class Arena:
    """Stable integer ids for dentries so handles can cross the message ring.

    Index 0 is reserved as null.  Slots are recycled only after epoch-based
    reclamation frees the occupant, so a stale handle either finds the same
    (now dirty) object or fails the echoed-field check.  ``reuses`` counts
    slot recycles: pointer-identity echoes (the express-lane tower hints) are
    only trustworthy while no recycle happened since the client read them,
    because a recycled slot can hold an unrelated entry at the same index.
    """

    def __init__(self):
        self._slots: list = [None]
        self._free: list[int] = []
        self.reuses = 0

    def add(self, obj) -> int:
        if self._free:
            idx = self._free.pop()
            self._slots[idx] = obj
            self.reuses += 1
        else:
            idx = len(self._slots)
            self._slots.append(obj)
        obj.arena_idx = idx
        return idx

    def get(self, idx: int):
        if 0 < idx < len(self._slots):
            return self._slots[idx]
        return None

    def release(self, idx: int):
        if 0 < idx < len(self._slots) and self._slots[idx] is not None:
            self._slots[idx] = None
            self._free.append(idx)


class Dentry:
    __slots__ = ("key", "name_b", "ino", "dirty", "level", "forward",
                 "arena_idx", "freed")

    def __init__(self, key: int, name_b: bytes, ino: int, level: int):
        self.key = key
        self.name_b = name_b
        self.ino = ino
        self.dirty = False
        self.level = level
        self.forward: list = [None] * level
        self.arena_idx = 0
        self.freed = False

    def __repr__(self):
        return f"<Dentry {self.name_b!r} ino={self.ino} dirty={self.dirty}>"


def name_key(name_b: bytes) -> int:
    return fnv1a64(name_b)


def _poison_dentry(node: Dentry):
    node.freed = True
    node.forward = None
    node.ino = -1


class SkipList:
    """Sorted-by-(key, name) dentry list; lock-free reads, master-only writes."""

    def __init__(self, rng: random.Random, arena: Arena):
        self.rng = rng
        self.arena = arena
        self.head = Dentry(-1, b"", 0, MAX_LEVEL)
        arena.add(self.head)

    def _less(self, node: Dentry, key: int, name_b: bytes,
              counter: CompCounter) -> bool:
        counter.count += 1
        if node.freed:
            raise StaleHandle("traversal touched a freed dentry")
        if node.key != key:
            return node.key < key
        return node.name_b < name_b

    def search(self, key: int, name_b: bytes, counter: CompCounter = _NULL_COUNTER):
        """Returns (update vector, candidate-or-None); candidate may be dirty."""
        update = [self.head] * MAX_LEVEL
        x = self.head
        for i in range(MAX_LEVEL - 1, -1, -1):
            nxt = x.forward[i]
            while nxt is not None and self._less(nxt, key, name_b, counter):
                x = nxt
                nxt = x.forward[i]
            update[i] = x
        cand = update[0].forward[0]
        counter.count += 1
        if cand is not None and cand.key == key and cand.name_b == name_b:
            return update, cand
        return update, None

    def lookup(self, key: int, name_b: bytes,
               counter: CompCounter = _NULL_COUNTER) -> Dentry | None:
        """Lock-free; dirty entries are treated as absent."""
        _, cand = self.search(key, name_b, counter)
        if cand is None or cand.dirty:
            return None
        return cand

    def draw_level(self) -> int:
        level = 1
        while level < MAX_LEVEL and self.rng.random() < 0.5:
            level += 1
        return level

    def insert_at(self, update: list, key: int, name_b: bytes, ino: int,
                  dirty0: bool = False, level: int | None = None,
                  max_level: int = MAX_LEVEL) -> Dentry:
        """Link a new node below the given per-level predecessors.

        The caller must guarantee update[i] is the true predecessor at every
        level below the final height; max_level caps the tower when only a
        prefix of the vector is trustworthy.  Express lanes first, the bottom
        link last: the single bottom store publishes the entry to readers.
        """
        if level is None:
            level = min(self.draw_level(), max_level)
        node = Dentry(key, name_b, ino, level)
        node.dirty = dirty0
        for i in range(level):
            node.forward[i] = update[i].forward[i]
        self.arena.add(node)
        for i in range(level - 1, 0, -1):
            update[i].forward[i] = node
        update[0].forward[0] = node  # publishing store
        return node

    def unlink(self, node: Dentry, update: list | None = None,
               counter: CompCounter = _NULL_COUNTER):
        """Dirty is already set by the caller; detach from every lane, bottom last."""
        for i in range(node.level - 1, -1, -1):
            pred = update[i] if update is not None else None
            if pred is None or pred.freed or pred.forward is None \
                    or pred.forward[i] is not node:
                pred = self._find_pred_at(node, i, counter)
            if pred is not None:
                pred.forward[i] = node.forward[i]

    def _find_pred_at(self, node: Dentry, level: int,
                      counter: CompCounter) -> Dentry | None:
        x = self.head
        while True:
            nxt = x.forward[level]
            if nxt is None:
                return None
            if nxt is node:
                return x
            if not self._less(nxt, node.key, node.name_b, counter):
                return None  # first >= position is some other node
            x = nxt

    def iter_live(self):
        """Bottom-level iteration skipping dirty entries (weakly consistent)."""
        x = self.head.forward[0]
        while x is not None:
            if x.forward is None:
                raise StaleHandle("iteration touched a freed dentry")
            if not x.dirty:
                yield x
            x = x.forward[0]

    def is_empty(self) -> bool:
        for _ in self.iter_live():
            return False
        return True

    def live_entries(self) -> list[tuple[int, bytes, int]]:
        return [(d.key, d.name_b, d.ino) for d in self.iter_live()]


class Inode:
    __slots__ = ("ino", "kind", "size", "mtime", "mode", "generation", "dirty",
                 "dir_list", "block_map", "lock_ring", "open_count",
                 "max_version", "freed")

    def __init__(self, ino: int, kind: int, mode: int, generation: int,
                 rng: random.Random | None = None, arena: Arena | None = None):
        self.ino = ino
        self.kind = kind
        self.size = 0
        self.mtime = 0
        self.mode = mode
        self.generation = generation
        self.dirty = False
        self.dir_list = SkipList(rng, arena) if kind == KIND_DIR else None
        self.block_map = BlockMap() if kind == KIND_FILE else None
        self.lock_ring = None
        self.open_count = 0
        self.max_version = 0
        self.freed = False

    def __repr__(self):
        k = "DIR" if self.kind == KIND_DIR else "FILE"
        return f"<Inode {self.ino} {k} size={self.size}>"


class InodeTable:
    """Growable array of inode links; slot 0 is always the root directory."""

    def __init__(self):
        self.slots: list[Inode | None] = []
        self.gen_by_slot: list[int] = []
        self._free: list[int] = []

    def get(self, ino: int) -> Inode | None:
        if 0 <= ino < len(self.slots):
            return self.slots[ino]
        return None

    def get_checked(self, ino: int, generation: int) -> Inode:
        inode = self.get(ino)
        if inode is None or inode.dirty or inode.generation != generation:
            raise StaleHandle(f"ino {ino} gen {generation}")
        return inode

    def reserve(self) -> tuple[int, int]:
        """Pick a slot and its next generation without publishing anything."""
        if self._free:
            ino = heapq.heappop(self._free)
        else:
            ino = len(self.slots)
            self.slots.append(None)
            self.gen_by_slot.append(0)
        gen = self.gen_by_slot[ino] + 1
        return ino, gen

    def publish(self, inode: Inode):
        self.gen_by_slot[inode.ino] = inode.generation
        self.slots[inode.ino] = inode

    def install_at(self, ino: int, inode: Inode):
        """Recovery-time placement at a fixed slot."""
        while len(self.slots) <= ino:
            self.slots.append(None)
            self.gen_by_slot.append(0)
        self.slots[ino] = inode
        self.gen_by_slot[ino] = inode.generation

    def retire_slot(self, ino: int):
        self.slots[ino] = None
        heapq.heappush(self._free, ino)

    def rebuild_free_list(self):
        self._free = [i for i, s in enumerate(self.slots) if s is None]
        heapq.heapify(self._free)

    def live(self):
        return [i for i in self.slots if i is not None]


@dataclass
class ClientEpoch:
    cid: int
    active: bool = False
    epoch: int = 0


class EpochManager:
    """Three-generation deferred reclamation for lock-free readers.

    An item retired at epoch e is freed at the advance that makes the global
    epoch e+2: by then every registered client has observed an epoch > e.
    """

    def __init__(self):
        self.global_epoch = 2
        self.queues: dict[int, list] = {}
        self.clients: dict[int, ClientEpoch] = {}
        self.retired_total = 0
        self.freed_total = 0
        self._lock = threading.Lock()

    def register(self, cid: int) -> ClientEpoch:
        rec = ClientEpoch(cid)
        with self._lock:
            self.clients[cid] = rec
        return rec

    def deregister(self, cid: int):
        with self._lock:
            self.clients.pop(cid, None)

    @staticmethod
    def enter(rec: ClientEpoch, epoch_src: "EpochManager"):
        rec.epoch = epoch_src.global_epoch
        rec.active = True

    @staticmethod
    def exit(rec: ClientEpoch):
        rec.active = False

    def retire(self, obj, on_free):
        self.queues.setdefault(self.global_epoch, []).append((obj, on_free))
        self.retired_total += 1

    def advance(self) -> int:
        g = self.global_epoch
        with self._lock:
            for rec in self.clients.values():
                if rec.active and rec.epoch != g:
                    return 0
        self.global_epoch = g + 1
        freed = self.queues.pop(g - 1, [])
        for obj, cb in freed:
            cb(obj)
        self.freed_total += len(freed)
        return len(freed)

    def drain(self) -> int:
        """Force-free everything; only valid with no readers (tests, shutdown)."""
        n = 0
        for epoch in sorted(self.queues):
            for obj, cb in self.queues.pop(epoch):
                cb(obj)
                n += 1
        self.freed_total += n
        return n

    def pending_count(self) -> int:
        return sum(len(q) for q in self.queues.values())


# --------------------------------------------------------------------------
# Handles: what clients send instead of pathnames.

@dataclass(frozen=True)
class InodeHandle:
    ino: int
    generation: int


@dataclass(frozen=True)
class DentryHandle:
    arena_idx: int
    key: int
    ino: int
    is_head: bool = False


@dataclass
class ResolveResult:
    parent: InodeHandle
    parent_inode: Inode
    predecessor: DentryHandle
    tower_hints: list[tuple[int, int]]
    arena_epoch: int = 0
    target: InodeHandle | None = None
    target_inode: Inode | None = None
    target_dentry: DentryHandle | None = None
    target_dentry_obj: Dentry | None = None


def split_path(path: str) -> list[str]:
    if not path.startswith("/"):
        raise NotFound(f"path must be absolute: {path!r}")
    parts = [p for p in path.split("/") if p]
    for p in parts:
        if len(p.encode()) > MAX_NAME:
            raise NotFound(f"component too long: {p!r}")
    return parts


def _dentry_handle(node: Dentry, is_head: bool = False) -> DentryHandle:
    return DentryHandle(node.arena_idx, node.key, node.ino, is_head)


def _tower_hints(update: list) -> list[tuple[int, int]]:
    """Per-level (pred arena id, succ arena id) echoes, levels 0..15."""
    hints = []
    for i in range(MAX_LEVEL):
        pred = update[i]
        nxt = pred.forward[i] if pred.forward is not None else None
        hints.append((pred.arena_idx, nxt.arena_idx if nxt is not None else 0))
    return hints


def resolve_path(table: InodeTable, path: str,
                 counter: CompCounter = _NULL_COUNTER,
                 arena: Arena | None = None) -> ResolveResult:
    """Client-side iterative walk from the root; entirely lock-free.

    Returns the parent directory handle, the target (when live) and the
    bottom-level predecessor plus express-lane echoes for the final component,
    ready to piggyback on a creat/unlink/rename request.  The arena reuse
    count is snapshotted *before* the walk so the master can tell whether the
    pointer echoes might have been invalidated by slot recycling.
    """
    epoch = arena.reuses if arena is not None else 0
    parts = split_path(path)
    root = table.get(ROOT_INO)
    if root is None:
        raise NotFound("no root")
    if not parts:
        head = root.dir_list.head
        update = [head] * MAX_LEVEL
        return ResolveResult(
            parent=InodeHandle(ROOT_INO, root.generation), parent_inode=root,
            predecessor=_dentry_handle(head, is_head=True),
            tower_hints=_tower_hints(update), arena_epoch=epoch,
            target=InodeHandle(ROOT_INO, root.generation), target_inode=root,
        )
    cur = root
    for comp in parts[:-1]:
        if cur.kind != KIND_DIR:
            raise NotADirectory(comp)
        comp_b = comp.encode()
        dent = cur.dir_list.lookup(name_key(comp_b), comp_b, counter)
        if dent is None:
            raise NotFound(comp)
        nxt = table.get(dent.ino)
        if nxt is None or nxt.dirty:
            raise NotFound(comp)
        cur = nxt
    if cur.kind != KIND_DIR:
        raise NotADirectory(parts[-1])
    last_b = parts[-1].encode()
    key = name_key(last_b)
    update, cand = cur.dir_list.search(key, last_b, counter)
    res = ResolveResult(
        parent=InodeHandle(cur.ino, cur.generation), parent_inode=cur,
        predecessor=_dentry_handle(update[0], is_head=update[0] is cur.dir_list.head),
        tower_hints=_tower_hints(update), arena_epoch=epoch,
    )
    if cand is not None and not cand.dirty:
        target = table.get(cand.ino)
        if target is not None and not target.dirty:
            res.target = InodeHandle(target.ino, target.generation)
            res.target_inode = target
            res.target_dentry = _dentry_handle(cand)
            res.target_dentry_obj = cand
    return res


# --------------------------------------------------------------------------
# Whole-tree helpers (harness / state comparison).

def iter_tree(table: InodeTable):
    """Yield (path, inode) over the live tree, depth-first, skipping dirty."""
    root = table.get(ROOT_INO)
    stack = [("/", root)]
    while stack:
        path, inode = stack.pop()
        yield path, inode
        if inode.kind == KIND_DIR:
            for dent in inode.dir_list.iter_live():
                child = table.get(dent.ino)
                if child is None or child.dirty:
                    continue
                name = dent.name_b.decode(errors="surrogateescape")
                child_path = path.rstrip("/") + "/" + name
                stack.append((child_path, child))


@dataclass
class FsState:
    """The rebuildable half of the file system."""

    arena: Arena = field(default_factory=Arena)
    table: InodeTable = field(default_factory=InodeTable)
    epochs: EpochManager = field(default_factory=EpochManager)
    rng: random.Random = field(default_factory=lambda: random.Random(0x5EED))
    next_seq: int = 1

    @classmethod
    def fresh(cls, tower_seed: int = 0x5EED) -> "FsState":
        state = cls(rng=random.Random(tower_seed))
        ino, gen = state.table.reserve()
        root = Inode(ino, KIND_DIR, 0o755, gen, state.rng, state.arena)
        state.table.publish(root)
        return state

    @property
    def root(self) -> Inode:
        return self.table.get(ROOT_INO)

    def new_inode(self, ino: int, gen: int, kind: int, mode: int) -> Inode:
        return Inode(ino, kind, mode, gen, self.rng, self.arena)

    def retire_dentry(self, node: Dentry):
        arena = self.arena

        def _free(n: Dentry):
            arena.release(n.arena_idx)
            _poison_dentry(n)

        self.epochs.retire(node, _free)

    def retire_inode(self, inode: Inode, on_pages_free=None):
        table = self.table
        arena = self.arena
        pages = []
        if inode.kind == KIND_FILE and inode.block_map is not None:
            pages = [p for _, p in inode.block_map.iter_pages(
                (inode.size + 4095) // 4096)]

        def _free(node: Inode):
            table.retire_slot(node.ino)
            if node.dir_list is not None:
                arena.release(node.dir_list.head.arena_idx)
            node.freed = True
            node.dir_list = None
            node.block_map = None
            if pages and on_pages_free is not None:
                on_pages_free(pages)

        inode.dirty = True
        self.epochs.retire(inode, _free)

    def retire_pages(self, pages: list[int], on_free):
        if pages:
            self.epochs.retire(pages, on_free)
