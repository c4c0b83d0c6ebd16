"""Top-level file system instance: region + metadata + master + clients.

Two entry points: ``KucoFS.create`` formats a fresh region (superblock,
initial checkpoint of an empty root) and ``KucoFS.recover_image`` mounts a
crash image by loading the active checkpoint, replaying the log tail, then
immediately re-checkpointing so the mounted instance starts from a clean log.

The master can run as a background thread (``start``) for concurrent clients,
or inline: with no thread running, a client call drives ``poll_once`` itself,
which keeps single-threaded runs deterministic.
"""

from __future__ import annotations

from . import oplog as oplog_mod
from .blockmap import gather_bytes
from .master import Master, MasterConfig
from .metadata import FsState, KIND_DIR, iter_tree
from .oplog import OpLog, RecoveredState
from .pmem import PAGE_SIZE, PageAllocator, Region, RegionConfig
from .ulib import ClientHandle

DEFAULT_SIZE = 64 << 20


class KucoFS:
    def __init__(self, region: Region, allocator: PageAllocator, log: OpLog,
                 state: FsState, master: Master):
        self.region = region
        self.allocator = allocator
        self.log = log
        self.state = state
        self.master = master

    @classmethod
    def create(cls, size: int = DEFAULT_SIZE, *,
               region_config: RegionConfig | None = None,
               master_config: MasterConfig | None = None,
               tower_seed: int = 0x5EED) -> "KucoFS":
        region = Region.create(size, region_config)
        state = FsState.fresh(tower_seed)
        allocator = PageAllocator.fresh(region)
        log = OpLog(region)
        oplog_mod.checkpoint(region, log, allocator, state)
        master = Master(region, allocator, log, state, master_config)
        return cls(region, allocator, log, state, master)

    @classmethod
    def recover_image(cls, image, *,
                      region_config: RegionConfig | None = None,
                      master_config: MasterConfig | None = None,
                      tower_seed: int = 0x5EED) -> tuple["KucoFS", RecoveredState]:
        rec = oplog_mod.recover(image, tower_seed)
        region = Region.from_image(image, region_config)
        allocator = PageAllocator.rebuilt(region, rec.referenced)
        log = OpLog(region)
        master = Master(region, allocator, log, rec.state, master_config)
        master.checkpoint_now()  # start the new epoch from a clean log
        return cls(region, allocator, log, rec.state, master), rec

    # -- lifecycle -----------------------------------------------------------

    def connect(self, retry_cap: int | None = None) -> ClientHandle:
        if retry_cap is None:
            return ClientHandle(self)
        return ClientHandle(self, retry_cap=retry_cap)

    def start(self):
        self.master.start()

    def stop(self):
        self.master.stop()

    def close(self):
        self.stop()
        self.region.close()

    def crash_image(self, policy: str = "strict", seed: int = 0) -> bytes:
        return self.region.crash_snapshot(policy, seed)

    # -- whole-tree inspection (master-side, for harness and tests) -----------

    def list_tree(self) -> dict[str, tuple[str, int]]:
        return walk_state(self.state)

    def read_file(self, path: str) -> bytes:
        from .metadata import resolve_path
        res = resolve_path(self.state.table, path)
        if res.target_inode is None:
            raise FileNotFoundError(path)
        return read_state_file(res.target_inode, self.region.volatile,
                               self.region.segments["data"].offset)

    def counters(self) -> dict:
        region = self.region
        c = {
            "fence_count": region.fence_count,
            "flush_count": region.flush_count,
            "flushed_lines": region.flushed_lines,
            "tlb_flush_events": region.tlb_flush_events,
            "protection_faults": region.protection_faults,
            "epoch": self.state.epochs.global_epoch,
            "retired": self.state.epochs.retired_total,
            "freed": self.state.epochs.freed_total,
        }
        c.update(self.master.counters())
        return c


def walk_state(state: FsState) -> dict[str, tuple[str, int]]:
    """{path: (kind, size)} over the live tree."""
    out = {}
    for path, inode in iter_tree(state.table):
        kind = "DIR" if inode.kind == KIND_DIR else "FILE"
        out[path] = (kind, inode.size if kind == "FILE" else 0)
    return out


def read_state_file(inode, buffer, data_offset: int) -> bytes:
    """Master-side file content gather; quiescent callers only."""
    size = inode.size
    if size == 0:
        return b""
    runs = []
    for idx in range((size + PAGE_SIZE - 1) // PAGE_SIZE):
        page = inode.block_map.get_raw(idx) & ((1 << 40) - 1)
        a = idx * PAGE_SIZE
        b = min(size, a + PAGE_SIZE)
        runs.append((page, 0, b - a))
    return gather_bytes(buffer, data_offset, runs)
