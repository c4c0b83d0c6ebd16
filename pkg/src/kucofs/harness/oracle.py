"""Randomized-trace equivalence against the model file system.

Single-thread mode drives one client inline (deterministic) and checks the
tree against the model after every operation: the full structure (paths,
kinds, sizes) every step, contents of everything the op touched, a couple of
rotating content spot-checks, and a full content sweep every
``full_every`` steps and at the end.  Multi-thread mode runs concurrent
clients, journals the master's commit order, then replays that journal into
an inode-keyed model and requires the final states to be identical.
"""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field

from .. import fs as fs_mod
from ..errors import KucoError
from ..master import MasterConfig
from ..ulib import O_CREAT
from .model import InoModel, ModelFS
from .opgen import OpGenerator
from .tracefile import write_data


@dataclass
class OracleResult:
    passed: bool
    ops_done: int
    elapsed_s: float
    divergence: str | None = None
    counters: dict = field(default_factory=dict)
    errors_seen: int = 0

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "ops_done": self.ops_done,
            "elapsed_s": round(self.elapsed_s, 3),
            "divergence": self.divergence,
            "errors_seen": self.errors_seen,
            "counters": self.counters,
        }


class FdCache:
    """Keeps one open fd per path and closes it before the path disappears."""

    def __init__(self, client):
        self.client = client
        self.fds: dict[str, int] = {}

    def fd_for(self, path: str) -> int:
        fd = self.fds.get(path)
        if fd is None:
            fd = self.client.open(path)
            self.fds[path] = fd
        return fd

    def drop(self, path: str):
        fd = self.fds.pop(path, None)
        if fd is not None:
            try:
                self.client.close(fd)
            except KucoError:
                pass

    def drop_prefix(self, path: str):
        prefix = path.rstrip("/") + "/"
        for p in [p for p in self.fds if p == path or p.startswith(prefix)]:
            self.drop(p)


def apply_to_fs(client, fdcache: FdCache, op: tuple):
    """Returns ('ok', value) or ('err', ExceptionClassName)."""
    try:
        kind = op[0]
        if kind == "creat":
            client.creat(op[1])
            return "ok", None
        if kind == "mkdir":
            client.mkdir(op[1])
            return "ok", None
        if kind == "unlink":
            fdcache.drop(op[1])
            client.unlink(op[1])
            return "ok", None
        if kind == "rmdir":
            client.rmdir(op[1])
            return "ok", None
        if kind == "rename":
            fdcache.drop_prefix(op[1])
            fdcache.drop_prefix(op[2])
            client.rename(op[1], op[2])
            return "ok", None
        if kind == "write":
            data = write_data(op[4], op[3])
            client.pwrite(fdcache.fd_for(op[1]), data, op[2])
            return "ok", None
        if kind == "write_raw":
            client.pwrite(fdcache.fd_for(op[1]), op[3], op[2])
            return "ok", None
        if kind == "read":
            return "ok", client.pread(fdcache.fd_for(op[1]), op[3], op[2])
        if kind == "readdir":
            return "ok", sorted(client.readdir(op[1]))
        if kind == "stat":
            st = client.stat(op[1])
            return "ok", (st.kind, st.size)
        raise AssertionError(kind)
    except KucoError as exc:
        return "err", type(exc).__name__


def apply_to_model(model: ModelFS, op: tuple):
    try:
        kind = op[0]
        if kind == "creat":
            model.creat(op[1])
            return "ok", None
        if kind == "mkdir":
            model.mkdir(op[1])
            return "ok", None
        if kind == "unlink":
            model.unlink(op[1])
            return "ok", None
        if kind == "rmdir":
            model.rmdir(op[1])
            return "ok", None
        if kind == "rename":
            model.rename(op[1], op[2])
            return "ok", None
        if kind == "write":
            model.write(op[1], op[2], write_data(op[4], op[3]))
            return "ok", None
        if kind == "write_raw":
            model.write(op[1], op[2], op[3])
            return "ok", None
        if kind == "read":
            return "ok", model.read(op[1], op[2], op[3])
        if kind == "readdir":
            return "ok", sorted(model.readdir(op[1]))
        if kind == "stat":
            return "ok", model.stat(op[1])
        raise AssertionError(kind)
    except KucoError as exc:
        return "err", type(exc).__name__


def touched_paths(op: tuple) -> list[str]:
    kind = op[0]
    if kind in ("creat", "mkdir", "unlink", "rmdir", "write", "write_raw"):
        return [op[1]]
    if kind == "rename":
        return [op[1], op[2]]
    return []


class Verifier:
    """Structure check every op; contents on touch, rotation, and sweeps."""

    def __init__(self, fs, model: ModelFS, seed: int, spot_checks: int = 2,
                 full_every: int = 2000):
        self.fs = fs
        self.model = model
        self.rng = random.Random(seed ^ 0xC0FFEE)
        self.spot_checks = spot_checks
        self.full_every = full_every

    def _content_equal(self, path: str) -> str | None:
        want = bytes(self.model.files[path])
        got = self.fs.read_file(path)
        if want != got:
            i = next((j for j in range(min(len(want), len(got)))
                      if want[j] != got[j]), min(len(want), len(got)))
            return (f"content mismatch at {path!r}: lengths {len(got)} vs "
                    f"{len(want)}, first diff at byte {i}")
        return None

    def check(self, opno: int, op: tuple) -> str | None:
        live = fs_mod.walk_state(self.fs.state)
        want = self.model.listing()
        if live != want:
            extra = sorted(set(live) - set(want))[:5]
            missing = sorted(set(want) - set(live))[:5]
            diffsz = sorted(p for p in set(live) & set(want)
                            if live[p] != want[p])[:5]
            return (f"structure mismatch after op {opno} {op!r}: "
                    f"extra={extra} missing={missing} size/kind={diffsz}")
        for path in touched_paths(op):
            if path in self.model.files:
                err = self._content_equal(path)
                if err:
                    return f"after op {opno} {op!r}: {err}"
        pool = sorted(self.model.files)
        for _ in range(min(self.spot_checks, len(pool))):
            err = self._content_equal(self.rng.choice(pool))
            if err:
                return f"spot check after op {opno}: {err}"
        if self.full_every and opno % self.full_every == 0:
            return self.full_content_check(opno)
        return None

    def full_content_check(self, opno: int) -> str | None:
        for path in sorted(self.model.files):
            err = self._content_equal(path)
            if err:
                return f"full sweep at op {opno}: {err}"
        return None


def run_oracle_single(ops: int, seed: int, pmem_size: int = 64 << 20,
                      offload: bool = True, io_max: int = 16384,
                      full_every: int = 2000) -> OracleResult:
    t0 = time.perf_counter()
    fs = fs_mod.KucoFS.create(pmem_size,
                              master_config=MasterConfig(offload_index=offload))
    client = fs.connect()
    model = ModelFS()
    gen = OpGenerator(seed, model, io_max=io_max)
    fdcache = FdCache(client)
    verifier = Verifier(fs, model, seed, full_every=full_every)
    errors_seen = 0
    divergence = None
    done = 0
    for i in range(1, ops + 1):
        op = gen.next_op()
        got = apply_to_fs(client, fdcache, op)
        want = apply_to_model(model, op)
        if got != want:
            divergence = (f"op {i} {op!r}: fs -> {got!r}, model -> {want!r}")
            done = i
            break
        if got[0] == "err":
            errors_seen += 1
        divergence = verifier.check(i, op)
        done = i
        if divergence:
            break
    if divergence is None:
        divergence = verifier.full_content_check(done)
    elapsed = time.perf_counter() - t0
    counters = fs.counters()
    return OracleResult(divergence is None, done, elapsed, divergence,
                        counters, errors_seen)


def run_oracle_threads(ops: int, threads: int, seed: int,
                       pmem_size: int = 64 << 20,
                       io_max: int = 8192) -> OracleResult:
    """Concurrent clients; final state must equal the replayed commit order."""
    import threading

    t0 = time.perf_counter()
    fs = fs_mod.KucoFS.create(pmem_size)
    fs.master.journal = journal = []
    fs.start()
    per_thread = max(1, ops // threads)
    shared_names = [f"/s{i:02d}" for i in range(24)]
    results: list[int] = [0] * threads
    failures: list[str] = []

    def worker(tid: int):
        rng = random.Random((seed << 8) | tid)
        client = fs.connect()
        fdcache = FdCache(client)
        my_names = [f"/t{tid}_{i:03d}" for i in range(16)]
        pool = shared_names + my_names
        try:
            for i in range(per_thread):
                path = rng.choice(pool)
                roll = rng.random()
                try:
                    if roll < 0.25:
                        client.creat(path)
                    elif roll < 0.60:
                        size = rng.randint(1, io_max)
                        data = rng.randbytes(size)
                        offset = rng.randrange(0, 4 * io_max)
                        fd = fdcache.fd_for(path)
                        client.pwrite(fd, data, offset)
                        if rng.random() < 0.125:
                            back = client.pread(fd, size, offset)
                            if back != data:
                                failures.append(
                                    f"t{tid}: read-your-write mismatch on {path}")
                                return
                    elif roll < 0.75:
                        fd = fdcache.fd_for(path)
                        client.pread(fd, rng.randint(1, io_max),
                                     rng.randrange(0, 4 * io_max))
                    elif roll < 0.85:
                        fdcache.drop(path)
                        client.unlink(path)
                    elif roll < 0.95:
                        dst = rng.choice(pool)
                        fdcache.drop(path)
                        fdcache.drop(dst)
                        client.rename(path, dst)
                    else:
                        client.readdir("/")
                except KucoError:
                    pass
                results[tid] += 1
        finally:
            for p in list(fdcache.fds):
                fdcache.drop(p)

    ts = [threading.Thread(target=worker, args=(i,)) for i in range(threads)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    fs.stop()

    divergence = failures[0] if failures else None
    if divergence is None:
        replay = InoModel()
        for _seq, rec, data in journal:
            replay.apply(rec, data)
        live = fs.list_tree()
        want = replay.listing()
        if live != want:
            divergence = (f"final structure: extra={sorted(set(live)-set(want))[:5]} "
                          f"missing={sorted(set(want)-set(live))[:5]} "
                          f"diff={sorted(p for p in set(live) & set(want) if live[p] != want[p])[:5]}")
        else:
            for path, data in replay.contents_by_path().items():
                got = fs.read_file(path)
                if got != data:
                    divergence = (f"final content mismatch at {path!r}: "
                                  f"{len(got)} vs {len(data)} bytes")
                    break
    elapsed = time.perf_counter() - t0
    return OracleResult(divergence is None, sum(results), elapsed, divergence,
                        fs.counters())


def run_oracle(ops: int, threads: int = 1, seed: int = 1,
               pmem_size: int = 64 << 20, offload: bool = True) -> OracleResult:
    if threads <= 1:
        return run_oracle_single(ops, seed, pmem_size, offload)
    return run_oracle_threads(ops, threads, seed, pmem_size)
