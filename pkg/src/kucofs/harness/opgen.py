"""Seeded random operation streams over a live model view.

The generator reads the oracle's ModelFS to pick mostly-valid targets and
deliberately mixes in a small fraction of invalid operations (duplicate
creats, missing unlink targets) so error paths are compared too.  The same
stream feeds the single-thread oracle and the trace generator.
"""

from __future__ import annotations

import random

from .model import ModelFS

WEIGHTS = [
    ("creat", 18), ("mkdir", 5), ("write", 30), ("read", 15),
    ("unlink", 9), ("rmdir", 3), ("rename", 8), ("readdir", 5), ("stat", 7),
]


class OpGenerator:
    def __init__(self, seed: int, model: ModelFS, max_files: int = 48,
                 max_dirs: int = 8, io_max: int = 16384, depth_max: int = 3):
        self.rng = random.Random(seed)
        self.model = model
        self.max_files = max_files
        self.max_dirs = max_dirs
        self.io_max = io_max
        self.depth_max = depth_max
        self._counter = 0
        self._ops = [name for name, w in WEIGHTS for _ in range(w)]

    def _fresh_name(self, prefix: str = "f") -> str:
        self._counter += 1
        return f"{prefix}{self._counter:06d}"

    def _some_dir(self) -> str:
        return self.rng.choice(sorted(self.model.dirs))

    def _some_file(self) -> str | None:
        if not self.model.files:
            return None
        return self.rng.choice(sorted(self.model.files))

    def next_op(self) -> tuple:
        rng = self.rng
        model = self.model
        kind = rng.choice(self._ops)
        if len(model.files) < 4 and kind in ("write", "read", "unlink", "rename"):
            kind = "creat"
        if len(model.files) >= self.max_files and kind == "creat":
            kind = "unlink"

        if kind == "creat":
            if model.files and rng.random() < 0.05:
                return ("creat", rng.choice(sorted(model.files)))  # Exists
            d = self._some_dir()
            return ("creat", (d.rstrip("/") or "") + "/" + self._fresh_name())
        if kind == "mkdir":
            if len(model.dirs) >= self.max_dirs:
                return ("readdir", self._some_dir())
            d = self._some_dir()
            if d.count("/") >= self.depth_max:
                d = "/"
            return ("mkdir", (d.rstrip("/") or "") + "/" + self._fresh_name("d"))
        if kind == "write":
            f = self._some_file()
            size = len(model.files[f])
            offset = rng.randrange(0, max(size, 1) + 2 * self.io_max)
            length = rng.randint(1, self.io_max)
            return ("write", f, offset, length, rng.getrandbits(32))
        if kind == "read":
            f = self._some_file()
            size = len(model.files[f])
            offset = rng.randrange(0, max(size, 1) + 4096)
            length = rng.randint(1, self.io_max)
            return ("read", f, offset, length)
        if kind == "unlink":
            f = self._some_file()
            if f is None or rng.random() < 0.05:
                return ("unlink", "/nope" + self._fresh_name())  # NotFound
            return ("unlink", f)
        if kind == "rmdir":
            d = self._some_dir()
            if d == "/":
                return ("readdir", "/")
            return ("rmdir", d)
        if kind == "rename":
            f = self._some_file()
            if rng.random() < 0.1 and len(model.files) > 1:
                dst = rng.choice(sorted(model.files))  # likely Exists
            else:
                d = self._some_dir()
                dst = (d.rstrip("/") or "") + "/" + self._fresh_name("r")
            return ("rename", f, dst)
        if kind == "readdir":
            return ("readdir", self._some_dir())
        if kind == "stat":
            if rng.random() < 0.1:
                return ("stat", "/missing" + self._fresh_name())
            pool = sorted(model.dirs) + sorted(model.files)
            return ("stat", rng.choice(pool))
        raise AssertionError(kind)
