"""Crash-test trace files: one operation per line.

    creat /path
    mkdir /path
    unlink /path
    rmdir /path
    rename /src /dst
    write /path OFFSET SIZE #SEED      data = Random(SEED).randbytes(SIZE)
    write /path OFFSET SIZE 0xHEX      explicit bytes
    read /path OFFSET SIZE
    checkpoint                          force a checkpoint

Lines starting with '#' and blank lines are ignored.
"""

from __future__ import annotations

import random

from .model import ModelFS
from .opgen import OpGenerator


def parse_trace(text: str) -> list[tuple]:
    ops = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        op = parts[0]
        try:
            if op in ("creat", "mkdir", "unlink", "rmdir", "readdir", "stat"):
                ops.append((op, parts[1]))
            elif op == "rename":
                ops.append((op, parts[1], parts[2]))
            elif op == "read":
                ops.append((op, parts[1], int(parts[2]), int(parts[3])))
            elif op == "write":
                offset, size = int(parts[2]), int(parts[3])
                tag = parts[4]
                if tag.startswith("#"):
                    ops.append((op, parts[1], offset, size, int(tag[1:])))
                elif tag.startswith("0x"):
                    data = bytes.fromhex(tag[2:])
                    if len(data) != size:
                        raise ValueError("hex length != size")
                    ops.append(("write_raw", parts[1], offset, data))
                else:
                    raise ValueError(f"bad data tag {tag!r}")
            elif op == "checkpoint":
                ops.append(("checkpoint",))
            else:
                raise ValueError(f"unknown op {op!r}")
        except (IndexError, ValueError) as exc:
            raise ValueError(f"trace line {lineno}: {raw!r}: {exc}") from exc
    return ops


def format_trace(ops: list[tuple]) -> str:
    lines = []
    for op in ops:
        if op[0] == "write":
            lines.append(f"write {op[1]} {op[2]} {op[3]} #{op[4]}")
        elif op[0] == "write_raw":
            lines.append(f"write {op[1]} {op[2]} {len(op[3])} 0x{op[3].hex()}")
        elif op[0] == "checkpoint":
            lines.append("checkpoint")
        else:
            lines.append(" ".join(str(x) for x in op))
    return "\n".join(lines) + "\n"


def write_data(seed: int, size: int) -> bytes:
    return random.Random(seed).randbytes(size)


def generate_trace(ops: int, seed: int, io_max: int = 16384,
                   checkpoint_every: int = 0) -> list[tuple]:
    """A mixed valid-op trace; mutating ops only fire when they would succeed.

    checkpoint_every > 0 sprinkles explicit checkpoints so the crash tester
    covers the indicator-flip windows as well.
    """
    model = ModelFS()
    gen = OpGenerator(seed, model, io_max=io_max)
    out: list[tuple] = []
    while len(out) < ops:
        op = gen.next_op()
        try:
            if op[0] == "creat":
                model.creat(op[1])
            elif op[0] == "mkdir":
                model.mkdir(op[1])
            elif op[0] == "unlink":
                model.unlink(op[1])
            elif op[0] == "rmdir":
                model.rmdir(op[1])
            elif op[0] == "rename":
                model.rename(op[1], op[2])
            elif op[0] == "write":
                model.write(op[1], op[2], write_data(op[4], op[3]))
            elif op[0] in ("read", "readdir", "stat"):
                pass  # no state effect; keep in the trace as-is
        except Exception:
            continue  # generated an invalid op; crash traces keep only valid ones
        out.append(op)
        if checkpoint_every and len(out) % checkpoint_every == 0:
            out.append(("checkpoint",))
    return out
