"""Plain-text checkpoint container.

Layout::

    bpfa-checkpoint 1
    kind <svi|chain>
    <key> <value>          # header lines: K, D, iteration, seed, ...
    end-header
    [<name> <dim>x<dim>...]
    <values, whitespace separated, shortest round-trip repr>
    ...

Floats are written with ``repr`` (at most 17 significant digits), which
round-trips every IEEE double exactly.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

MAGIC = "bpfa-checkpoint 1"


def write_checkpoint(path, kind: str, header: dict, arrays: dict) -> None:
    lines = [MAGIC, f"kind {kind}"]
    for key, value in header.items():
        if any(ch.isspace() for ch in str(key)):
            raise ValueError(f"header key {key!r} contains whitespace")
        lines.append(f"{key} {value}")
    lines.append("end-header")
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype=float)
        shape = "x".join(str(n) for n in arr.shape) if arr.ndim else "scalar"
        lines.append(f"[{name} {shape}]")
        lines.append(" ".join(repr(float(v)) for v in arr.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def read_checkpoint(path):
    """Return ``(kind, header, arrays)``; header values are left as strings."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != MAGIC:
        raise ValueError(f"{path}: not a bpfa checkpoint")
    if not lines[1].startswith("kind "):
        raise ValueError(f"{path}: missing kind line")
    kind = lines[1].split(None, 1)[1]
    header = {}
    i = 2
    while i < len(lines) and lines[i] != "end-header":
        key, _, value = lines[i].partition(" ")
        header[key] = value
        i += 1
    if i == len(lines):
        raise ValueError(f"{path}: unterminated header")
    i += 1
    arrays = {}
    while i < len(lines):
        tag = lines[i]
        if not (tag.startswith("[") and tag.endswith("]")):
            raise ValueError(f"{path}: malformed section header {tag!r}")
        name, shape = tag[1:-1].split()
        data = i + 1 < len(lines) and lines[i + 1].strip()
        values = np.array([float(v) for v in data.split()] if data else [], dtype=float)
        if shape == "scalar":
            arrays[name] = values[0]
        else:
            dims = tuple(int(n) for n in shape.split("x"))
            arrays[name] = values.reshape(dims)
        i += 2
    return kind, header, arrays
