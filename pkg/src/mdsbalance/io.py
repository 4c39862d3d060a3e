"""Result files: atomic CSV writes and a manifest written last."""
from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np


def format_value(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return "%.17g" % float(x)


def csv_text(header, rows) -> str:
    lines = [",".join(header)]
    lines += [",".join(format_value(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def atomic_write(path, text: str) -> Path:
    """Write ``text`` to ``path`` via a temp file in the same directory and a rename."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def blob_hash(data: bytes) -> str:
    """Content hash in git's blob format."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _plain(x):
    # numpy scalars and arrays in summaries
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"not JSON-serializable: {type(x).__name__}")


def params_slug(lam: float, L: int, k: int, n: int | None = None) -> str:
    slug = f"L{L}_k{k}_lam{lam:g}"
    return slug if n is None else f"{slug}_n{n}"


def write_outputs(tables: dict, output_dir, manifest_name: str, echo: dict,
                  wall_time: float, extra: dict | None = None) -> list[Path]:
    """Write each ``name -> (header, rows)`` table as CSV, then the manifest.

    Returns the written paths, manifest last.
    """
    out = Path(output_dir)
    written = []
    files = {}
    for name, (header, rows) in sorted(tables.items()):
        text = csv_text(header, rows)
        written.append(atomic_write(out / name, text))
        files[name] = blob_hash(text.encode())
    manifest = {"config": echo, "files": files, "wall_time_s": round(wall_time, 3)}
    if extra:
        manifest.update(extra)
    written.append(atomic_write(out / manifest_name, json.dumps(manifest, indent=2, sort_keys=True, default=_plain) + "\n"))
    return written
