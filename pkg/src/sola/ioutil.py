"""Small filesystem and parallelism helpers shared across modules."""

from __future__ import annotations

import os
import tempfile

from .errors import ConfigError, IoError


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write via a temp file + rename so readers never see partial output."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    tmp = None
    try:
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp.")
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
        tmp = None
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    finally:
        if tmp is not None and os.path.exists(tmp):
            os.unlink(tmp)


def atomic_write_text(path: str, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def worker_count() -> int:
    """Worker cap from SOLA_THREADS; 0 or unset means one per CPU."""
    raw = os.environ.get("SOLA_THREADS", "").strip()
    if raw in ("", "0"):
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"SOLA_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError(f"SOLA_THREADS must be >= 0, got {n}")
    return n
