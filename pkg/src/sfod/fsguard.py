"""Filesystem access recorder used to enforce source-free adaptation.

Built on :func:`sys.addaudithook`, so it sees every ``open`` issued through
Python (including PIL and numpy) as well as directory listings. Audit hooks
cannot be removed; one dispatcher is installed on first use and forwards to
whatever recorders are currently active.
"""

from __future__ import annotations

import os
import sys
import threading
from pathlib import Path

_active: list["AccessRecorder"] = []
_lock = threading.Lock()
_installed = False

_EVENTS = {"open", "os.listdir", "os.scandir", "os.stat"}


class SourceAccessError(PermissionError):
    pass


def _to_path(arg) -> str | None:
    if isinstance(arg, int) or arg is None:
        return None
    if isinstance(arg, bytes):
        arg = os.fsdecode(arg)
    try:
        return os.path.abspath(os.fspath(arg))
    except TypeError:
        return None


def _dispatch(event, args):
    if event not in _EVENTS or not _active or not args:
        return
    path = _to_path(args[0])
    if path is None:
        return
    for rec in list(_active):
        rec._check(event, path)


def _install():
    global _installed
    with _lock:
        if not _installed:
            sys.addaudithook(_dispatch)
            _installed = True


class AccessRecorder:
    """Record (and optionally forbid) access to anything under ``roots``.

    >>> with AccessRecorder([source_dir], forbid=True) as rec:
    ...     run_adaptation()
    >>> rec.accesses
    []
    """

    def __init__(self, roots, forbid: bool = False):
        self.roots = [os.path.abspath(os.fspath(Path(r))) for r in roots]
        self.forbid = forbid
        self.accesses: list[tuple[str, str]] = []

    def _under(self, path: str) -> bool:
        return any(path == r or path.startswith(r.rstrip(os.sep) + os.sep) for r in self.roots)

    def _check(self, event: str, path: str):
        if self._under(path):
            self.accesses.append((event, path))
            if self.forbid:
                raise SourceAccessError(f"source-free violation: {event} {path}")

    def __enter__(self):
        _install()
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False
