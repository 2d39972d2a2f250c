"""Multiply-accumulate bookkeeping for convolutions and matrix products.

Operations call :func:`record_macs`; modules push themselves on the stack
while they run, so counts can be attributed to every enclosing module.
Counting is off unless a :class:`MacCounter` is active.
"""
from __future__ import annotations

from collections import defaultdict

_active = None


class MacCounter:
    def __init__(self):
        self.total = 0
        self.by_module = defaultdict(int)
        self._stack: list = []

    def __enter__(self):
        global _active
        if _active is not None:
            raise RuntimeError("MAC counters cannot be nested")
        _active = self
        return self

    def __exit__(self, *exc):
        global _active
        _active = None
        return False

    def add(self, n: int) -> None:
        self.total += n
        for mod_id in self._stack:
            self.by_module[mod_id] += n


def record_macs(n: int) -> None:
    if _active is not None:
        _active.add(int(n))


def push_module(module) -> bool:
    if _active is None:
        return False
    _active._stack.append(id(module))
    return True


def pop_module() -> None:
    _active._stack.pop()
