"""Test-only fault injection, used to prove the verifier can fail."""

from __future__ import annotations

import contextlib
from typing import Iterator

KNOWN = frozenset({"linear_partial_sign"})
_enabled: set[str] = set()


def active(name: str) -> bool:
    return name in _enabled


@contextlib.contextmanager
def inject(name: str | None) -> Iterator[None]:
    if name is None:
        yield
        return
    if name not in KNOWN:
        raise ValueError(f"unknown fault {name!r}; known: {sorted(KNOWN)}")
    _enabled.add(name)
    try:
        yield
    finally:
        _enabled.discard(name)
