"""Runtime proof that meta-test never touches regularization code.

Meta-test runs execute inside `regularizers_forbidden()`; every SAM/GSAM/GAM
meta-step and every smoothing-penalty evaluation calls
`assert_regularizers_allowed` on entry, so any such call during meta-test
raises instead of silently contaminating the protocol.
"""

from __future__ import annotations

from contextlib import contextmanager


class ProtocolError(RuntimeError):
    pass


_forbid_depth = 0
_guarded_sections = 0


@contextmanager
def regularizers_forbidden():
    global _forbid_depth, _guarded_sections
    _forbid_depth += 1
    _guarded_sections += 1
    try:
        yield
    finally:
        _forbid_depth -= 1


def assert_regularizers_allowed(name: str):
    if _forbid_depth > 0:
        raise ProtocolError(f"regularizer path '{name}' invoked during meta-test")


def forbidden_active() -> bool:
    return _forbid_depth > 0


def guarded_section_count() -> int:
    """How many forbidden zones have been entered (for protocol audits)."""
    return _guarded_sections
