"""Backend selection for the hot loops.

The compiled extension is used when it was built; otherwise the numpy
fallback is picked at import time. ``use_backend`` switches explicitly,
which the benchmark and the cross-backend tests rely on.
"""

from . import _fallback

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

BACKENDS = {"python": _fallback}
if _compiled is not None:
    BACKENDS["compiled"] = _compiled

_active = _compiled if _compiled is not None else _fallback


def backend_name() -> str:
    return "compiled" if _active is _compiled and _compiled is not None else "python"


def use_backend(name: str) -> None:
    global _active
    if name not in BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}")
    _active = BACKENDS[name]


def render_segments(segments, radii, size):
    return _active.render_segments(segments, radii, size)


def kendall_counts(x, y):
    return _active.kendall_counts(x, y)
