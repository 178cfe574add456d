"""Splat kernel backend selection.

The compiled Cython kernel is preferred; the pure-NumPy implementation is a
drop-in fallback selected at import time. Override with the environment
variable ``LUMAFEAT_SPLAT_BACKEND=numpy|cython`` or `set_backend` (tests and
the kernel benchmark use this). Within one backend results are bit-exact
reproducible; across backends they agree to floating-point round-off.
"""

import os

from . import _splat_np

# compositing constants shared by both backends; full opacity is allowed
# (alpha = 1 zeroes the transmittance, which the early-out then skips)
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 1.0
TRANSMITTANCE_MIN = 1e-4

try:
    from . import _splat_cy
except ImportError:  # extension not built
    _splat_cy = None

_BACKENDS = {"numpy": _splat_np}
if _splat_cy is not None:
    _BACKENDS["cython"] = _splat_cy

_DEFAULT = os.environ.get("LUMAFEAT_SPLAT_BACKEND") or (
    "cython" if _splat_cy is not None else "numpy"
)
if _DEFAULT not in _BACKENDS:
    raise ImportError(f"requested splat backend {_DEFAULT!r} is unavailable")
_active = _DEFAULT


def available_backends():
    return sorted(_BACKENDS)


def active_backend() -> str:
    return _active


def set_backend(name: str) -> str:
    """Switch the compositing backend; returns the previous one."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown splat backend {name!r}; have {available_backends()}")
    previous = _active
    _active = name
    return previous


def composite(px, py, z, inv_a, inv_b, inv_c, radius, opacity, colors,
              height, width):
    """Front-to-back alpha compositing of sorted splats (see backend docs)."""
    return _BACKENDS[_active].composite(
        px, py, z, inv_a, inv_b, inv_c, radius, opacity, colors,
        int(height), int(width), ALPHA_MIN, ALPHA_MAX, TRANSMITTANCE_MIN,
    )
