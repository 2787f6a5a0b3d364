"""Kernel selection: compiled extension when built, numpy fallback otherwise.

Set SEGSTACK_FORCE_FALLBACK=1 to skip the compiled module (used by the
benchmark and by tests that exercise both paths).
"""

import os

if os.environ.get("SEGSTACK_FORCE_FALLBACK"):
    from segstack._ext._fallback import IMPLEMENTATION, directed_avg_distance, patch_moments
else:
    try:
        from segstack._ext._core import IMPLEMENTATION, directed_avg_distance, patch_moments
    except ImportError:
        from segstack._ext._fallback import IMPLEMENTATION, directed_avg_distance, patch_moments

HAVE_COMPILED = IMPLEMENTATION == "compiled"

__all__ = ["IMPLEMENTATION", "HAVE_COMPILED", "patch_moments", "directed_avg_distance"]
