"""Backend selection for the hot loops.

The compiled extension ``rewardloop._kernels`` is used when it imports;
otherwise the pure-Python twin in ``_kernels_py`` takes over.  Setting
``REWARDLOOP_PURE_PYTHON=1`` forces the fallback.  Both backends share one
calling convention, so callers go through :data:`impl` and
:meth:`rewardloop.track.TrackSpec.geometry`.
"""

from __future__ import annotations

import os

from . import _kernels_py
from ._kernels_py import (  # noqa: F401  re-exported layout constants
    ARC_S, EV_LAP, EV_OFFROAD, EV_TIMEOUT, HEADING, LAP, LAT, N_PARAMS, N_STATE,
    OBS_DIM, OFFROAD, P_A_MAX, P_DELTA_MAX, P_DT, P_GOAL_S, P_HALF_WIDTH,
    P_LAT_GAIN, P_LAT_TARGET, P_MAX_STEPS, P_OFFROAD_AMP, P_STAY_LOOKAHEAD,
    P_TOTAL_LENGTH, P_V_MAX, P_V_REV_MAX, P_V_THRESH, P_WHEELBASE, PREV_SPEED,
    PROGRESS, SPEED, STEPS, X, Y,
)

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None


def available() -> list[str]:
    names = ["python"]
    if _compiled is not None:
        names.insert(0, "cython")
    return names


def load(name: str | None = None):
    """Return the kernel module called ``name`` (default: best available)."""
    if name is None:
        if os.environ.get("REWARDLOOP_PURE_PYTHON", "") not in ("", "0"):
            name = "python"
        else:
            name = available()[0]
    if name == "python":
        return _kernels_py
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return _compiled
    raise ValueError(f"unknown kernel backend {name!r}")


impl = load()
BACKEND = impl.NAME
