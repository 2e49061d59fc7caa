"""Numeric precision selection.

Every entry point resolves its working dtype through ``resolve_dtype`` so the
``TRANSREC_PRECISION`` environment variable can force 64-bit mode, which the
gradient checker requires.
"""

from __future__ import annotations

import os

import torch

from .errors import ConfigInvalid

ENV_VAR = "TRANSREC_PRECISION"

_NAMES = {"f32": torch.float32, "f64": torch.float64}
_WIDTHS = {torch.float32: 4, torch.float64: 8}


def resolve_dtype(name: str | None = None) -> torch.dtype:
    """Map a precision name to a torch dtype.

    Falls back to the TRANSREC_PRECISION environment variable, then to f32.
    """
    if name is None:
        name = os.environ.get(ENV_VAR, "f32")
    if name not in _NAMES:
        raise ConfigInvalid("precision", f"must be one of {sorted(_NAMES)}, got {name!r}")
    return _NAMES[name]


def dtype_name(dtype: torch.dtype) -> str:
    for name, dt in _NAMES.items():
        if dt == dtype:
            return name
    raise ConfigInvalid("precision", f"unsupported dtype {dtype}")


def dtype_width(dtype: torch.dtype) -> int:
    return _WIDTHS[dtype]
