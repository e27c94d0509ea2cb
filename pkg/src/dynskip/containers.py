"""Checkpoint container: a JSON header plus named float64 arrays in one npz.

np.savez stamps zip members with a constant epoch date, so saving the same
header and arrays twice produces byte-identical files; round-trips are
bit-exact because arrays are stored raw.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

_HEADER_KEY = "__header__"
_ARRAY_PREFIX = "a:"


def save_arrays(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    payload = {
        _HEADER_KEY: np.frombuffer(
            json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8
        )
    }
    for name, arr in arrays.items():
        payload[_ARRAY_PREFIX + name] = np.asarray(arr)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path) as z:
        header = json.loads(z[_HEADER_KEY].tobytes().decode("utf-8"))
        arrays = {
            name[len(_ARRAY_PREFIX):]: z[name].copy()
            for name in z.files
            if name.startswith(_ARRAY_PREFIX)
        }
    return header, arrays
