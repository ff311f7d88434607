"""Matrix container shared by models, projectors and update sets.

A container is an ``.npz`` archive of C-ordered float64 arrays plus one JSON
metadata record stored under ``__meta__``.  Loading never unpickles.  Zip
entries carry a fixed timestamp so identical content gives identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

META_KEY = "__meta__"
FORMAT = "moeedit-container"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_container(
    path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]
) -> Path:
    path = Path(path)
    if META_KEY in arrays:
        raise ValueError(f"array name {META_KEY!r} is reserved")
    payload = {k: np.ascontiguousarray(v, dtype=np.float64) for k, v in arrays.items()}
    header = {"format": FORMAT, "version": VERSION, **meta}
    payload[META_KEY] = np.array(json.dumps(header, sort_keys=True))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in payload.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arr, allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            zf.writestr(info, buf.getvalue())
    return path


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with np.load(Path(path), allow_pickle=False) as data:
        if META_KEY not in data.files:
            raise ValueError(f"{path}: not a {FORMAT} file (no metadata record)")
        meta = json.loads(str(data[META_KEY]))
        arrays = {k: data[k] for k in data.files if k != META_KEY}
    if meta.get("format") != FORMAT:
        raise ValueError(f"{path}: unexpected container format {meta.get('format')!r}")
    return arrays, meta


def checksum(*arrays: np.ndarray) -> str:
    """SHA-256 over the raw float64 bytes of ``arrays`` (shape-sensitive)."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype=np.float64)
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
