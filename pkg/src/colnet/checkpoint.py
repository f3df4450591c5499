"""Versioned ``.npz`` container shared by every saved model kind."""
from __future__ import annotations

import json
import os

import numpy as np

from .errors import ConfigError

FORMAT_VERSION = 1
_META_KEY = "__meta__"


def save_container(path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write atomically: a crash leaves either the old file or the new one."""
    header = json.dumps({"kind": kind, "version": FORMAT_VERSION, "meta": meta}, sort_keys=True)
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    if _META_KEY in payload:
        raise ConfigError(f"array name {_META_KEY!r} is reserved")
    payload[_META_KEY] = np.array(header)
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)


def load_container(path, expect_kind: str | None = None):
    """Return ``(kind, meta, arrays)``."""
    with np.load(os.fspath(path), allow_pickle=False) as data:
        if _META_KEY not in data.files:
            raise ConfigError(f"{path}: not a colnet checkpoint")
        header = json.loads(str(data[_META_KEY]))
        arrays = {k: data[k] for k in data.files if k != _META_KEY}
    if header.get("version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {header.get('version')}")
    if expect_kind is not None and header["kind"] != expect_kind:
        raise ConfigError(f"{path}: checkpoint kind {header['kind']!r}, expected {expect_kind!r}")
    return header["kind"], header["meta"], arrays
