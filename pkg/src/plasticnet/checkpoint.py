"""Checkpoint container for named parameter tensors.

A checkpoint is a NumPy ``.npz`` archive (uncompressed):

* ``param/<name>`` -- one float64 array per trainable tensor, with its shape;
* ``__meta__`` -- a 0-d unicode array holding a JSON object that records the
  format version, the model kind and the constructor arguments.

Readers must ignore unknown ``__meta__`` keys; the layout above is stable.
"""

from __future__ import annotations

import json
import os

import numpy as np

FORMAT_VERSION = 1
_PREFIX = "param/"


def save_params(path, params: dict, meta: dict | None = None) -> None:
    payload = {_PREFIX + name: np.asarray(t.data, dtype=np.float64) for name, t in params.items()}
    info = {"format": "plasticnet-checkpoint", "version": FORMAT_VERSION}
    info.update(meta or {})
    payload["__meta__"] = np.array(json.dumps(info, sort_keys=True))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        np.savez(fh, **payload)
    os.replace(tmp, path)


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive["__meta__"]))
        arrays = {k[len(_PREFIX):]: archive[k].copy() for k in archive.files if k.startswith(_PREFIX)}
    if meta.get("format") != "plasticnet-checkpoint":
        raise ValueError(f"{path}: not a plasticnet checkpoint")
    return arrays, meta
