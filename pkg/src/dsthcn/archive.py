"""Parameter archives: a JSON manifest next to a raw little-endian f32 blob."""

from __future__ import annotations

import json
import os

import numpy as np

from .data import FormatError, atomic_write

FORMAT = "dsthcn-params"
VERSION = 1


def save_archive(path, state, meta=None, kinds=None):
    """Write ``state`` (name -> array) to ``path`` (.json) and its sibling .bin blob.

    ``kinds`` optionally labels entries (``"param"`` or ``"buffer"``).
    """
    path = os.fspath(path)
    blob_path = os.path.splitext(path)[0] + ".bin"
    entries, chunks, offset = [], [], 0
    for name, arr in state.items():
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({
            "name": name,
            "shape": list(np.shape(arr)),
            "offset": offset,
            "kind": (kinds or {}).get(name, "param"),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "blob": os.path.basename(blob_path),
        "dtype": "<f4",
        "entries": entries,
        "meta": meta or {},
    }
    atomic_write(blob_path, b"".join(chunks))
    atomic_write(path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_archive(path):
    """Return ``(state, meta, kinds)``."""
    path = os.fspath(path)
    with open(path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"manifest is not JSON: {exc.msg}", exc.pos) from None
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise FormatError("not a parameter archive manifest", 0)
    blob_path = os.path.join(os.path.dirname(os.path.abspath(path)), manifest["blob"])
    with open(blob_path, "rb") as fh:
        blob = fh.read()
    state, kinds = {}, {}
    for e in manifest["entries"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 4 * n
        if end > len(blob):
            raise FormatError(f"blob too short for {e['name']}", len(blob))
        state[e["name"]] = (
            np.frombuffer(blob, dtype="<f4", count=n, offset=e["offset"])
            .reshape(e["shape"]).astype(np.float32)
        )
        kinds[e["name"]] = e.get("kind", "param")
    return state, manifest.get("meta", {}), kinds


def model_state(model):
    state, kinds = {}, {}
    for name, p in model.named_parameters():
        state[name] = p.value
        kinds[name] = "param"
    for name, b in model.named_buffers():
        state[name] = b
        kinds[name] = "buffer"
    return state, kinds


def load_state(model, state):
    """Copy arrays into the model's parameters and buffers (names must match exactly)."""
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = set(params) | set(buffers)
    if set(state) != expected:
        missing = sorted(expected - set(state))
        extra = sorted(set(state) - expected)
        raise FormatError(f"archive does not match model (missing {missing[:3]}, extra {extra[:3]})", 0)
    for name, arr in state.items():
        target = params[name].value if name in params else buffers[name]
        if target.shape != arr.shape:
            raise FormatError(f"{name}: shape {arr.shape} vs model {target.shape}", 0)
        target[...] = arr
