"""Single-file checkpoint archive.

The archive is a zip with three members:

``manifest.txt``
    one line per parameter: ``name<TAB>scope<TAB>shape<TAB>float32``, shape
    written as ``16x1x3x3``.
``params.bin``
    raw little-endian float32 arrays concatenated in manifest order.
``config.json``
    the serialized :class:`~ie2dnet.config.ModelConfig`.

Member timestamps are fixed so equal stores produce byte-identical files.
"""
from __future__ import annotations

import json
import zipfile

import numpy as np
import torch

from .config import ModelConfig
from .errors import CheckpointMismatch, ConfigError
from .model import ParameterStore, Scope, parameter_shapes

_EPOCH = (1980, 1, 1, 0, 0, 0)
_DTYPE = np.dtype("<f4")


def _member(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    zf.writestr(info, data)


def save_checkpoint(store, path, extra=None):
    """Write ``store`` to ``path``. ``extra`` is an optional JSON-able dict kept alongside."""
    lines, blobs = [], []
    for name in store:
        arr = store[name].detach().cpu().numpy().astype(_DTYPE)
        shape = "x".join(str(d) for d in arr.shape)
        lines.append(f"{name}\t{store.scopes[name].value}\t{shape}\tfloat32")
        blobs.append(arr.tobytes(order="C"))
    with zipfile.ZipFile(path, "w") as zf:
        _member(zf, "manifest.txt", "\n".join(lines) + "\n")
        _member(zf, "params.bin", b"".join(blobs))
        _member(zf, "config.json", json.dumps(store.config.to_dict(), indent=2, sort_keys=True))
        if extra is not None:
            _member(zf, "extra.json", json.dumps(extra, indent=2, sort_keys=True))


def load_checkpoint(path):
    """Read a store written by :func:`save_checkpoint`.

    Raises :class:`CheckpointMismatch` when the manifest does not describe
    exactly the parameters the stored config implies.
    """
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = zf.read("manifest.txt").decode()
            blob = zf.read("params.bin")
            config_data = json.loads(zf.read("config.json"))
    except (KeyError, zipfile.BadZipFile) as exc:
        raise CheckpointMismatch(f"{path}: not a checkpoint archive ({exc})") from exc
    try:
        config = ModelConfig.from_dict(config_data)
    except (ConfigError, TypeError) as exc:
        raise CheckpointMismatch(f"{path}: invalid stored config ({exc})") from exc

    expected = parameter_shapes(config)
    tensors, scopes, offset = {}, {}, 0
    for line in manifest.splitlines():
        if not line.strip():
            continue
        name, scope, shape_text, dtype = line.split("\t")
        shape = tuple(int(d) for d in shape_text.split("x")) if shape_text else ()
        if dtype != "float32":
            raise CheckpointMismatch(f"{name}: unsupported dtype {dtype}")
        if name not in expected:
            raise CheckpointMismatch(f"{name}: not a parameter of the stored config")
        want_shape, want_scope = expected[name]
        if shape != want_shape or scope != want_scope.value:
            raise CheckpointMismatch(
                f"{name}: manifest says {scope} {shape}, config implies {want_scope.value} {want_shape}"
            )
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype=_DTYPE, count=count, offset=offset).reshape(shape)
        offset += count * _DTYPE.itemsize
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
        scopes[name] = Scope(scope)
    missing = set(expected) - set(tensors)
    if missing:
        raise CheckpointMismatch(f"manifest lacks {len(missing)} parameters, e.g. {sorted(missing)[0]}")
    if offset != len(blob):
        raise CheckpointMismatch(f"params.bin holds {len(blob)} bytes, manifest accounts for {offset}")
    return ParameterStore(config, tensors, scopes)


def read_extra(path):
    with zipfile.ZipFile(path) as zf:
        if "extra.json" not in zf.namelist():
            return None
        return json.loads(zf.read("extra.json"))
