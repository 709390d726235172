"""Tensor archive files.

Checkpoints and weight files are zip archives with a fixed layout so
other implementations can read them without pickle:

    meta.json          {"format": "texterase-archive", "version": 1,
                        "tensors": {name: {"shape": [...], "dtype": "..."}},
                        "extra": {...}}
    tensors/<name>     raw little-endian bytes, C order

Supported dtypes: float32 (the default for parameters), float64,
int64, uint8.  Writing is deterministic: entries are sorted, stored
uncompressed, and stamped with a fixed timestamp, so identical state
produces identical bytes.
"""

import json
import zipfile

import numpy as np
import torch

from .errors import ArchiveError, IncompatibleArchiveError

FORMAT_NAME = "texterase-archive"
FORMAT_VERSION = 1
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint8": "|u1"}
_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype.name not in _DTYPES:
        raise ArchiveError(f"unsupported dtype {arr.dtype.name}")
    # ascontiguousarray promotes 0-d scalars to 1-d; keep the shape
    return np.ascontiguousarray(arr).reshape(arr.shape)


def save_archive(path, tensors: dict, extra: dict | None = None) -> None:
    """Write a name -> tensor mapping (plus JSON metadata) to ``path``."""
    index = {}
    arrays = {}
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        index[name] = {"shape": list(arr.shape), "dtype": arr.dtype.name}
        arrays[name] = arr
    meta = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "tensors": index,
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("meta.json", date_time=_FIXED_DATE)
        zf.writestr(info, json.dumps(meta, sort_keys=True, separators=(",", ":")))
        for name in sorted(arrays):
            raw = arrays[name].astype(_DTYPES[arrays[name].dtype.name], copy=False)
            info = zipfile.ZipInfo(f"tensors/{name}", date_time=_FIXED_DATE)
            zf.writestr(info, raw.tobytes())


def load_archive(path):
    """Read an archive; returns (dict of numpy arrays, extra metadata)."""
    try:
        zf = zipfile.ZipFile(path, "r")
    except FileNotFoundError:
        raise
    except (OSError, zipfile.BadZipFile) as exc:
        raise ArchiveError(f"cannot read archive {path}: {exc}") from exc
    with zf:
        try:
            meta = json.loads(zf.read("meta.json"))
        except KeyError:
            raise ArchiveError(f"{path} has no meta.json") from None
        if meta.get("format") != FORMAT_NAME:
            raise ArchiveError(f"{path} is not a {FORMAT_NAME} file")
        tensors = {}
        for name, entry in meta["tensors"].items():
            dtype = entry["dtype"]
            if dtype not in _DTYPES:
                raise ArchiveError(f"{path}: unsupported dtype {dtype} for {name}")
            raw = zf.read(f"tensors/{name}")
            arr = np.frombuffer(raw, dtype=_DTYPES[dtype]).astype(dtype, copy=True)
            tensors[name] = arr.reshape(entry["shape"])
    return tensors, meta.get("extra", {})


def save_module_weights(path, module: torch.nn.Module, extra: dict | None = None) -> None:
    """Serialize a module's state dict into an archive."""
    save_archive(path, dict(module.state_dict()), extra)


def load_module_weights(path, module: torch.nn.Module) -> dict:
    """Load weights into ``module``, all-or-nothing.

    Every archive entry is shape-checked against the module's state
    dict before anything is assigned; mismatches raise
    IncompatibleArchiveError naming the offending entry and leave the
    module untouched.  Returns the archive's extra metadata.
    """
    tensors, extra = load_archive(path)
    state = module.state_dict()
    missing = sorted(set(state) - set(tensors))
    unexpected = sorted(set(tensors) - set(state))
    if missing or unexpected:
        raise IncompatibleArchiveError(
            f"{path}: archive does not match module layout "
            f"(missing: {missing[:5]}, unexpected: {unexpected[:5]})"
        )
    for name, arr in tensors.items():
        if tuple(arr.shape) != tuple(state[name].shape):
            raise IncompatibleArchiveError(
                f"{path}: entry {name!r} has shape {tuple(arr.shape)}, "
                f"module expects {tuple(state[name].shape)}"
            )
    new_state = {
        name: torch.from_numpy(arr).to(state[name].dtype) for name, arr in tensors.items()
    }
    module.load_state_dict(new_state)
    return extra
