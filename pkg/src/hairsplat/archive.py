"""Named-array archive: a zip of raw little-endian blocks plus a JSON manifest.

Layout::

    manifest.json          {"format": ..., "version": ..., "meta": {...},
                            "arrays": [{"name", "shape", "dtype", "file", "nbytes"}]}
    arrays/<name>.bin      raw C-order bytes, little-endian

Entries are written uncompressed, in sorted order, with a fixed timestamp so
that writing the same arrays twice produces identical bytes.
"""

import json
import zipfile
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

FORMAT_NAME = "hairsplat-archive"
FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)
_ALLOWED = {"float32", "float64", "int32", "int64", "uint8", "bool"}


class ArchiveError(ValueError):
    pass


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def write_archive(path, arrays: Dict[str, np.ndarray], meta: Dict[str, Any], kind: str) -> None:
    records = []
    blobs = {}
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dtype = arr.dtype.name
        if dtype not in _ALLOWED:
            raise ArchiveError(f"array {name!r} has unsupported dtype {dtype}")
        le = np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False)
        fname = f"arrays/{name}.bin"
        blobs[fname] = le.tobytes()
        records.append({"name": name, "shape": list(arr.shape), "dtype": dtype, "file": fname, "nbytes": len(blobs[fname])})
    manifest = {"format": FORMAT_NAME, "kind": kind, "version": FORMAT_VERSION, "meta": meta, "arrays": records}
    text = json.dumps(manifest, indent=2, sort_keys=True)
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_entry("manifest.json"), text)
        for fname in sorted(blobs):
            zf.writestr(_entry(fname), blobs[fname])


def read_archive(path, kind: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path, "r")
    except (zipfile.BadZipFile, FileNotFoundError) as exc:
        raise ArchiveError(f"cannot open archive {path}: {exc}") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json").decode("utf-8"))
        except (KeyError, json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ArchiveError(f"corrupted manifest in {path}: {exc}") from exc
        if not isinstance(manifest, dict) or manifest.get("format") != FORMAT_NAME:
            raise ArchiveError(f"{path} is not a {FORMAT_NAME} file")
        if manifest.get("version") != FORMAT_VERSION:
            raise ArchiveError(f"unsupported archive version {manifest.get('version')!r}")
        if manifest.get("kind") != kind:
            raise ArchiveError(f"expected archive kind {kind!r}, found {manifest.get('kind')!r}")
        arrays = {}
        try:
            for rec in manifest["arrays"]:
                if rec["dtype"] not in _ALLOWED:
                    raise ArchiveError(f"unsupported dtype {rec['dtype']!r}")
                raw = zf.read(rec["file"])
                if len(raw) != rec["nbytes"]:
                    raise ArchiveError(f"size mismatch for {rec['name']}")
                dt = np.dtype(rec["dtype"]).newbyteorder("<")
                arr = np.frombuffer(raw, dtype=dt).reshape(rec["shape"])
                arrays[rec["name"]] = arr.astype(np.dtype(rec["dtype"]))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ArchiveError):
                raise
            raise ArchiveError(f"corrupted manifest in {path}: {exc}") from exc
    return arrays, manifest.get("meta", {})
