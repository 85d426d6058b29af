"""Bit-exact on-disk formats for volumes, masks and dataset manifests.

A volume ``name.mvol`` is a raw little-endian float payload in x-fastest
order with a JSON sidecar ``name.mvol.json``::

    {"kind": "sws", "dims": [nx, ny, nz], "spacing_mm": [sx, sy, sz],
     "dtype": "f32le"}

A mask ``name.mmask`` holds three u8 planes (pg, cz, pz), one byte per voxel
per zone, with a sidecar of the same shape and ``"dtype": "u8"``.
"""

import json
import os
from pathlib import Path

import numpy as np

from .core import ZONES, CaseRecord, MapKind, MaskSet, VolumeGrid
from .errors import FormatError

_DTYPES = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}


def sidecar(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_header(path):
    try:
        with open(sidecar(path), encoding="utf-8") as fh:
            header = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"missing header {sidecar(path)}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt header {sidecar(path)}: {exc}") from None
    if not isinstance(header, dict):
        raise FormatError(f"header {sidecar(path)} is not an object")
    return header


def _dims(header, path):
    try:
        nx, ny, nz = (int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing_mm"])
    except (KeyError, TypeError, ValueError):
        raise FormatError(f"{path}: header lacks valid dims/spacing_mm") from None
    if min(nx, ny, nz) < 1 or len(spacing) != 3:
        raise FormatError(f"{path}: invalid dims {header['dims']}")
    return (nz, ny, nx), spacing


def write_volume(volume, path, provenance=None):
    """Write ``volume`` as payload + JSON sidecar.

    float32 volumes are written as ``f32le``; float64 volumes as ``f64le`` so
    that the round trip is always exact.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dtype = "f32le" if volume.values.dtype == np.float32 else "f64le"
    header = {
        "kind": volume.kind.value,
        "dims": list(volume.dims),
        "spacing_mm": list(volume.spacing_mm),
        "dtype": dtype,
    }
    if provenance:
        header["provenance"] = provenance
    path.write_bytes(np.ascontiguousarray(volume.values, dtype=_DTYPES[dtype]).tobytes())
    _write_json(sidecar(path), header)


def read_volume(path):
    path = Path(path)
    header = _read_header(path)
    try:
        kind = MapKind.parse(header.get("kind"))
    except ValueError:
        raise FormatError(f"{path}: unknown map kind {header.get('kind')!r}") from None
    dtype = _DTYPES.get(header.get("dtype", "f32le"))
    if dtype is None:
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    shape, spacing = _dims(header, path)
    payload = path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    values = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    return VolumeGrid(kind, values, spacing)


def write_mask(mask, path, provenance=None):
    if not isinstance(mask, MaskSet):
        raise TypeError("write_mask expects a MaskSet")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "kind": "mask",
        "zones": list(ZONES),
        "dims": list(mask.dims),
        "spacing_mm": list(mask.spacing_mm),
        "dtype": "u8",
    }
    if provenance:
        header["provenance"] = provenance
    path.write_bytes(mask.stack().astype(np.uint8).tobytes())
    _write_json(sidecar(path), header)


def read_mask(path):
    path = Path(path)
    header = _read_header(path)
    if header.get("dtype", "u8") != "u8":
        raise FormatError(f"{path}: mask dtype must be u8")
    shape, spacing = _dims(header, path)
    payload = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if payload.size != 3 * int(np.prod(shape)):
        raise FormatError(f"{path}: payload has {payload.size} bytes, header implies {3 * int(np.prod(shape))}")
    if np.any(payload > 1):
        raise FormatError(f"{path}: mask payload contains bytes other than 0/1")
    planes = payload.reshape((3,) + shape).astype(bool)
    return MaskSet(planes[0], planes[1], planes[2], spacing)


# --- dataset manifests -------------------------------------------------------

MANIFEST = "manifest.json"


def write_case(case, root, provenance=None):
    """Write one case below ``root/<case_id>/`` and return its manifest entry."""
    root = Path(root)
    entry = {"case_id": case.case_id, "split": case.split_tag, "maps": {}}
    for kind, vol in case.maps.items():
        rel = f"{case.case_id}/{kind.value}.mvol"
        write_volume(vol, root / rel, provenance)
        entry["maps"][kind.value] = rel
    if case.truth is not None:
        rel = f"{case.case_id}/truth.mmask"
        write_mask(case.truth, root / rel, provenance)
        entry["truth"] = rel
    if case.meta:
        entry["meta"] = case.meta
    return entry


def write_dataset(cases, root, provenance=None, extra=None):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = [write_case(c, root, provenance) for c in cases]
    manifest = {"cases": entries}
    if extra:
        manifest.update(extra)
    _write_json(root / MANIFEST, manifest)
    return manifest


def read_manifest(root):
    root = Path(root)
    path = root / MANIFEST if root.is_dir() else root
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"no manifest at {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt manifest {path}: {exc}") from None
    if "cases" not in manifest:
        raise FormatError(f"{path}: manifest lacks 'cases'")
    return manifest


def write_manifest(root, manifest):
    _write_json(Path(root) / MANIFEST, manifest)


def load_case(root, entry):
    root = Path(root)
    maps = {MapKind.parse(k): read_volume(root / rel) for k, rel in entry.get("maps", {}).items()}
    truth = read_mask(root / entry["truth"]) if entry.get("truth") else None
    return CaseRecord(
        case_id=entry["case_id"],
        maps=maps,
        truth=truth,
        split_tag=entry.get("split", "train"),
        meta=entry.get("meta", {}),
    )


def load_dataset(root, split=None):
    """Load every case of a dataset directory, optionally one split only."""
    root = Path(root)
    manifest = read_manifest(root)
    return [
        load_case(root, e)
        for e in manifest["cases"]
        if split is None or e.get("split", "train") == split
    ]


def relpath(path, start):
    return os.path.relpath(path, start).replace(os.sep, "/")
