"""Byte-deterministic model archives: a zip of meta.json + .npy arrays.

Entries are stored uncompressed with fixed timestamps and sorted names, so
the same content always produces the same bytes. Every archive carries a
format tag checked at load time.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

from .exceptions import FormatError

_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_archive(path: str, format_tag: str, meta: dict,
                 arrays: dict[str, np.ndarray]):
    """Write meta (json) and named arrays (npy) as a deterministic zip."""
    entries: list[tuple[str, bytes]] = []
    meta_doc = dict(meta)
    meta_doc["format"] = format_tag
    entries.append(("meta.json", json.dumps(
        meta_doc, sort_keys=True, indent=1).encode("utf-8")))
    for name in sorted(arrays):
        buf = io.BytesIO()
        np.save(buf, np.ascontiguousarray(arrays[name]))
        entries.append((f"arrays/{name}.npy", buf.getvalue()))

    with open(path, "wb") as fh:
        with zipfile.ZipFile(fh, "w", compression=zipfile.ZIP_STORED) as zf:
            for name, payload in entries:
                info = zipfile.ZipInfo(name, date_time=_EPOCH)
                info.external_attr = 0o644 << 16
                zf.writestr(info, payload)


def load_archive(path: str, format_tag: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read an archive back; raises FormatError on a tag mismatch."""
    try:
        zf = zipfile.ZipFile(path, "r")
    except (OSError, zipfile.BadZipFile) as err:
        raise FormatError(f"cannot open archive {path}: {err}") from None
    with zf:
        try:
            meta = json.loads(zf.read("meta.json").decode("utf-8"))
        except KeyError:
            raise FormatError(f"{path}: missing meta.json") from None
        found = meta.pop("format", None)
        if found != format_tag:
            raise FormatError(
                f"{path}: format tag {found!r} does not match expected {format_tag!r}")
        arrays: dict[str, np.ndarray] = {}
        for name in zf.namelist():
            if name.startswith("arrays/") and name.endswith(".npy"):
                arrays[name[len("arrays/"):-len(".npy")]] = np.load(
                    io.BytesIO(zf.read(name)), allow_pickle=False)
    return meta, arrays
