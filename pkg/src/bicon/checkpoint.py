"""Single-file checkpoint format.

Layout: a JSON header line (UTF-8, terminated by a newline) followed by
the concatenated raw little-endian float64 buffers.  The header records
tensor names, shapes, byte offsets into the binary section, an endianness
tag, and a free-form ``meta`` dict for scalars like the step counter.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import CheckpointError

FORMAT_NAME = "bicon-checkpoint-v1"


def save_checkpoint(path, tensors, meta=None):
    """Write named float64 arrays plus metadata to one file.

    ``tensors`` is an iterable of (name, ndarray) pairs; order is preserved.
    """
    entries = []
    offset = 0
    buffers = []
    for name, arr in tensors:
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
        buffers.append(arr.tobytes())
    header = {
        "format": FORMAT_NAME,
        "endian": "little",
        "dtype": "f8",
        "meta": dict(meta or {}),
        "tensors": entries,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for buf in buffers:
            fh.write(buf)


def load_checkpoint(path):
    """Read a checkpoint back as (dict name -> ndarray, meta dict)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt checkpoint header in {path}: {e}") from None
        if header.get("format") != FORMAT_NAME:
            raise CheckpointError(
                f"{path} is not a {FORMAT_NAME} file (format={header.get('format')!r})"
            )
        if header.get("endian") != "little":
            raise CheckpointError(f"unsupported endianness tag {header.get('endian')!r}")
        blob = fh.read()

    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 8
        if end > len(blob):
            raise CheckpointError(
                f"checkpoint {path} truncated: tensor '{entry['name']}' exceeds file size"
            )
        arr = np.frombuffer(blob[start:end], dtype="<f8").reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
    return arrays, header.get("meta", {})
