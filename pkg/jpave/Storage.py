"""Binary container: a JSON header followed by little-endian float64 blobs.

Layout::

    MAGIC | uint64 LE header length | header JSON (UTF-8) | blob 0 | blob 1 | ...

The header carries a ``tensors`` directory of ``{"name", "shape", "offset"}``
entries, offsets counted in bytes from the first blob. Values round-trip
bit-exactly.
"""
import json
import struct
from pathlib import Path
from typing import Dict
from typing import List
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np

from .Constants import DTYPE
from .Constants import FORMAT_MAGIC
from .Exceptions import CheckpointError

PathLike = Union[str, Path]
BLOB_DTYPE = np.dtype("<f8")
_LENGTH = struct.Struct("<Q")


def write_container(
    path: PathLike, header: dict, arrays: Sequence[Tuple[str, np.ndarray]]
) -> None:
    """Write ``header`` and named arrays to ``path``."""
    directory = []
    blobs: List[bytes] = []
    offset = 0
    for name, array in arrays:
        blob = np.ascontiguousarray(array, dtype=BLOB_DTYPE).tobytes()
        directory.append({"name": name, "shape": list(array.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)

    full_header = dict(header)
    full_header["tensors"] = directory
    encoded = json.dumps(full_header, sort_keys=True, ensure_ascii=False).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(FORMAT_MAGIC)
        fh.write(_LENGTH.pack(len(encoded)))
        fh.write(encoded)
        for blob in blobs:
            fh.write(blob)


def read_container(path: PathLike) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Read a container written by :func:`write_container`.

    Raises:
        CheckpointError: If the file is missing, truncated or not a container.

    Returns:
        The header (without the tensor directory) and the named arrays.
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"File {path} does not exist.")
    raw = path.read_bytes()
    if not raw.startswith(FORMAT_MAGIC):
        raise CheckpointError(f"{path} is not a jpave container.")

    start = len(FORMAT_MAGIC)
    try:
        (length,) = _LENGTH.unpack_from(raw, start)
        start += _LENGTH.size
        header = json.loads(raw[start : start + length].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    blob_start = start + length

    arrays: Dict[str, np.ndarray] = {}
    for entry in header.pop("tensors", []):
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        begin = blob_start + entry["offset"]
        end = begin + count * BLOB_DTYPE.itemsize
        if end > len(raw):
            raise CheckpointError(f"{path}: tensor {entry['name']} is truncated.")
        values = np.frombuffer(raw, dtype=BLOB_DTYPE, count=count, offset=begin)
        arrays[entry["name"]] = values.reshape(shape).astype(DTYPE)
    return header, arrays


def save_embeddings(path: PathLike, tokens: Sequence[str], matrix: np.ndarray) -> None:
    """Write an embedding table whose rows follow ``tokens``."""
    if matrix.ndim != 2 or matrix.shape[0] != len(tokens):
        raise CheckpointError(
            f"Embedding matrix shape {matrix.shape} does not match {len(tokens)} tokens."
        )
    header = {"kind": "embedding", "tokens": list(tokens), "dim": int(matrix.shape[1])}
    write_container(path, header, [("embedding", matrix)])


def load_embeddings(path: PathLike) -> Tuple[List[str], np.ndarray]:
    header, arrays = read_container(path)
    if header.get("kind") != "embedding" or "embedding" not in arrays:
        raise CheckpointError(f"{path} is not an embedding file.")
    tokens = list(header["tokens"])
    matrix = arrays["embedding"]
    if matrix.shape != (len(tokens), header["dim"]):
        raise CheckpointError(f"{path}: embedding shape does not match its header.")
    return tokens, matrix


def overwrite_rows(
    table: np.ndarray, row_keys: Sequence[str], path: PathLike
) -> int:
    """Copy rows of an embedding file into ``table`` where keys match.

    Returns:
        int: How many rows were overwritten.
    """
    tokens, matrix = load_embeddings(path)
    if matrix.shape[1] != table.shape[1]:
        raise CheckpointError(
            f"{path}: embedding dim {matrix.shape[1]} does not match model dim {table.shape[1]}."
        )
    lookup = {t: i for i, t in enumerate(tokens)}
    hits = 0
    for row, key in enumerate(row_keys):
        if key in lookup:
            table[row] = matrix[lookup[key]]
            hits += 1
    return hits
