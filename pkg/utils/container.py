"""
Single-file tensor container shared by weight files and steering vectors.

Layout::

    [8 bytes]  manifest length N, unsigned little-endian
    [N bytes]  UTF-8 JSON manifest (sorted keys)
    [rest]     raw little-endian float32 tensors, row-major, in manifest order

The manifest carries ``magic``, ``format_version``, a ``tensors`` list of
``{name, shape, offset, nbytes}`` (offsets relative to the payload start),
``payload_bytes`` and ``payload_sha256`` plus any caller metadata.
"""
import json
import struct
from collections import OrderedDict
from typing import Any, Dict, Iterable, Mapping, Sequence, Tuple

import numpy as np

from errors import ChecksumError, FormatError, VersionError
from utils.file_utils import sha256_bytes
from utils.json_utils import dumps_canonical

HEADER = struct.Struct('<Q')
DTYPE = np.dtype('<f4')


def encode_container(
    magic: str,
    format_version: int,
    tensors: Iterable[Tuple[str, np.ndarray]],
    metadata: Mapping[str, Any],
) -> bytes:
    """
    Serialize named tensors and metadata into container bytes.

    Args:
        magic: Format identifier stored in the manifest
        format_version: Format version stored in the manifest
        tensors: (name, array) pairs, written in the given order
        metadata: Extra manifest fields (must be JSON-serializable)

    Returns:
        The complete container
    """
    chunks = []
    entries = []
    offset = 0
    for name, array in tensors:
        raw = np.ascontiguousarray(array, dtype=DTYPE).tobytes(order='C')
        entries.append({
            'name': name,
            'shape': [int(dim) for dim in np.shape(array)],
            'offset': offset,
            'nbytes': len(raw),
        })
        chunks.append(raw)
        offset += len(raw)
    payload = b''.join(chunks)

    manifest = dict(metadata)
    manifest.update({
        'magic': magic,
        'format_version': format_version,
        'dtype': 'float32-le',
        'tensors': entries,
        'payload_bytes': len(payload),
        'payload_sha256': sha256_bytes(payload),
    })
    manifest_bytes = dumps_canonical(manifest).encode('utf-8')
    return HEADER.pack(len(manifest_bytes)) + manifest_bytes + payload


def decode_container(
    data: bytes,
    magic: str,
    supported_versions: Sequence[int],
) -> Tuple[Dict[str, Any], "OrderedDict[str, np.ndarray]"]:
    """
    Parse and validate container bytes.

    Every structural check runs before any tensor is materialized.

    Args:
        data: Complete container bytes
        magic: Expected format identifier
        supported_versions: Accepted format versions

    Returns:
        (manifest, tensors by name in manifest order)

    Raises:
        FormatError: Bad header, manifest, magic or tensor table
        VersionError: Unsupported format version
        ChecksumError: Declared sizes or digest disagree with the payload
    """
    if len(data) < HEADER.size:
        raise FormatError(f"container truncated: {len(data)} bytes, header needs {HEADER.size}")
    (manifest_length,) = HEADER.unpack_from(data, 0)
    manifest_end = HEADER.size + manifest_length
    if manifest_end > len(data):
        raise FormatError(
            f"container truncated: manifest declares {manifest_length} bytes, "
            f"only {len(data) - HEADER.size} available"
        )

    try:
        manifest = json.loads(data[HEADER.size:manifest_end].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"unreadable manifest: {e}") from e
    if not isinstance(manifest, dict):
        raise FormatError("manifest is not a JSON object")

    if manifest.get('magic') != magic:
        raise FormatError(f"bad magic {manifest.get('magic')!r}, expected {magic!r}")
    version = manifest.get('format_version')
    if version not in supported_versions:
        raise VersionError(f"unsupported format version {version!r} (supported: {list(supported_versions)})")
    if manifest.get('dtype') != 'float32-le':
        raise FormatError(f"unsupported dtype {manifest.get('dtype')!r}")

    payload = data[manifest_end:]
    declared = manifest.get('payload_bytes')
    if not isinstance(declared, int) or declared != len(payload):
        raise ChecksumError(
            f"manifest declares {declared} payload bytes, file holds {len(payload)}"
        )

    entries = manifest.get('tensors')
    if not isinstance(entries, list):
        raise FormatError("manifest has no tensor table")
    expected_offset = 0
    for entry in entries:
        try:
            name, shape = entry['name'], entry['shape']
            offset, nbytes = entry['offset'], entry['nbytes']
        except (KeyError, TypeError) as e:
            raise FormatError(f"malformed tensor entry {entry!r}") from e
        if not all(isinstance(dim, int) and dim >= 0 for dim in shape):
            raise FormatError(f"tensor {name}: invalid shape {shape!r}")
        if offset != expected_offset:
            raise FormatError(f"tensor {name}: offset {offset} != expected {expected_offset}")
        if nbytes != int(np.prod(shape, dtype=np.int64)) * DTYPE.itemsize:
            raise FormatError(f"tensor {name}: {nbytes} bytes do not match shape {shape}")
        expected_offset += nbytes
    if expected_offset != len(payload):
        raise ChecksumError(f"tensor table covers {expected_offset} bytes, payload holds {len(payload)}")

    if sha256_bytes(payload) != manifest.get('payload_sha256'):
        raise ChecksumError("payload digest does not match manifest")

    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for entry in entries:
        start = entry['offset']
        raw = payload[start:start + entry['nbytes']]
        tensors[entry['name']] = np.frombuffer(raw, dtype=DTYPE).reshape(entry['shape']).copy()
    return manifest, tensors
