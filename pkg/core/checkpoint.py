"""
Self-describing checkpoint container.

    MAGIC (8 bytes) | version (u32 LE) | header length (u32 LE) | JSON header | torch payload

The JSON header always carries 'kind' ('policy' or 'detector'); the payload
is a torch-serialized dict of state dicts and plain values.
"""

import io
import json
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import torch

from core.errors import DataError


MAGIC = b'OATCKPT\x00'
CONTAINER_VERSION = 1
_PREFIX = struct.Struct('<II')


def save_checkpoint(path: Union[str, Path], kind: str, header: Dict[str, Any],
                    payload: Dict[str, Any]) -> Path:
    path = Path(path)
    header = dict(header, kind=kind)
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    buffer = io.BytesIO()
    torch.save(payload, buffer)
    blob = MAGIC + _PREFIX.pack(CONTAINER_VERSION, len(header_bytes)) + header_bytes + buffer.getvalue()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(blob)
    except OSError as e:
        raise DataError(f"Could not write checkpoint {path}: {e}") from e
    return path


def read_header(blob: bytes, source: str = '<bytes>') -> Tuple[Dict[str, Any], int]:
    """Parse the header; returns (header, payload offset)."""
    start = len(MAGIC) + _PREFIX.size
    if len(blob) < start or blob[:len(MAGIC)] != MAGIC:
        raise DataError(f"{source} is not an oat checkpoint (bad magic)")
    version, length = _PREFIX.unpack(blob[len(MAGIC):start])
    if version != CONTAINER_VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[start:start + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{source}: corrupt checkpoint header: {e}") from e
    return header, start + length


def load_checkpoint(path: Union[str, Path], kind: Optional[str] = None) -> Tuple[Dict[str, Any], Dict[str, Any]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataError(f"Could not read checkpoint {path}: {e}") from e
    header, offset = read_header(blob, str(path))
    if kind is not None and header.get('kind') != kind:
        raise DataError(f"{path} holds a {header.get('kind')!r} checkpoint, expected {kind!r}")
    try:
        payload = torch.load(io.BytesIO(blob[offset:]), map_location='cpu', weights_only=True)
    except Exception as e:  # torch raises a variety of unpickling errors
        raise DataError(f"{path}: corrupt checkpoint payload: {e}") from e
    return header, payload
