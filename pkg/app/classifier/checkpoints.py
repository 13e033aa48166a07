"""Checkpoint file layout.

    magic     8 bytes  b"MIPTCK01"
    length    u32 LE   size of the JSON header in bytes
    header    UTF-8 JSON, keys sorted:
              {version, arch, h1, h2 (cnn) | h (mlp), T, L, channels,
               dropout_p, tensors: [{name, shape, offset}]}
    payload   little-endian float64 values of every tensor, concatenated

Offsets are byte offsets into the payload. Batch-norm running statistics
are stored as tensors after the learnable parameters.
"""
import json
import logging
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from app.core.exceptions import FormatError
from app.core.storage import PathLike, atomic_write_bytes
from .architectures import ArchHyper, ModelFactory, PhaseModel

logger = logging.getLogger(__name__)

MAGIC = b'MIPTCK01'
VERSION = 1
FLOAT = np.dtype('<f8')


def _header(model: PhaseModel) -> dict:
    arch = model.arch
    header = {
        'version': VERSION,
        'arch': arch.kind,
        'T': arch.T,
        'L': arch.L,
        'channels': list(arch.channels),
        'dropout_p': arch.dropout_p,
    }
    if arch.kind == 'mlp':
        header['h'] = arch.hidden
    else:
        header['h1'] = arch.h1
        header['h2'] = arch.h2
    return header


def encode_checkpoint(model: PhaseModel) -> bytes:
    header = _header(model)
    manifest, chunks, offset = [], [], 0
    for name, values in model.state_tensors().items():
        values = np.ascontiguousarray(values, dtype=FLOAT)
        manifest.append({'name': name, 'shape': list(values.shape), 'offset': offset})
        chunks.append(values.tobytes())
        offset += values.nbytes
    header['tensors'] = manifest
    encoded = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return MAGIC + struct.pack('<I', len(encoded)) + encoded + b''.join(chunks)


def _arch_from_header(header: dict) -> ArchHyper:
    kind = header.get('arch')
    try:
        common = dict(T=int(header['T']), L=int(header['L']), kind=kind,
                      channels=tuple(header['channels']), dropout_p=float(header['dropout_p']))
        if kind == 'mlp':
            return ArchHyper(hidden=int(header['h']), **common)
        return ArchHyper(h1=int(header['h1']), h2=int(header['h2']), **common)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"checkpoint header is incomplete or invalid: {e}") from e


def decode_checkpoint(blob: bytes) -> PhaseModel:
    if len(blob) < 12 or blob[:8] != MAGIC:
        raise FormatError(f"not a checkpoint: magic {blob[:8]!r}, expected {MAGIC!r}")
    (length,) = struct.unpack('<I', blob[8:12])
    if 12 + length > len(blob):
        raise FormatError(f"header length {length} runs past the end of the file")
    try:
        header = json.loads(blob[12:12 + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"checkpoint header is not valid JSON: {e}") from e
    if header.get('version') != VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('version')!r}")

    arch = _arch_from_header(header)
    payload = blob[12 + length:]
    tensors = OrderedDict()
    expected_offset = 0
    for entry in header.get('tensors', []):
        shape = tuple(int(s) for s in entry['shape'])
        count = int(np.prod(shape, dtype=np.int64))
        offset = int(entry['offset'])
        if offset != expected_offset:
            raise FormatError(f"tensor {entry['name']} starts at {offset}, expected {expected_offset}")
        end = offset + count * FLOAT.itemsize
        if end > len(payload):
            raise FormatError(f"tensor {entry['name']} runs past the payload")
        tensors[entry['name']] = np.frombuffer(payload, dtype=FLOAT, count=count, offset=offset).reshape(shape).copy()
        expected_offset = end
    if expected_offset != len(payload):
        raise FormatError(f"payload holds {len(payload)} bytes, manifest accounts for {expected_offset}")

    model = ModelFactory.create_model(arch, seed=0)
    try:
        model.load_state_tensors(tensors)
    except ValueError as e:
        raise FormatError(f"checkpoint tensors do not match a {arch.kind} model: {e}") from e
    return model


def save_checkpoint(model: PhaseModel, path: PathLike) -> Path:
    blob = encode_checkpoint(model)
    logger.info(f"Saving {model.arch.kind} checkpoint ({model.parameter_count()} parameters) to {path}")
    return atomic_write_bytes(path, blob)


def load_checkpoint(path: PathLike) -> PhaseModel:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(blob)
