"""Dataset file layout.

    magic     8 bytes  b"MIPTDS01"
    length    u32 LE   size of the JSON header in bytes
    header    UTF-8 JSON, keys sorted:
              {version, L, T, gamma_x, gamma_zz, gamma_zxz, M, master_seed, point_id}
    payload   M records of ceil(D/8) bytes, D = TL + (T/2)(L-1) + (T/3)(L-2)

A record holds the X grid row-major, then ZZ, then ZXZ, one bit per outcome,
least significant bit first; bit 0 is outcome +1 and bit 1 is outcome -1.
Each record is padded with zero bits to a byte boundary. Trajectory seeds are
not stored: they follow from (master_seed, point_id, index).
"""
import json
import logging
import struct
from pathlib import Path

import numpy as np

from app.core.exceptions import DomainError, FormatError
from app.core.storage import PathLike, atomic_write_bytes
from app.trajectories.records import CircuitConfig, Dataset, grid_shapes, record_dimension
from app.trajectories.seeding import trajectory_seeds

logger = logging.getLogger(__name__)

MAGIC = b'MIPTDS01'
VERSION = 1
PREFIX = len(MAGIC) + 4


def record_bytes(T: int, L: int) -> int:
    return -(-record_dimension(T, L) // 8)


def _header(dataset: Dataset) -> dict:
    config = dataset.config
    return {
        'version': VERSION,
        'L': dataset.L,
        'T': dataset.T,
        'gamma_x': config.gamma_x,
        'gamma_zz': config.gamma_zz,
        'gamma_zxz': config.gamma_zxz,
        'M': dataset.M,
        'master_seed': config.master_seed,
        'point_id': config.point_id,
    }


def encode_dataset(dataset: Dataset) -> bytes:
    if dataset.window is not None:
        raise DomainError("cropped datasets are derived views and are not written to disk")
    M = dataset.M
    bits = np.concatenate(
        [grid.reshape(M, grid.shape[1] * grid.shape[2]) for grid in (dataset.x, dataset.zz, dataset.zxz)], axis=1
    ) == -1
    payload = np.packbits(bits, axis=1, bitorder='little')
    header = json.dumps(_header(dataset), sort_keys=True, separators=(',', ':')).encode('utf-8')
    return MAGIC + struct.pack('<I', len(header)) + header + payload.tobytes()


def _config_from_header(header: dict) -> CircuitConfig:
    if header.get('version') != VERSION:
        raise FormatError(f"unsupported dataset version {header.get('version')!r}")
    try:
        return CircuitConfig(
            L=int(header['L']),
            T=int(header['T']),
            gamma_x=float(header['gamma_x']),
            gamma_zz=float(header['gamma_zz']),
            gamma_zxz=float(header['gamma_zxz']),
            master_seed=int(header['master_seed']),
            point_id=str(header['point_id']),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"dataset header is incomplete or invalid: {e}") from e


def decode_dataset(blob: bytes) -> Dataset:
    if len(blob) < PREFIX or blob[:8] != MAGIC:
        raise FormatError(f"not a dataset file: magic {blob[:8]!r}, expected {MAGIC!r}")
    (length,) = struct.unpack('<I', blob[8:PREFIX])
    if PREFIX + length > len(blob):
        raise FormatError(f"header length {length} runs past the end of the file")
    try:
        header = json.loads(blob[PREFIX:PREFIX + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"dataset header is not valid JSON: {e}") from e

    config = _config_from_header(header)
    M = header.get('M')
    if not isinstance(M, int) or M < 0:
        raise FormatError(f"dataset header has an invalid trajectory count {M!r}")
    T, L = config.T, config.L
    D, width = record_dimension(T, L), record_bytes(T, L)
    payload = blob[PREFIX + length:]
    if len(payload) != M * width:
        raise FormatError(f"payload holds {len(payload)} bytes; header promises {M} records of {width} bytes")

    packed = np.frombuffer(payload, dtype=np.uint8).reshape(M, width)
    bits = np.unpackbits(packed, axis=1, bitorder='little')
    if bits[:, D:].any():
        raise FormatError("record padding bits are not zero")
    signs = (1 - 2 * bits[:, :D].astype(np.int8)).astype(np.int8)

    grids, start = [], 0
    for rows, cols in grid_shapes(T, L):
        grids.append(signs[:, start:start + rows * cols].reshape(M, rows, cols))
        start += rows * cols
    seeds = trajectory_seeds(config.master_seed, config.point_id, M)
    return Dataset(config, *grids, seeds=seeds)


def save_dataset(dataset: Dataset, path: PathLike) -> Path:
    blob = encode_dataset(dataset)
    logger.info(f"Saving {dataset.M} records of {record_bytes(dataset.T, dataset.L)} bytes to {path}")
    return atomic_write_bytes(path, blob)


def load_dataset(path: PathLike) -> Dataset:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"cannot read dataset {path}: {e}") from e
    return decode_dataset(blob)
