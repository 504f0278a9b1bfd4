import json
import struct
from os import path as ospath

import numpy as np
from aiofiles import open as aiopen
from aiofiles.os import makedirs as aiomakedirs
from aiofiles.os import path as aiopath
from aiofiles.os import remove
from aioshutil import rmtree as aiormtree

from handsdf import LOGGER

from .exceptions import FormatError

GRID_MAGIC = b"GSDF"
IMAGE_MAGIC = b"IMGF"
SAMPLES_MAGIC = b"SMPL"
CHECKPOINT_MAGIC = b"NSDF1"


def dumps_json(data) -> str:
    """Stable JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def _check_magic(data: bytes, magic: bytes, what: str):
    if data[: len(magic)] != magic:
        raise FormatError(f"{what}: bad magic {data[: len(magic)]!r}")


def encode_grid(values: np.ndarray, bounds: np.ndarray) -> bytes:
    nx, ny, nz = values.shape
    header = GRID_MAGIC + struct.pack("<3I", nx, ny, nz)
    header += struct.pack("<6d", *np.asarray(bounds, dtype=np.float64).ravel())
    return header + values.ravel(order="F").astype("<f4").tobytes()


def decode_grid(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Returns (values (nx, ny, nz), bounds (2, 3)) of a GSDF stream."""
    _check_magic(data, GRID_MAGIC, "grid")
    try:
        nx, ny, nz = struct.unpack_from("<3I", data, 4)
        bounds = np.array(struct.unpack_from("<6d", data, 16)).reshape(2, 3)
    except struct.error as e:
        raise FormatError(f"grid: truncated header ({e})") from e
    count = nx * ny * nz
    if len(data) != 64 + 4 * count:
        raise FormatError(f"grid: expected {count} values")
    values = np.frombuffer(data, dtype="<f4", count=count, offset=64)
    return values.reshape((nx, ny, nz), order="F").astype(np.float64), bounds


def encode_image(image: np.ndarray) -> bytes:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    return IMAGE_MAGIC + struct.pack("<3I", h, w, c) + image.astype("<f4").tobytes()


def decode_image(data: bytes) -> np.ndarray:
    _check_magic(data, IMAGE_MAGIC, "image")
    h, w, c = struct.unpack_from("<3I", data, 4)
    if len(data) != 16 + 4 * h * w * c:
        raise FormatError(f"image: expected {h}x{w}x{c} values")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(h, w, c).astype(np.float64)


def encode_samples(points: np.ndarray, sdf: np.ndarray, near: np.ndarray) -> bytes:
    n = len(points)
    table = np.empty((n, 5), dtype="<f4")
    table[:, :3] = points
    table[:, 3] = sdf
    table[:, 4] = np.asarray(near, dtype=bool)
    return SAMPLES_MAGIC + struct.pack("<I", n) + table.tobytes()


def decode_samples(data: bytes) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    _check_magic(data, SAMPLES_MAGIC, "samples")
    (n,) = struct.unpack_from("<I", data, 4)
    if len(data) != 8 + 20 * n:
        raise FormatError(f"samples: expected {n} records")
    table = np.frombuffer(data, dtype="<f4", offset=8).reshape(n, 5).astype(np.float64)
    return table[:, :3], table[:, 3], table[:, 4] != 0


def encode_checkpoint(header: dict, params, first_moment, second_moment) -> bytes:
    header = {**header, "param_count": int(np.size(params))}
    text = json.dumps(header, sort_keys=True).encode()
    blobs = [np.asarray(a).astype("<f4").tobytes() for a in (params, first_moment, second_moment)]
    return CHECKPOINT_MAGIC + struct.pack("<I", len(text)) + text + b"".join(blobs)


def decode_checkpoint(data: bytes):
    """Returns (header, params, first moment, second moment) of an NSDF1 stream."""
    _check_magic(data, CHECKPOINT_MAGIC, "checkpoint")
    (length,) = struct.unpack_from("<I", data, 5)
    start = 9 + length
    try:
        header = json.loads(data[9:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"checkpoint: unreadable header ({e})") from e
    count = header.get("param_count", 0)
    if len(data) - start != 12 * count:
        raise FormatError(f"checkpoint: expected 3 x {count} f32 values")
    blob = np.frombuffer(data, dtype="<f4", offset=start).astype(np.float32)
    return header, blob[:count], blob[count : 2 * count], blob[2 * count :]


async def ensure_dir(path: str):
    await aiomakedirs(path, exist_ok=True)


async def write_bytes(path: str, data: bytes):
    await ensure_dir(ospath.dirname(path) or ".")
    async with aiopen(path, "wb") as f:
        await f.write(data)


async def read_bytes(path: str) -> bytes:
    async with aiopen(path, "rb") as f:
        return await f.read()


async def write_json(path: str, data):
    await write_bytes(path, dumps_json(data).encode())


async def read_json(path: str):
    try:
        return json.loads((await read_bytes(path)).decode())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid json ({e})") from e


async def write_text(path: str, text: str):
    await write_bytes(path, text.encode())


async def clean_target(path: str):
    """Removes the file or directory at the given path."""
    if await aiopath.exists(path):
        LOGGER.info(f"Cleaning target: {path}")
        if await aiopath.isdir(path):
            await aiormtree(path, ignore_errors=True)
        else:
            await remove(path)


async def read_text(path: str) -> str:
    return (await read_bytes(path)).decode()
