"""
Binary checkpoints.

Layout: the magic b"TVGCKPT1", a uint32 array count, then per array a uint32
name length, the UTF-8 name, a uint32 rank, `rank` uint32 extents and the
little-endian float32 payload. All integers are little-endian.

Array names: `param/<dotted name>`, `adamw/m/<name>`, `adamw/v/<name>`,
`meta/step` and `meta/epoch`.
"""
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import FormatError, ShapeError

logger = logging.getLogger(__name__)

MAGIC = b'TVGCKPT1'
PARAM_PREFIX = 'param/'
FIRST_MOMENT_PREFIX = 'adamw/m/'
SECOND_MOMENT_PREFIX = 'adamw/v/'
STEP_KEY = 'meta/step'
EPOCH_KEY = 'meta/epoch'


def write_arrays(path, arrays):
    chunks = [MAGIC, struct.pack('<I', len(arrays))]
    for name, array in arrays.items():
        encoded = name.encode('utf-8')
        array = np.asarray(array, dtype='<f4')
        chunks.append(struct.pack('<I', len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack(f'<I{array.ndim}I', array.ndim, *array.shape))
        chunks.append(array.tobytes(order='C'))
    Path(path).write_bytes(b''.join(chunks))


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, count):
        end = self.offset + count
        if end > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint (needed {end} bytes, file has {len(self.data)})")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def uint32(self):
        return struct.unpack('<I', self.take(4))[0]

    def extents(self, rank):
        return struct.unpack(f'<{rank}I', self.take(4 * rank))


def read_arrays(path):
    """Parse the whole file; nothing is returned unless every array is complete."""
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"checkpoint {path} does not exist")
    reader = _Reader(path.read_bytes(), path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise FormatError(f"{path}: not a checkpoint or unsupported version")
    arrays = {}
    for _ in range(reader.uint32()):
        name = reader.take(reader.uint32()).decode('utf-8')
        rank = reader.uint32()
        shape = reader.extents(rank)
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(reader.take(4 * count), dtype='<f4').reshape(shape).copy()
    if reader.offset != len(reader.data):
        raise FormatError(f"{path}: {len(reader.data) - reader.offset} trailing bytes after the last array")
    return arrays


@dataclass
class CheckpointMeta:
    step: int
    epoch: int


def checkpoint_save(path, model, optimizer=None, epoch=0):
    """Write parameters, AdamW moments and the next epoch to run."""
    arrays = {f"{PARAM_PREFIX}{name}": param.data for name, param in model.named_parameters()}
    step = 0
    if optimizer is not None:
        state = optimizer.state
        step = state.step
        for name in state.first_moment:
            arrays[f"{FIRST_MOMENT_PREFIX}{name}"] = state.first_moment[name]
            arrays[f"{SECOND_MOMENT_PREFIX}{name}"] = state.second_moment[name]
    arrays[STEP_KEY] = np.array([step])
    arrays[EPOCH_KEY] = np.array([epoch])
    write_arrays(path, arrays)
    logger.info(f"Saved checkpoint {path} ({len(arrays)} arrays, epoch {epoch}, step {step})")


def checkpoint_load(path, model, optimizer=None):
    """
    Restore a checkpoint into `model` (and `optimizer` when given).

    The file is parsed and checked against the model before any parameter is
    touched, so a failed load leaves the model as it was.
    """
    arrays = read_arrays(path)
    params = dict(model.named_parameters())
    stored = {name[len(PARAM_PREFIX):]: array for name, array in arrays.items() if name.startswith(PARAM_PREFIX)}

    for name in stored:
        if name not in params:
            raise FormatError(f"{path}: array '{PARAM_PREFIX}{name}' has no counterpart in the model")
    for name, param in params.items():
        if name not in stored:
            raise FormatError(f"{path}: missing array '{PARAM_PREFIX}{name}'")
        if stored[name].shape != param.shape:
            raise ShapeError(f"{PARAM_PREFIX}{name}", param.shape, stored[name].shape)
    for prefix in (FIRST_MOMENT_PREFIX, SECOND_MOMENT_PREFIX):
        for key, array in arrays.items():
            if key.startswith(prefix):
                name = key[len(prefix):]
                if name not in params:
                    raise FormatError(f"{path}: array '{key}' has no counterpart in the model")
                if array.shape != params[name].shape:
                    raise ShapeError(key, params[name].shape, array.shape)

    for name, param in params.items():
        param.data = stored[name].astype(param.data.dtype)
    meta = CheckpointMeta(step=int(arrays.get(STEP_KEY, [0])[0]), epoch=int(arrays.get(EPOCH_KEY, [0])[0]))
    if optimizer is not None:
        state = optimizer.state
        state.step = meta.step
        state.first_moment = {
            key[len(FIRST_MOMENT_PREFIX):]: array for key, array in arrays.items() if key.startswith(FIRST_MOMENT_PREFIX)
        }
        state.second_moment = {
            key[len(SECOND_MOMENT_PREFIX):]: array for key, array in arrays.items() if key.startswith(SECOND_MOMENT_PREFIX)
        }
    logger.info(f"Loaded checkpoint {path} (epoch {meta.epoch}, step {meta.step})")
    return meta
