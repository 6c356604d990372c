# Module containing readers and writers for scene and model files

import logging
import re
from pathlib import Path

import numpy as np

from mvsadapt.geometry import Camera, Intrinsics, Pose

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'MVSTTA\x00\x01'
_TOKEN = re.compile(rb'\s*(?:#[^\n]*\n\s*)*(\S+)')


class SceneFormatError(ValueError):
    """
    Raised for malformed scene, camera or checkpoint files. The message
    names the file and the line (text) or byte offset (binary).
    """
    pass


def _line_of(data, offset):
    return data.count(b'\n', 0, offset) + 1


def _header_tokens(path, data, count):
    """
    Reads ``count`` whitespace separated header tokens, skipping comments.
    Returns the tokens and the offset just after the last one.
    """
    tokens = []
    offset = 0
    for _ in range(count):
        match = _TOKEN.match(data, offset)
        if match is None:
            raise SceneFormatError(f'{path}: line {_line_of(data, offset)}: truncated header.')
        tokens.append((match.group(1), match.start(1)))
        offset = match.end(1)
    return tokens, offset


def _header_int(path, data, token):
    value, offset = token
    try:
        return int(value)
    except ValueError:
        raise SceneFormatError(f'{path}: line {_line_of(data, offset)}: '
                               f'expected an integer, got {value!r}.') from None


def write_ppm(path, image):
    """
    Writes an (H, W, 3) image in [0, 1] as binary 8-bit PPM (P6).
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"'image' must be (H, W, 3), got shape {image.shape}.")
    if image.dtype != np.uint8:
        image = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    height, width = image.shape[:2]
    with open(path, 'wb') as f:
        f.write(f'P6\n{width} {height}\n255\n'.encode('ascii'))
        f.write(np.ascontiguousarray(image).tobytes())


def read_ppm(path):
    """
    Reads a binary 8-bit PPM into an (H, W, 3) float64 array in [0, 1].
    """
    data = Path(path).read_bytes()
    tokens, offset = _header_tokens(path, data, 4)
    if tokens[0][0] != b'P6':
        raise SceneFormatError(f'{path}: line 1: expected magic P6, got {tokens[0][0]!r}.')
    width, height, maxval = (_header_int(path, data, t) for t in tokens[1:])
    if width < 1 or height < 1:
        raise SceneFormatError(f'{path}: line {_line_of(data, tokens[1][1])}: '
                               f'invalid size {width}x{height}.')
    if maxval != 255:
        raise SceneFormatError(f'{path}: line {_line_of(data, tokens[3][1])}: '
                               f'only 8-bit PPM is supported, got maxval {maxval}.')
    start = offset + 1
    expected = width * height * 3
    raster = data[start:start + expected]
    if len(raster) != expected:
        raise SceneFormatError(f'{path}: byte {start}: truncated raster, expected {expected} bytes, '
                               f'found {len(raster)}.')
    image = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3)
    return image.astype(np.float64) / 255.0


def write_pfm(path, values):
    """
    Writes a 2-D (Pf) or (H, W, 3) (PF) array as little-endian PFM.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        tag = 'Pf'
    elif values.ndim == 3 and values.shape[2] == 3:
        tag = 'PF'
    else:
        raise ValueError(f"PFM needs an (H, W) or (H, W, 3) array, got shape {values.shape}.")
    height, width = values.shape[:2]
    raster = np.flipud(values).astype('<f4')
    with open(path, 'wb') as f:
        f.write(f'{tag}\n{width} {height}\n-1.0\n'.encode('ascii'))
        f.write(np.ascontiguousarray(raster).tobytes())


def read_pfm(path):
    """
    Reads a PFM file (either endianness) into a float64 array.
    """
    data = Path(path).read_bytes()
    tokens, offset = _header_tokens(path, data, 4)
    tag = tokens[0][0]
    if tag not in (b'Pf', b'PF'):
        raise SceneFormatError(f'{path}: line 1: expected magic Pf or PF, got {tag!r}.')
    width, height = (_header_int(path, data, t) for t in tokens[1:3])
    try:
        scale = float(tokens[3][0])
    except ValueError:
        raise SceneFormatError(f'{path}: line {_line_of(data, tokens[3][1])}: '
                               f'invalid scale {tokens[3][0]!r}.') from None
    if scale == 0:
        raise SceneFormatError(f'{path}: line {_line_of(data, tokens[3][1])}: scale must be nonzero.')
    channels = 3 if tag == b'PF' else 1
    start = offset + 1
    expected = width * height * channels * 4
    raster = data[start:start + expected]
    if len(raster) != expected:
        raise SceneFormatError(f'{path}: byte {start}: truncated raster, expected {expected} bytes, '
                               f'found {len(raster)}.')
    values = np.frombuffer(raster, dtype='<f4' if scale < 0 else '>f4')
    shape = (height, width, 3) if channels == 3 else (height, width)
    return np.flipud(values.reshape(shape)).astype(np.float64)


def write_depth_visualization(path, depth, d_min, d_max, valid=None):
    """
    Grey-scale 8-bit PPM of a depth map, near = dark, invalid = black.
    """
    depth = np.asarray(depth, dtype=np.float64)
    scaled = np.clip((depth - d_min) / (d_max - d_min), 0.0, 1.0)
    if valid is not None:
        scaled = np.where(np.asarray(valid) > 0, scaled, 0.0)
    write_ppm(path, np.repeat(scaled[:, :, None], 3, axis=2))


def write_cam(path, camera, d_min, d_interval, count):
    """
    Writes a camera in the MVS cam.txt layout: a 4x4 extrinsic block, a
    3x3 intrinsic block and a "d_min d_interval D" line.
    """
    lines = ['extrinsic']
    lines += [' '.join(f'{v:.17g}' for v in row) for row in camera.pose.to_matrix()]
    lines += ['', 'intrinsic']
    lines += [' '.join(f'{v:.17g}' for v in row) for row in camera.intrinsics.K]
    lines += ['', f'{d_min:.17g} {d_interval:.17g} {int(count)}']
    Path(path).write_text('\n'.join(lines) + '\n')


def _numeric_rows(path, lines, start, rows, cols):
    out = []
    for i in range(start, start + rows):
        if i >= len(lines):
            raise SceneFormatError(f'{path}: line {i + 1}: unexpected end of file.')
        parts = lines[i].split()
        if len(parts) != cols:
            raise SceneFormatError(f'{path}: line {i + 1}: expected {cols} numbers, got {len(parts)}.')
        try:
            out.append([float(p) for p in parts])
        except ValueError:
            raise SceneFormatError(f'{path}: line {i + 1}: non-numeric entry in {lines[i]!r}.') from None
    return np.array(out)


def _skip(lines, i, word):
    while i < len(lines) and lines[i].strip() in ('', word):
        i += 1
    return i


def read_cam(path):
    """
    Reads a cam.txt file.

    Returns
    -------
    camera : Camera
    depth_range : tuple
        (d_min, d_interval, count).
    """
    lines = Path(path).read_text().splitlines()
    i = _skip(lines, 0, 'extrinsic')
    extrinsic = _numeric_rows(path, lines, i, 4, 4)
    i = _skip(lines, i + 4, 'intrinsic')
    K = _numeric_rows(path, lines, i, 3, 3)
    i = _skip(lines, i + 3, '')
    if i >= len(lines):
        raise SceneFormatError(f'{path}: line {i + 1}: missing depth range line.')
    parts = lines[i].split()
    if len(parts) < 3:
        raise SceneFormatError(f'{path}: line {i + 1}: expected "d_min d_interval D".')
    try:
        depth_range = (float(parts[0]), float(parts[1]), int(float(parts[2])))
    except ValueError:
        raise SceneFormatError(f'{path}: line {i + 1}: malformed depth range {lines[i]!r}.') from None
    try:
        camera = Camera(Intrinsics(K), Pose(extrinsic[:3, :3], extrinsic[:3, 3]))
    except ValueError as e:
        raise SceneFormatError(f'{path}: invalid camera: {e}') from None
    return camera, depth_range


def write_checkpoint(path, descriptor, theta):
    """
    Binary checkpoint: magic, uint32 descriptor length L, L int64 descriptor
    entries, uint64 parameter count P, P float64 parameters, little-endian.
    """
    descriptor = np.asarray(descriptor, dtype='<i8')
    theta = np.asarray(theta, dtype='<f8').ravel()
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(np.array([descriptor.size], dtype='<u4').tobytes())
        f.write(descriptor.tobytes())
        f.write(np.array([theta.size], dtype='<u8').tobytes())
        f.write(theta.tobytes())
    logger.debug('Wrote checkpoint %s (%d parameters).', path, theta.size)


def read_checkpoint(path):
    """
    Reads a checkpoint written by ``write_checkpoint``.

    Returns
    -------
    descriptor : tuple of int
    theta : np.ndarray
    """
    data = Path(path).read_bytes()
    offset = len(CHECKPOINT_MAGIC)
    if data[:offset] != CHECKPOINT_MAGIC:
        raise SceneFormatError(f'{path}: byte 0: not a checkpoint file.')

    def take(dtype, count):
        nonlocal offset
        size = np.dtype(dtype).itemsize * count
        chunk = data[offset:offset + size]
        if len(chunk) != size:
            raise SceneFormatError(f'{path}: byte {offset}: truncated, expected {size} more bytes.')
        offset += size
        return np.frombuffer(chunk, dtype=dtype)

    length = int(take('<u4', 1)[0])
    descriptor = tuple(int(v) for v in take('<i8', length))
    count = int(take('<u8', 1)[0])
    theta = take('<f8', count).astype(np.float64)
    if offset != len(data):
        raise SceneFormatError(f'{path}: byte {offset}: trailing data after parameters.')
    return descriptor, theta
