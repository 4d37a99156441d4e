"""On-disk formats: scene coordinate maps, poses, intrinsics, correspondences, checkpoints, CSV and manifests.

All binary data is little-endian.
"""
import csv
import math
import os
import struct

import numpy as np
import torch

import config as config_lib
from encoding import SceneCoordinateMap
from errors import BadMagic, DatasetError, IoError, NonFiniteValue, NotARotation, TruncatedFile
from geometry import Intrinsics, Pose

SCM_MAGIC = b'SCM1'
CKPT_MAGIC = b'MRPO'
CKPT_VERSION = 1
POSE_TOL = 1e-6

SCM_SUFFIX = '.scm'
POSE_SUFFIX = '.pose.txt'
INTRINSICS_SUFFIX = '.intrinsics.txt'
SPLITS = ('mapping', 'query')


def _read_bytes(path):
    try:
        with open(path, 'rb') as f:
            return f.read()
    except OSError as e:
        raise IoError(f'Cannot read {path}: {e}') from e


def _read_text(path):
    try:
        with open(path, encoding='utf-8') as f:
            return f.read()
    except OSError as e:
        raise IoError(f'Cannot read {path}: {e}') from e
    except UnicodeDecodeError as e:
        raise DatasetError(f'{path}: not utf-8 text ({e})') from e


def _write(path, data, mode='wb'):
    try:
        kwargs = {} if 'b' in mode else {'encoding': 'utf-8', 'newline': '\n'}
        with open(path, mode, **kwargs) as f:
            f.write(data)
    except OSError as e:
        raise IoError(f'Cannot write {path}: {e}') from e


def fmt_float(x):
    # shortest representation that round-trips exactly
    return repr(float(x))


def _parse_floats(text, path):
    try:
        values = [float(x) for x in text.split()]
    except ValueError as e:
        raise DatasetError(f'{path}: malformed number ({e})') from None
    return values


# scene coordinate maps

def encode_scm(scm):
    coords = np.asarray(scm.coords)
    if not np.all(np.isfinite(coords[scm.mask])):
        raise NonFiniteValue('Scene coordinate map has non-finite valid entries')
    h, w = scm.mask.shape
    header = SCM_MAGIC + struct.pack('<II', h, w)
    return header + coords.astype('<f4').tobytes(order='C') + scm.mask.astype(np.uint8).tobytes(order='C')


def decode_scm(data, path='<bytes>'):
    if len(data) < 4:
        raise TruncatedFile(f'{path}: file too short for a header')
    if data[:4] != SCM_MAGIC:
        raise BadMagic(f'{path}: expected magic {SCM_MAGIC!r}, got {data[:4]!r}')
    if len(data) < 12:
        raise TruncatedFile(f'{path}: file too short for a header')
    h, w = struct.unpack('<II', data[4:12])
    n = h * w
    expected = 12 + 12 * n + n
    if len(data) < expected:
        raise TruncatedFile(f'{path}: expected {expected} bytes, got {len(data)}')
    if len(data) > expected:
        raise DatasetError(f'{path}: {len(data) - expected} trailing bytes')
    coords = np.frombuffer(data, dtype='<f4', count=3 * n, offset=12).reshape(h, w, 3)
    mask_bytes = np.frombuffer(data, dtype=np.uint8, count=n, offset=12 + 12 * n).reshape(h, w)
    if np.any(mask_bytes > 1):
        raise DatasetError(f'{path}: mask bytes must be 0 or 1')
    mask = mask_bytes == 1
    if not np.all(np.isfinite(coords[mask])):
        raise NonFiniteValue(f'{path}: non-finite valid scene coordinates')
    return SceneCoordinateMap(coords.astype(np.float64), mask)


def write_scm(path, scm):
    _write(path, encode_scm(scm))


def read_scm(path):
    return decode_scm(_read_bytes(path), path)


# poses and intrinsics

def format_pose(pose):
    return ' '.join(fmt_float(x) for x in pose.matrix().flatten()) + '\n'


def parse_pose(text, path='<text>'):
    values = _parse_floats(text, path)
    if len(values) < 16:
        raise TruncatedFile(f'{path}: expected 16 values, got {len(values)}')
    if len(values) > 16:
        raise DatasetError(f'{path}: expected 16 values, got {len(values)}')
    T = np.array(values, dtype=np.float64).reshape(4, 4)
    if not np.all(np.isfinite(T)):
        raise NonFiniteValue(f'{path}: non-finite pose entries')
    if not np.array_equal(T[3], [0.0, 0.0, 0.0, 1.0]):
        raise NotARotation(f'{path}: last row must be 0 0 0 1')
    pose = Pose.from_matrix(T)
    if not pose.is_valid(POSE_TOL):
        raise NotARotation(f'{path}: rotation fails orthonormality / det +1 within {POSE_TOL}')
    return pose


def write_pose(path, pose):
    _write(path, format_pose(pose), 'w')


def read_pose(path):
    return parse_pose(_read_text(path), path)


def format_intrinsics(K):
    return ' '.join(fmt_float(x) for x in (K.fx, K.fy, K.cx, K.cy)) + '\n'


def parse_intrinsics(text, path='<text>'):
    values = _parse_floats(text, path)
    if len(values) < 4:
        raise TruncatedFile(f'{path}: expected fx fy cx cy, got {len(values)} values')
    if len(values) > 4:
        raise DatasetError(f'{path}: expected fx fy cx cy, got {len(values)} values')
    if not all(math.isfinite(x) for x in values):
        raise NonFiniteValue(f'{path}: non-finite intrinsics')
    try:
        return Intrinsics(*values)
    except ValueError as e:
        raise DatasetError(f'{path}: {e}') from None


def write_intrinsics(path, K):
    _write(path, format_intrinsics(K), 'w')


def read_intrinsics(path):
    return parse_intrinsics(_read_text(path), path)


# correspondences

def write_correspondences(path, uv, points):
    lines = [' '.join(fmt_float(x) for x in (u, v, *p)) for (u, v), p in zip(uv, points)]
    _write(path, ''.join(line + '\n' for line in lines), 'w')


def read_correspondences(path):
    rows = []
    for lineno, line in enumerate(_read_text(path).splitlines(), 1):
        if not line.strip():
            continue
        values = _parse_floats(line, f'{path}:{lineno}')
        if len(values) != 5:
            raise DatasetError(f'{path}:{lineno}: expected "u v x y z"')
        rows.append(values)
    data = np.array(rows, dtype=np.float64).reshape(-1, 5)
    if not np.all(np.isfinite(data)):
        raise NonFiniteValue(f'{path}: non-finite correspondences')
    return data[:, :2], data[:, 2:]


# dataset frames

def frame_paths(data_dir, split, name):
    base = os.path.join(data_dir, split, name)
    return base + SCM_SUFFIX, base + POSE_SUFFIX, base + INTRINSICS_SUFFIX


def write_frame(data_dir, split, name, scm, K, pose):
    os.makedirs(os.path.join(data_dir, split), exist_ok=True)
    scm_path, pose_path, k_path = frame_paths(data_dir, split, name)
    write_scm(scm_path, scm)
    write_pose(pose_path, pose)
    write_intrinsics(k_path, K)


def read_frame(data_dir, split, name):
    scm_path, pose_path, k_path = frame_paths(data_dir, split, name)
    return read_scm(scm_path), read_intrinsics(k_path), read_pose(pose_path)


def list_frames(data_dir, split):
    split_dir = os.path.join(data_dir, split)
    if not os.path.isdir(split_dir):
        raise DatasetError(f'Missing split directory: {split_dir}')
    names = sorted(f[:-len(SCM_SUFFIX)] for f in os.listdir(split_dir) if f.endswith(SCM_SUFFIX))
    if not names:
        raise DatasetError(f'No frames in {split_dir}')
    return names


# manifest

def write_manifest(path, header, samples):
    """header: dict of key=value entries; samples: iterable of (relative name, seed entropy tuple)."""
    lines = [f'{key}={value}' for key, value in header.items()]
    lines += [f'{name} ' + ','.join(str(x) for x in seed) for name, seed in samples]
    _write(path, ''.join(line + '\n' for line in lines), 'w')


def read_manifest(path):
    header, samples = {}, []
    for line in _read_text(path).splitlines():
        line = line.strip()
        if not line:
            continue
        if '=' in line:
            key, value = line.split('=', 1)
            header[key] = value
        else:
            name, seed = line.split()
            samples.append((name, tuple(int(x) for x in seed.split(','))))
    return header, samples


# checkpoints

def save_checkpoint(path, model):
    text = config_lib.format_config(model.config).encode('utf-8')
    parts = [CKPT_MAGIC, struct.pack('<II', CKPT_VERSION, len(text)), text]
    for name, tensor in model.state_dict(keep_vars=False).items():
        encoded = name.encode('utf-8')
        array = tensor.detach().cpu().numpy().astype('<f4')
        parts.append(struct.pack('<I', len(encoded)) + encoded)
        parts.append(struct.pack('<I', array.ndim) + struct.pack(f'<{array.ndim}I', *array.shape))
        parts.append(array.tobytes(order='C'))
    _write(path, b''.join(parts))


def _unpack(fmt, data, offset, path):
    size = struct.calcsize(fmt)
    if offset + size > len(data):
        raise TruncatedFile(f'{path}: unexpected end of checkpoint')
    return struct.unpack(fmt, data[offset:offset + size]), offset + size


def decode_checkpoint(data, path='<bytes>'):
    """Returns (config dict, {name: float32 array})."""
    if data[:4] != CKPT_MAGIC:
        if len(data) < 4:
            raise TruncatedFile(f'{path}: file too short for a header')
        raise BadMagic(f'{path}: expected magic {CKPT_MAGIC!r}, got {data[:4]!r}')
    (version, text_len), offset = _unpack('<II', data, 4, path)
    if version != CKPT_VERSION:
        raise DatasetError(f'{path}: unsupported checkpoint version {version}')
    if offset + text_len > len(data):
        raise TruncatedFile(f'{path}: unexpected end of checkpoint')
    text = data[offset:offset + text_len].decode('utf-8')
    offset += text_len
    pairs = config_lib.parse_key_values(text.splitlines(), source=str(path))
    base = config_lib.CONFIGS['default']
    overrides = {key: config_lib.parse_value(key, value, base.get(key)) for key, value in pairs}
    config = config_lib.get_config('default', overrides)

    tensors = {}
    while offset < len(data):
        (name_len,), offset = _unpack('<I', data, offset, path)
        if offset + name_len > len(data):
            raise TruncatedFile(f'{path}: unexpected end of checkpoint')
        name = data[offset:offset + name_len].decode('utf-8')
        offset += name_len
        (rank,), offset = _unpack('<I', data, offset, path)
        dims, offset = _unpack(f'<{rank}I', data, offset, path)
        count = int(np.prod(dims, dtype=np.int64))
        if offset + 4 * count > len(data):
            raise TruncatedFile(f'{path}: unexpected end of tensor {name}')
        array = np.frombuffer(data, dtype='<f4', count=count, offset=offset).reshape(dims)
        offset += 4 * count
        if not np.all(np.isfinite(array)):
            raise NonFiniteValue(f'{path}: non-finite values in {name}')
        tensors[name] = array
    return config, tensors


def load_checkpoint(path, dtype=torch.float32):
    from regressor import MapRelativePoseRegressor

    config, tensors = decode_checkpoint(_read_bytes(path), path)
    model = MapRelativePoseRegressor(config).to(dtype)
    state = {name: torch.from_numpy(array.copy()).to(dtype) for name, array in tensors.items()}
    missing = set(model.state_dict()) - set(state)
    unexpected = set(state) - set(model.state_dict())
    if missing or unexpected:
        raise DatasetError(f'{path}: checkpoint does not match its config '
                           f'(missing {sorted(missing)}, unexpected {sorted(unexpected)})')
    model.load_state_dict(state)
    return model


# csv

def write_csv(path, header, rows):
    try:
        with open(path, 'w', encoding='utf-8', newline='') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(header)
            for row in rows:
                writer.writerow([fmt_float(x) if isinstance(x, (float, np.floating)) else x for x in row])
    except OSError as e:
        raise IoError(f'Cannot write {path}: {e}') from e


def append_csv(path, row):
    try:
        with open(path, 'a', encoding='utf-8', newline='') as f:
            csv.writer(f, lineterminator='\n').writerow(
                [fmt_float(x) if isinstance(x, (float, np.floating)) else x for x in row])
    except OSError as e:
        raise IoError(f'Cannot write {path}: {e}') from e


def read_csv(path):
    try:
        with open(path, encoding='utf-8', newline='') as f:
            rows = list(csv.reader(f))
    except OSError as e:
        raise IoError(f'Cannot read {path}: {e}') from e
    return rows[0], rows[1:]
