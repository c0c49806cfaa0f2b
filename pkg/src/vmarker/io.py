"""Low-level file formats: VMAT matrices, Wavefront OBJ meshes, JSON reports."""

import json
import os
import struct

import numpy as np

VMAT_MAGIC = b"VMAT"


class FormatError(ValueError):
    """A file does not follow the expected on-disk layout."""


def save_vmat(path, matrix):
    """Write a 2-D array as ``VMAT``: magic, u32 rows, u32 cols, float64 row-major."""
    m = np.asarray(matrix, dtype="<f8")
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise ValueError(f"VMAT holds 2-D matrices, got shape {m.shape}")
    rows, cols = m.shape
    with open(path, "wb") as fh:
        fh.write(VMAT_MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(m).tobytes())


def load_vmat(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != VMAT_MAGIC:
        raise FormatError(f"{path}: missing VMAT header")
    rows, cols = struct.unpack_from("<II", blob, 4)
    expected = 12 + 8 * rows * cols
    if len(blob) != expected:
        raise FormatError(
            f"{path}: VMAT payload is {len(blob) - 12} bytes, expected {expected - 12}"
        )
    return np.frombuffer(blob, dtype="<f8", offset=12).reshape(rows, cols).astype(np.float64)


def read_obj(path):
    """Read ``v`` and ``f`` records of a triangle OBJ. Returns (vertices, faces)."""
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise FormatError(f"{path}:{lineno}: vertex needs 3 coordinates")
                verts.append([float(p) for p in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                if len(idx) != 3:
                    raise FormatError(
                        f"{path}:{lineno}: face has {len(idx)} vertices, only triangles are supported"
                    )
                faces.append([i - 1 for i in idx])
    if not verts:
        raise FormatError(f"{path}: no vertex records")
    return np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64).reshape(-1, 3)


def write_obj(path, vertices, faces):
    """Write a triangle mesh with fixed 6-decimal coordinates (diff-stable)."""
    lines = ["v %.6f %.6f %.6f" % tuple(v) for v in np.asarray(vertices, dtype=np.float64)]
    lines += ["f %d %d %d" % tuple(f + 1) for f in np.asarray(faces)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def dump_json(path, payload):
    """Deterministic JSON (sorted keys, repr floats, trailing newline)."""
    text = json.dumps(payload, sort_keys=True, indent=2, default=_jsonable)
    with open(path, "w") as fh:
        fh.write(text + "\n")


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


def relpath_from(base_file, target):
    """Path of ``target`` relative to the directory holding ``base_file``."""
    return os.path.relpath(target, os.path.dirname(os.path.abspath(base_file)))


def resolve_from(base_file, ref):
    if os.path.isabs(ref):
        return ref
    return os.path.join(os.path.dirname(os.path.abspath(base_file)), ref)
