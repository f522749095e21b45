"""Bit-exact file formats for datasets, poses, configs, traces, and meshes.

Formats:

* FIMG — float image.  ``FIMG1\\n``, then ASCII ``width height channels\\n``,
  then little-endian float32, row-major.
* CMAP — correspondence map.  Same container with magic ``CMAP1\\n`` and
  exactly 2 channels (projector u, v per camera pixel); NaN marks pixels
  with no decoded coordinate.
* mask — raw bytes, one per pixel, row-major, 0 or 1.
* pose text — one line per device per frame,
  ``frame_id device qw qx qy qz tx ty tz`` with device ``cam`` or ``proj``;
  ``#`` starts a comment.
* config — flat ``key = value`` lines; booleans as ``true``/``false``,
  floats via repr so parsing is exact.
* loss trace — CSV with header ``iter,L,L_c,L_p,L_e,inv_s,lr_field,lr_pose``.
* PLY — ASCII by default, binary little-endian behind a flag.

Every writer is canonical (fixed ordering and float formatting), so
write -> read -> write reproduces the file byte for byte.
"""

import os

import numpy as np

from .geometry import Pose


class FormatError(ValueError):
    """Malformed file: bad magic, inconsistent header, or truncated payload."""


def _fmt_float(x):
    # repr of a Python float is the shortest string that parses back exactly
    return repr(float(x))


def _fmt_value(x):
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return _fmt_float(x)


def _parse_value(s):
    if s == "true":
        return True
    if s == "false":
        return False
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        return s


# ---------------------------------------------------------------------------
# FIMG / CMAP / mask


def write_fimg(path, data, magic=b"FIMG1"):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise ValueError(f"expected (h, w) or (h, w, c) array, got {data.shape}")
    h, w, c = data.shape
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{w} {h} {c}\n".encode("ascii"))
        f.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_fimg(path, magic=b"FIMG1"):
    with open(path, "rb") as f:
        got = f.readline().rstrip(b"\n")
        if got != magic:
            raise FormatError(f"{path}: bad magic {got!r}, expected {magic!r}")
        header = f.readline().split()
        if len(header) != 3:
            raise FormatError(f"{path}: malformed size header")
        w, h, c = (int(x) for x in header)
        payload = f.read()
    expected = w * h * c * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: payload {len(payload)} bytes, "
                          f"expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).copy()


def write_cmap(path, coords):
    coords = np.asarray(coords, dtype=np.float32)
    if coords.ndim != 3 or coords.shape[2] != 2:
        raise ValueError(f"coordinate map must be (h, w, 2), got {coords.shape}")
    write_fimg(path, coords, magic=b"CMAP1")


def read_cmap(path):
    data = read_fimg(path, magic=b"CMAP1")
    if data.shape[2] != 2:
        raise FormatError(f"{path}: coordinate map has {data.shape[2]} channels")
    return data


def write_mask(path, mask):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError("mask must be 2-D")
    with open(path, "wb") as f:
        f.write((mask != 0).astype(np.uint8).tobytes())


def read_mask(path, width, height):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) != width * height:
        raise FormatError(f"{path}: {len(raw)} bytes for {width}x{height} mask")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width) != 0


# ---------------------------------------------------------------------------
# pose text files


def write_poses(path, poses):
    """Write ``{(frame_id, device): Pose}`` sorted by frame, then device name."""
    with open(path, "w") as f:
        for (frame_id, device) in sorted(poses):
            pose = poses[(frame_id, device)]
            nums = " ".join(_fmt_float(x) for x in (*pose.q, *pose.t))
            f.write(f"{frame_id} {device} {nums}\n")


def read_poses(path):
    poses = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 9:
                raise FormatError(f"{path}:{lineno}: expected 9 fields, "
                                  f"got {len(parts)}")
            frame_id = int(parts[0])
            device = parts[1]
            if device not in ("cam", "proj"):
                raise FormatError(f"{path}:{lineno}: unknown device {device!r}")
            vals = [float(x) for x in parts[2:]]
            poses[(frame_id, device)] = Pose(vals[:4], vals[4:])
    return poses


# ---------------------------------------------------------------------------
# flat key = value configs


def write_config(path, cfg):
    """Write a flat mapping in insertion order."""
    with open(path, "w") as f:
        for key, value in cfg.items():
            f.write(f"{key} = {_fmt_value(value)}\n")


def read_config(path):
    cfg = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            cfg[key.strip()] = _parse_value(value.strip())
    return cfg


# ---------------------------------------------------------------------------
# loss trace


TRACE_HEADER = "iter,L,L_c,L_p,L_e,inv_s,lr_field,lr_pose"


def write_trace(path, rows):
    """Write trace rows, each ``(iter, L, L_c, L_p, L_e, inv_s, lr_f, lr_p)``."""
    with open(path, "w") as f:
        f.write(TRACE_HEADER + "\n")
        for row in rows:
            it, *rest = row
            f.write(str(int(it)) + "," + ",".join(_fmt_float(x) for x in rest)
                    + "\n")


def read_trace(path):
    rows = []
    with open(path) as f:
        header = f.readline().rstrip("\n")
        if header != TRACE_HEADER:
            raise FormatError(f"{path}: unexpected trace header {header!r}")
        for line in f:
            parts = line.rstrip("\n").split(",")
            if len(parts) != 8:
                raise FormatError(f"{path}: trace row with {len(parts)} fields")
            rows.append((int(parts[0]), *(float(x) for x in parts[1:])))
    return rows


# ---------------------------------------------------------------------------
# PLY meshes


def write_ply(path, vertices, triangles, binary=False):
    vertices = np.asarray(vertices, dtype=np.float32)
    triangles = np.asarray(triangles, dtype=np.int32)
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise ValueError("vertices must be (n, 3)")
    if triangles.ndim != 2 or triangles.shape[1] != 3:
        raise ValueError("triangles must be (m, 3)")
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {len(vertices)}\n"
        "property float x\n"
        "property float y\n"
        "property float z\n"
        f"element face {len(triangles)}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            f.write(np.ascontiguousarray(vertices, dtype="<f4").tobytes())
            face = np.empty(len(triangles),
                            dtype=[("n", "u1"), ("idx", "<i4", (3,))])
            face["n"] = 3
            face["idx"] = triangles
            f.write(face.tobytes())
        else:
            for v in vertices:
                f.write((" ".join(_fmt_float(x) for x in v) + "\n")
                        .encode("ascii"))
            for t in triangles:
                f.write(f"3 {t[0]} {t[1]} {t[2]}\n".encode("ascii"))


def read_ply(path):
    """Read a PLY written by :func:`write_ply`.  Returns (vertices, triangles)."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise FormatError(f"{path}: not a PLY file")
        fmt = None
        n_vert = n_face = None
        while True:
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: header ended prematurely")
            parts = line.split()
            if parts[0] == b"format":
                fmt = parts[1].decode("ascii")
            elif parts[0] == b"element":
                if parts[1] == b"vertex":
                    n_vert = int(parts[2])
                elif parts[1] == b"face":
                    n_face = int(parts[2])
            elif parts[0] == b"end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise FormatError(f"{path}: unsupported format {fmt!r}")
        if n_vert is None or n_face is None:
            raise FormatError(f"{path}: missing element counts")
        if fmt == "binary_little_endian":
            vdata = f.read(n_vert * 12)
            if len(vdata) != n_vert * 12:
                raise FormatError(f"{path}: truncated vertex data")
            vertices = np.frombuffer(vdata, dtype="<f4").reshape(n_vert, 3)
            face_dt = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
            fdata = f.read(n_face * face_dt.itemsize)
            if len(fdata) != n_face * face_dt.itemsize:
                raise FormatError(f"{path}: truncated face data")
            faces = np.frombuffer(fdata, dtype=face_dt)
            if n_face and not np.all(faces["n"] == 3):
                raise FormatError(f"{path}: non-triangular face")
            triangles = faces["idx"].copy()
        else:
            vertices = np.empty((n_vert, 3), dtype=np.float32)
            for i in range(n_vert):
                vertices[i] = [float(x) for x in f.readline().split()]
            triangles = np.empty((n_face, 3), dtype=np.int32)
            for i in range(n_face):
                parts = f.readline().split()
                if parts[0] != b"3":
                    raise FormatError(f"{path}: non-triangular face")
                triangles[i] = [int(x) for x in parts[1:4]]
    return np.asarray(vertices, dtype=np.float64), triangles


# ---------------------------------------------------------------------------
# dataset directory layout


POSES_GT = "poses_gt.txt"
POSES_INIT = "poses_init.txt"
PATTERN_FILE = "pattern.fimg"
SCENE_FILE = "scene.txt"
CONFIG_FILE = "config.txt"


def frame_file(root, index, kind):
    """Path of a per-frame artifact; kind is ``cmap``, ``fimg``, or ``mask``."""
    if kind not in ("cmap", "fimg", "mask"):
        raise ValueError(f"unknown frame file kind {kind!r}")
    return os.path.join(root, f"frame_{index:04d}.{kind}")


def count_frames(root):
    """Number of consecutive frame_%04d.cmap files starting at 0."""
    n = 0
    while os.path.exists(frame_file(root, n, "cmap")):
        n += 1
    return n
