"""Binary little-endian PLY reader/writer for 3D-GS point clouds."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError
from .model import GaussianModel, sh_coeff_count, sh_degree_for

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

REQUIRED = (
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
    "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
)

# quaternions already this close to unit norm are kept as stored
_QUAT_TOL = 1e-6


def _read_header(fh):
    lines = []
    while True:
        raw = fh.readline()
        if not raw:
            raise FormatError("unexpected end of file inside PLY header")
        line = raw.decode("ascii", errors="replace").strip()
        lines.append(line)
        if line == "end_header":
            return lines


def _parse_header(lines):
    if not lines or lines[0] != "ply":
        raise FormatError("missing 'ply' magic")
    fmt = None
    elements = []
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info", "end_header"):
            continue
        if parts[0] == "format":
            fmt = parts[1] if len(parts) > 1 else None
        elif parts[0] == "element":
            if len(parts) != 3:
                raise FormatError(f"bad element line: {line!r}")
            elements.append({"name": parts[1], "count": int(parts[2]), "props": []})
        elif parts[0] == "property":
            if not elements:
                raise FormatError("property declared before any element")
            if parts[1] == "list":
                raise FormatError(f"list properties are not supported: {line!r}")
            if parts[1] not in _PLY_TYPES or len(parts) != 3:
                raise FormatError(f"unsupported property: {line!r}")
            elements[-1]["props"].append((parts[2], "<" + _PLY_TYPES[parts[1]]))
    if fmt != "binary_little_endian":
        raise FormatError(f"only binary_little_endian PLY is supported, got {fmt!r}")
    return elements


def _rest_index(name):
    m = re.fullmatch(r"f_rest_(\d+)", name)
    return int(m.group(1)) if m else None


def load_ply(path) -> GaussianModel:
    """Read a 3D-GS PLY file.

    Quaternions whose norm is off by more than 1e-6 are normalized (and
    rounded back to float32, so the result is representable in the file
    format). Normals are ignored.
    """
    path = Path(path)
    with path.open("rb") as fh:
        elements = _parse_header(_read_header(fh))
        if not elements or elements[0]["name"] != "vertex":
            raise FormatError("first PLY element must be 'vertex'")
        vertex = elements[0]
        dtype = np.dtype(vertex["props"])
        n = vertex["count"]
        buf = fh.read(n * dtype.itemsize)
    if len(buf) != n * dtype.itemsize:
        raise FormatError(f"{path}: truncated vertex data ({len(buf)} of {n * dtype.itemsize} bytes)")
    data = np.frombuffer(buf, dtype=dtype, count=n)

    names = set(dtype.names)
    for prop in REQUIRED:
        if prop not in names:
            raise FormatError(f"{path}: missing required vertex property '{prop}'")
    rest_ids = sorted(i for i in (_rest_index(nm) for nm in dtype.names) if i is not None)
    if rest_ids != list(range(len(rest_ids))) or len(rest_ids) % 3:
        raise FormatError(f"{path}: f_rest_* properties are not a contiguous multiple of 3")
    k = len(rest_ids) // 3
    try:
        sh_degree_for(k)
    except ValueError:
        raise FormatError(f"{path}: {len(rest_ids)} f_rest values match no SH degree") from None

    def col(*props):
        return np.stack([data[p].astype(np.float64) for p in props], axis=-1)

    means = col("x", "y", "z")
    rot = col("rot_0", "rot_1", "rot_2", "rot_3")
    # standard 3D-GS layout is channel-major: f_rest_{c*K + k}
    if k:
        rest = col(*[f"f_rest_{i}" for i in range(3 * k)]).reshape(n, 3, k).transpose(0, 2, 1)
    else:
        rest = np.zeros((n, 0, 3))

    flat = np.concatenate([means, rot, col("scale_0", "scale_1", "scale_2"),
                           col("opacity"), col("f_dc_0", "f_dc_1", "f_dc_2"),
                           rest.reshape(n, -1)], axis=1)
    bad = ~np.all(np.isfinite(flat), axis=1)
    if bad.any():
        raise ValidationError(f"{path}: primitive {int(np.argmax(bad))} has non-finite values")

    norms = np.linalg.norm(rot, axis=1)
    if np.any(norms == 0):
        raise ValidationError(f"{path}: primitive {int(np.argmin(norms))} has a zero quaternion")
    off = np.abs(norms - 1.0) > _QUAT_TOL
    if off.any():
        rot[off] = (rot[off] / norms[off, None]).astype(np.float32).astype(np.float64)

    model = GaussianModel(means, col("scale_0", "scale_1", "scale_2"), rot, col("opacity")[:, 0],
                          col("f_dc_0", "f_dc_1", "f_dc_2"), rest)
    model.validate()
    return model


def ply_header(n: int, sh_degree: int) -> str:
    props = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    props += [f"f_rest_{i}" for i in range(3 * sh_coeff_count(sh_degree))]
    props += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property float {p}" for p in props]
    lines.append("end_header")
    return "\n".join(lines) + "\n"


def encode_ply(model: GaussianModel) -> bytes:
    if len(model) == 0:
        raise ValidationError("refusing to write an empty Gaussian model")
    n = len(model)
    rest = model.sh_rest.transpose(0, 2, 1).reshape(n, -1)
    table = np.concatenate(
        [model.means, np.zeros((n, 3)), model.sh_dc, rest, model.opacity_logits[:, None],
         model.log_scales, model.rotations],
        axis=1,
    ).astype("<f4")
    return ply_header(n, model.sh_degree).encode("ascii") + table.tobytes()


def save_ply(model: GaussianModel, path) -> None:
    """Write ``model`` in the standard 3D-GS property layout (float32)."""
    payload = encode_ply(model)
    Path(path).write_bytes(payload)
