"""Binary PLY ingestion/export for gaussian scenes.

The on-disk convention follows the file format emitted by the common splat
training stacks: per-vertex float properties

    x, y, z, f_dc_0..2, opacity, scale_0..2, rot_0..3

with log-scales, logit-opacities, zeroth-order spherical-harmonic color
(``c = 0.5 + 0.28209479177 · f_dc``), and rotation quaternions stored
scalar-first (rot_0 = w). Higher-order SH coefficients and any other extra
properties are ignored.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .scene import SimilarityTransform, SplatScene

SH_C0 = 0.28209479177

REQUIRED_PROPERTIES = (
    "x", "y", "z",
    "f_dc_0", "f_dc_1", "f_dc_2",
    "opacity",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
)

_PLY_DTYPES = {
    "float": "<f4",
    "float32": "<f4",
    "double": "<f8",
    "float64": "<f8",
    "uchar": "u1",
    "uint8": "u1",
    "char": "i1",
    "int8": "i1",
    "short": "<i2",
    "int16": "<i2",
    "ushort": "<u2",
    "uint16": "<u2",
    "int": "<i4",
    "int32": "<i4",
    "uint": "<u4",
    "uint32": "<u4",
}


class PlyError(ValueError):
    """Malformed or unsupported PLY input."""


def _read_header(raw: bytes, path: str):
    end_marker = b"end_header\n"
    end = raw.find(end_marker)
    if not raw.startswith(b"ply\n") and not raw.startswith(b"ply\r\n"):
        raise PlyError(f"{path}: not a PLY file (missing 'ply' magic)")
    if end < 0:
        raise PlyError(f"{path}: header never terminated with 'end_header'")
    header_lines = raw[:end].decode("ascii", errors="replace").splitlines()
    data_offset = end + len(end_marker)

    fmt = None
    vertex_count = None
    properties: list[tuple[str, str]] = []
    in_vertex_element = False
    for line in header_lines[1:]:
        tokens = line.strip().split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            if tokens[1] == "vertex":
                vertex_count = int(tokens[2])
                in_vertex_element = True
            else:
                if vertex_count is None:
                    raise PlyError(f"{path}: element '{tokens[1]}' precedes the vertex element")
                in_vertex_element = False
        elif tokens[0] == "property" and in_vertex_element:
            if tokens[1] == "list":
                raise PlyError(f"{path}: list property '{tokens[-1]}' unsupported on vertices")
            if tokens[1] not in _PLY_DTYPES:
                raise PlyError(f"{path}: unsupported property type '{tokens[1]}' for '{tokens[2]}'")
            properties.append((tokens[2], _PLY_DTYPES[tokens[1]]))
    if fmt is None:
        raise PlyError(f"{path}: header missing 'format' line")
    if fmt != "binary_little_endian":
        raise PlyError(f"{path}: format '{fmt}' unsupported (binary_little_endian only)")
    if vertex_count is None:
        raise PlyError(f"{path}: header missing 'element vertex'")
    return vertex_count, properties, data_offset


def load_ply(
    path: str | os.PathLike,
    alignment: SimilarityTransform | None = None,
    background=(0.0, 0.0, 0.0),
) -> SplatScene:
    """Load a gaussian scene from a binary little-endian PLY file."""
    path = Path(path)
    raw = path.read_bytes()
    vertex_count, properties, data_offset = _read_header(raw, str(path))

    names = [name for name, _ in properties]
    for required in REQUIRED_PROPERTIES:
        if required not in names:
            raise PlyError(f"{path}: missing required property '{required}'")

    dtype = np.dtype([(name, code) for name, code in properties])
    nbytes = dtype.itemsize * vertex_count
    payload = raw[data_offset : data_offset + nbytes]
    if len(payload) < nbytes:
        raise PlyError(
            f"{path}: truncated payload at byte {data_offset + len(payload)} "
            f"(expected {nbytes} bytes for {vertex_count} vertices)"
        )
    verts = np.frombuffer(payload, dtype=dtype, count=vertex_count)

    means = np.column_stack([verts["x"], verts["y"], verts["z"]]).astype(np.float64)
    scales = np.exp(np.column_stack([verts["scale_0"], verts["scale_1"], verts["scale_2"]]).astype(np.float64))
    f_dc = np.column_stack([verts["f_dc_0"], verts["f_dc_1"], verts["f_dc_2"]]).astype(np.float64)
    colors = np.clip(0.5 + SH_C0 * f_dc, 0.0, 1.0)
    opacities = 1.0 / (1.0 + np.exp(-verts["opacity"].astype(np.float64)))
    # rot_0 is the scalar part on disk; internally quaternions are (x, y, z, w).
    rotations = np.column_stack([verts["rot_1"], verts["rot_2"], verts["rot_3"], verts["rot_0"]]).astype(np.float64)
    norms = np.linalg.norm(rotations, axis=1)
    bad = np.nonzero(norms < 1e-12)[0]
    if bad.size:
        raise PlyError(f"{path}: zero-norm rotation quaternion at vertex {int(bad[0])}")
    rotations /= norms[:, None]

    return SplatScene(means, scales, rotations, opacities, colors, alignment, background)


def save_ply(scene: SplatScene, path: str | os.PathLike) -> None:
    """Write a scene in the same binary PLY convention load_ply reads."""
    path = Path(path)
    n = len(scene)
    header = "\n".join(
        ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
        + [f"property float {name}" for name in REQUIRED_PROPERTIES]
        + ["end_header", ""]
    )
    record = np.dtype([(name, "<f4") for name in REQUIRED_PROPERTIES])
    data = np.empty(n, dtype=record)
    data["x"], data["y"], data["z"] = scene.means.T
    f_dc = (scene.colors - 0.5) / SH_C0
    data["f_dc_0"], data["f_dc_1"], data["f_dc_2"] = f_dc.T
    ops = np.clip(scene.opacities, 1e-6, 1.0 - 1e-6)
    data["opacity"] = np.log(ops / (1.0 - ops))
    log_scales = np.log(scene.scales)
    data["scale_0"], data["scale_1"], data["scale_2"] = log_scales.T
    data["rot_0"] = scene.rotations[:, 3]
    data["rot_1"] = scene.rotations[:, 0]
    data["rot_2"] = scene.rotations[:, 1]
    data["rot_3"] = scene.rotations[:, 2]
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(data.tobytes())
