"""Mesh, transform and digest file I/O.

Meshes are read through trimesh (any PLY/OBJ it understands) and written
by the numpy writers below, which keep double precision so that files
passed between CLI stages reproduce in-memory results exactly.
"""

from __future__ import annotations

import hashlib
import logging
from pathlib import Path

import numpy as np
import trimesh

from toothfuse.errors import MeshFormatError
from toothfuse.geometry import RigidTransform, TriMesh

log = logging.getLogger(__name__)

_SUFFIXES = (".ply", ".obj")


def _check_suffix(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix not in _SUFFIXES:
        raise MeshFormatError(f"Unsupported mesh format {suffix!r} for {path} (use .ply or .obj)")
    return suffix


# ---------------------------------------------------------------------------
# Reading
# ---------------------------------------------------------------------------


def read_mesh(path: str | Path) -> TriMesh:
    """Load a triangle mesh. Vertex order and duplicates are preserved; normals are not read."""
    p = Path(path)
    suffix = _check_suffix(p)
    if not p.exists():
        raise FileNotFoundError(f"File not found: {p}")
    try:
        kwargs = {"maintain_order": True} if suffix == ".obj" else {}
        loaded = trimesh.load(p, file_type=suffix[1:], process=False, force="mesh", **kwargs)
    except Exception as e:  # trimesh raises a wide variety of parse errors
        raise MeshFormatError(f"Could not read {p}: {e}") from e

    vertices = np.asarray(getattr(loaded, "vertices", np.zeros((0, 3))), dtype=np.float64)
    faces = np.asarray(getattr(loaded, "faces", np.zeros((0, 3))), dtype=np.int64)
    if faces.size and faces.shape[1] != 3:
        raise MeshFormatError(f"{p} contains non-triangle faces")
    colors = None
    visual = getattr(loaded, "visual", None)
    if visual is not None and getattr(visual, "kind", None) == "vertex":
        rgba = np.asarray(visual.vertex_colors)
        if len(rgba) == len(vertices):
            colors = rgba[:, :3].astype(np.float64) / 255.0
    try:
        return TriMesh(vertices.reshape(-1, 3), faces.reshape(-1, 3), colors=colors)
    except ValueError as e:
        raise MeshFormatError(f"Invalid mesh in {p}: {e}") from e


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------


def _vertex_dtype(m: TriMesh) -> np.dtype:
    fields: list[tuple[str, str]] = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if m.normals is not None:
        fields += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
    if m.colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    return np.dtype(fields)


def _color_bytes(colors: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(colors * 255.0), 0, 255).astype(np.uint8)


def _ply_header(m: TriMesh, dtype: np.dtype, fmt: str) -> str:
    ply_types = {"<f8": "double", "u1": "uchar", "|u1": "uchar"}
    lines = ["ply", f"format {fmt} 1.0", f"element vertex {m.n_vertices}"]
    for name in dtype.names or ():
        lines.append(f"property {ply_types[dtype[name].str]} {name}")
    lines += [f"element face {m.n_triangles}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    return "\n".join(lines) + "\n"


def write_ply(path: str | Path, m: TriMesh, *, binary: bool = True) -> Path:
    """Write PLY with double positions, normals when present and uchar RGB when colored."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    dtype = _vertex_dtype(m)
    verts = np.empty(m.n_vertices, dtype=dtype)
    verts["x"], verts["y"], verts["z"] = m.vertices.T
    if m.normals is not None:
        verts["nx"], verts["ny"], verts["nz"] = m.normals.T
    if m.colors is not None:
        rgb = _color_bytes(m.colors)
        verts["red"], verts["green"], verts["blue"] = rgb.T

    fmt = "binary_little_endian" if binary else "ascii"
    with p.open("wb") as f:
        f.write(_ply_header(m, dtype, fmt).encode("ascii"))
        if binary:
            faces = np.empty(m.n_triangles, dtype=[("n", "u1"), ("v", "<i4", (3,))])
            faces["n"] = 3
            faces["v"] = m.triangles
            f.write(verts.tobytes())
            f.write(faces.tobytes())
        else:
            for row in verts:
                f.write((" ".join(_ascii_field(v) for v in row) + "\n").encode("ascii"))
            for tri in m.triangles:
                f.write(f"3 {tri[0]} {tri[1]} {tri[2]}\n".encode("ascii"))
    return p


def _ascii_field(value: object) -> str:
    if isinstance(value, np.floating):
        return repr(float(value))
    return str(value)


def write_obj(path: str | Path, m: TriMesh) -> Path:
    """Write ASCII OBJ (v, vn when normals are present, 1-based f)."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in m.vertices.tolist()]
    if m.normals is not None:
        lines += [f"vn {x!r} {y!r} {z!r}" for x, y, z in m.normals.tolist()]
        lines += [f"f {a}//{a} {b}//{b} {c}//{c}" for a, b, c in (m.triangles + 1).tolist()]
    else:
        lines += [f"f {a} {b} {c}" for a, b, c in (m.triangles + 1).tolist()]
    p.write_text("\n".join(lines) + "\n")
    return p


def write_mesh(path: str | Path, m: TriMesh) -> Path:
    """Write by suffix: binary PLY or ASCII OBJ."""
    p = Path(path)
    if _check_suffix(p) == ".obj":
        return write_obj(p, m)
    return write_ply(p, m)


# ---------------------------------------------------------------------------
# Transforms and digests
# ---------------------------------------------------------------------------


def write_transform(path: str | Path, t: RigidTransform) -> Path:
    """4x4 homogeneous matrix, one row per line, full double precision."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    rows = [" ".join(repr(float(v)) for v in row) for row in t.as_matrix()]
    p.write_text("\n".join(rows) + "\n")
    return p


def read_transform(path: str | Path) -> RigidTransform:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"File not found: {p}")
    try:
        matrix = np.array(
            [[float(v) for v in ln.split()] for ln in p.read_text().splitlines() if ln.strip()]
        )
        return RigidTransform.from_matrix(matrix)
    except ValueError as e:
        raise MeshFormatError(f"Invalid transform file {p}: {e}") from e


def mesh_digest(m: TriMesh) -> str:
    """sha256 over vertex and triangle buffers (little-endian)."""
    h = hashlib.sha256()
    h.update(m.vertices.astype("<f8").tobytes())
    h.update(m.triangles.astype("<i8").tobytes())
    return h.hexdigest()


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
