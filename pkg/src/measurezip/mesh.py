"""Triangle meshes: file IO, per-triangle geometry and normalization.

Readers cover ASCII OBJ, ASCII/binary PLY and ASCII OFF. Quads are split
by a fan at their first vertex; larger polygons are rejected.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np


class MeshError(ValueError):
    """Raised for malformed mesh files or invalid mesh data."""

    def __init__(self, message, line=None, path=None):
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        prefix = ":".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.line = line
        self.path = path


@dataclass(frozen=True)
class TriangleMesh:
    """Vertices (nv, 3) float64 and triangles (nt, 3) int64 indices."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64)
        t = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (n, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3:
            raise MeshError(f"triangles must have shape (n, 3), got {t.shape}")
        if len(t) == 0:
            raise MeshError("mesh has no triangles")
        if not np.all(np.isfinite(v)):
            raise MeshError("vertex coordinates must be finite")
        if t.min() < 0 or t.max() >= len(v):
            raise MeshError("triangle index out of range")
        v.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_triangles(self):
        return len(self.triangles)

    def bounding_box(self):
        """Return (min corner, max corner)."""
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def with_vertices(self, vertices):
        return TriangleMesh(vertices, self.triangles)


def triangle_geometry(mesh):
    """Centroids and area-weighted normals of every triangle.

    Returns ``(centroids, nu)``, both (nt, 3). ``nu_i = 0.5 (v3 - v2) x (v2 - v1)``
    so ``|nu_i|`` is the triangle area. Degenerate triangles give ``nu = 0``.
    """
    v = mesh.vertices[mesh.triangles]
    return _centroids_normals(v[:, 0], v[:, 1], v[:, 2])


def _centroids_normals(v1, v2, v3):
    centroids = (v1 + v2 + v3) / 3.0
    nu = 0.5 * np.cross(v3 - v2, v2 - v1)
    return centroids, nu


def surface_area(mesh):
    _, nu = triangle_geometry(mesh)
    return float(np.linalg.norm(nu, axis=1).sum())


def center_and_scale(mesh, target_extent=1.0):
    """Translate the vertex mean to the origin and scale the largest box edge to ``target_extent``."""
    if not target_extent > 0:
        raise ValueError("target_extent must be positive")
    lo, hi = mesh.bounding_box()
    extent = float((hi - lo).max())
    if extent == 0.0:
        raise MeshError("degenerate extent: all vertices coincide")
    v = mesh.vertices - mesh.vertices.mean(axis=0)
    scale = target_extent / extent
    if scale != 1.0:
        v = v * scale
    return mesh.with_vertices(v)


# ---------------------------------------------------------------------------
# readers

def load_mesh(path, format=None):
    """Read a triangle mesh from ``path``.

    ``format`` is one of ``"obj"``, ``"ply"``, ``"off"``; inferred from the
    file extension when omitted.
    """
    path = os.fspath(path)
    fmt = (format or os.path.splitext(path)[1].lstrip(".")).lower()
    if fmt not in _READERS:
        raise MeshError(f"unsupported mesh format {fmt!r}", path=path)
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise MeshError(f"cannot read file: {exc}", path=path) from exc
    try:
        vertices, faces = _READERS[fmt](data)
    except MeshError as exc:
        if exc.path is None:
            raise MeshError(str(exc), path=path) from None
        raise
    return TriangleMesh(vertices, faces)


def _text_lines(data):
    try:
        return data.decode("utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise MeshError(f"file is not valid text: {exc}") from None


def _add_polygon(faces, idx, lineno):
    if len(idx) < 3:
        raise MeshError(f"face has {len(idx)} vertices", line=lineno)
    if len(idx) > 4:
        raise MeshError(f"polygon with {len(idx)} vertices is not supported", line=lineno)
    faces.append((idx[0], idx[1], idx[2]))
    if len(idx) == 4:
        faces.append((idx[0], idx[2], idx[3]))


def _read_obj(data):
    vertices = []
    faces = []
    for lineno, raw in enumerate(_text_lines(data), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise MeshError("vertex record needs 3 coordinates", line=lineno)
            try:
                vertices.append(tuple(float(x) for x in parts[1:4]))
            except ValueError:
                raise MeshError("bad vertex coordinate", line=lineno) from None
        elif tag == "f":
            idx = []
            for tok in parts[1:]:
                try:
                    k = int(tok.split("/", 1)[0])
                except ValueError:
                    raise MeshError(f"bad face index {tok!r}", line=lineno) from None
                if k == 0:
                    raise MeshError("OBJ indices are 1-based, got 0", line=lineno)
                # negative indices count back from the latest vertex
                k = k - 1 if k > 0 else len(vertices) + k
                if not 0 <= k < len(vertices):
                    raise MeshError(f"face index {tok} out of range", line=lineno)
                idx.append(k)
            _add_polygon(faces, idx, lineno)
    if not faces:
        raise MeshError("no faces found")
    return np.array(vertices, dtype=np.float64), np.array(faces, dtype=np.int64)


def _read_off(data):
    lines = []
    for lineno, raw in enumerate(_text_lines(data), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append((lineno, line))
    if not lines or not lines[0][1].startswith("OFF"):
        raise MeshError("missing OFF header", line=1)
    head = lines[0][1][3:].split()
    pos = 1
    if not head:
        head = lines[1][1].split()
        pos = 2
    try:
        nv, nf = int(head[0]), int(head[1])
    except (ValueError, IndexError):
        raise MeshError("bad OFF counts line", line=lines[pos - 1][0]) from None
    if len(lines) < pos + nv + nf:
        raise MeshError("file ends before all vertices and faces were read")
    vertices = []
    for lineno, line in lines[pos:pos + nv]:
        try:
            vertices.append(tuple(float(x) for x in line.split()[:3]))
        except ValueError:
            raise MeshError("bad vertex coordinate", line=lineno) from None
    faces = []
    for lineno, line in lines[pos + nv:pos + nv + nf]:
        try:
            vals = [int(x) for x in line.split()]
        except ValueError:
            raise MeshError("bad face record", line=lineno) from None
        k = vals[0]
        idx = vals[1:1 + k]
        if len(idx) != k:
            raise MeshError("face record shorter than its vertex count", line=lineno)
        for i in idx:
            if not 0 <= i < nv:
                raise MeshError(f"face index {i} out of range", line=lineno)
        _add_polygon(faces, idx, lineno)
    return np.array(vertices, dtype=np.float64), np.array(faces, dtype=np.int64)


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_ply(data):
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise MeshError("missing PLY header", line=1)
    nl = data.find(b"\n", end)
    header = data[:end].decode("ascii", errors="replace").splitlines()
    body = data[nl + 1:] if nl >= 0 else b""
    fmt = None
    elements = []  # (name, count, [(prop name, dtype, list count dtype or None)])
    for lineno, line in enumerate(header, start=1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshError("property before element", line=lineno)
            try:
                if parts[1] == "list":
                    elements[-1][2].append((parts[4], _PLY_TYPES[parts[3]], _PLY_TYPES[parts[2]]))
                else:
                    elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]], None))
            except (KeyError, IndexError):
                raise MeshError(f"unsupported property {line!r}", line=lineno) from None
    header_lines = len(header) + 1
    if fmt == "ascii":
        return _read_ply_ascii(body, elements, header_lines)
    if fmt in ("binary_little_endian", "binary_big_endian"):
        return _read_ply_binary(body, elements, "<" if fmt.endswith("little_endian") else ">")
    raise MeshError(f"unsupported PLY format {fmt!r}")


def _read_ply_ascii(body, elements, offset):
    lines = body.decode("ascii", errors="replace").splitlines()
    pos = 0
    vertices = None
    faces = []
    for name, count, props in elements:
        records = []
        for _ in range(count):
            while pos < len(lines) and not lines[pos].strip():
                pos += 1
            if pos >= len(lines):
                raise MeshError(f"file ends inside element {name!r}")
            lineno = offset + pos + 1
            toks = lines[pos].split()
            pos += 1
            rec = {}
            k = 0
            try:
                for pname, ptype, ltype in props:
                    if ltype is None:
                        rec[pname] = float(toks[k])
                        k += 1
                    else:
                        c = int(toks[k])
                        rec[pname] = [int(t) for t in toks[k + 1:k + 1 + c]]
                        if len(rec[pname]) != c:
                            raise IndexError
                        k += 1 + c
            except (ValueError, IndexError):
                raise MeshError(f"bad {name} record", line=lineno) from None
            records.append((lineno, rec))
        if name == "vertex":
            try:
                vertices = np.array([[r["x"], r["y"], r["z"]] for _, r in records], dtype=np.float64)
            except KeyError:
                raise MeshError("vertex element lacks x/y/z") from None
        elif name == "face":
            for lineno, r in records:
                idx = r.get("vertex_indices", r.get("vertex_index"))
                if idx is None:
                    raise MeshError("face element lacks vertex_indices", line=lineno)
                nv = 0 if vertices is None else len(vertices)
                for i in idx:
                    if not 0 <= i < nv:
                        raise MeshError(f"face index {i} out of range", line=lineno)
                _add_polygon(faces, idx, lineno)
    if vertices is None:
        raise MeshError("no vertex element")
    return vertices, np.array(faces, dtype=np.int64).reshape(-1, 3)


def _read_ply_binary(body, elements, endian):
    buf = memoryview(body)
    pos = 0
    vertices = None
    faces = []
    for name, count, props in elements:
        if all(ltype is None for _, _, ltype in props):
            dt = np.dtype([(p, endian + t) for p, t, _ in props])
            nbytes = dt.itemsize * count
            if pos + nbytes > len(buf):
                raise MeshError(f"file ends inside element {name!r}")
            arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dt, count=count)
            pos += nbytes
            if name == "vertex":
                vertices = np.stack([arr["x"], arr["y"], arr["z"]], axis=1).astype(np.float64)
            continue
        # fast path: a single triangle list per record
        if len(props) == 1 and count > 0:
            pname, itype, ctype = props[0]
            dt = np.dtype([("n", endian + ctype), ("i", endian + itype, (3,))])
            nbytes = dt.itemsize * count
            if pos + nbytes <= len(buf):
                arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dt, count=count)
                if np.all(arr["n"] == 3):
                    pos += nbytes
                    if name == "face":
                        faces.extend(map(tuple, arr["i"].astype(np.int64)))
                    continue
        for _ in range(count):
            rec = {}
            for pname, ptype, ltype in props:
                if ltype is None:
                    dt = np.dtype(endian + ptype)
                    rec[pname] = np.frombuffer(buf[pos:pos + dt.itemsize], dtype=dt)[0]
                    pos += dt.itemsize
                else:
                    cdt = np.dtype(endian + ltype)
                    c = int(np.frombuffer(buf[pos:pos + cdt.itemsize], dtype=cdt)[0])
                    pos += cdt.itemsize
                    idt = np.dtype(endian + ptype)
                    rec[pname] = np.frombuffer(buf[pos:pos + c * idt.itemsize], dtype=idt).astype(np.int64)
                    pos += c * idt.itemsize
            if name == "face":
                idx = rec.get("vertex_indices", rec.get("vertex_index"))
                _add_polygon(faces, list(idx), None)
    if vertices is None:
        raise MeshError("no vertex element")
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(f) and (f.min() < 0 or f.max() >= len(vertices)):
        raise MeshError("face index out of range")
    return vertices, f


_READERS = {"obj": _read_obj, "ply": _read_ply, "off": _read_off}


def save_obj(mesh, path):
    """Write ASCII OBJ with 17 significant digits (round-trips float64 exactly)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {x:.17g} {y:.17g} {z:.17g}\n")
        for a, b, c in mesh.triangles + 1:
            fh.write(f"f {a} {b} {c}\n")


# ---------------------------------------------------------------------------
# synthetic shapes used by tests, acceptance runs and the CLI demos

def icosphere(subdivisions=2, radius=1.0):
    """Subdivided icosahedron; ``20 * 4**subdivisions`` outward-oriented triangles."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    # the formula for nu flips the usual right-hand orientation; order faces so nu points outward
    faces = np.array(faces, dtype=np.int64)[:, ::-1]
    return TriangleMesh(radius * np.array(verts), faces)


def uv_sphere(n_lat, n_lon, radius=1.0):
    """Latitude/longitude sphere; ``2 * n_lon * (n_lat - 1)`` triangles, crowded at the poles."""
    if n_lat < 2 or n_lon < 3:
        raise ValueError("need n_lat >= 2 and n_lon >= 3")
    theta = np.linspace(0.0, np.pi, n_lat + 1)[1:-1]
    phi = np.linspace(0.0, 2 * np.pi, n_lon, endpoint=False)
    st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
    ring = np.stack([st * np.cos(phi), st * np.sin(phi), np.broadcast_to(ct, (len(theta), n_lon))], axis=-1)
    verts = np.concatenate([[[0, 0, 1]], ring.reshape(-1, 3), [[0, 0, -1]]]) * radius
    north, south = 0, len(verts) - 1

    def vid(i, j):
        return 1 + i * n_lon + (j % n_lon)

    faces = []
    for j in range(n_lon):
        faces.append((north, vid(0, j + 1), vid(0, j)))
    for i in range(n_lat - 2):
        for j in range(n_lon):
            a, b = vid(i, j), vid(i, j + 1)
            c, d = vid(i + 1, j), vid(i + 1, j + 1)
            faces.append((a, b, d))
            faces.append((a, d, c))
    for j in range(n_lon):
        faces.append((south, vid(n_lat - 2, j), vid(n_lat - 2, j + 1)))
    return TriangleMesh(verts, np.array(faces, dtype=np.int64))


def tetrahedron():
    v = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriangleMesh(v, f)
