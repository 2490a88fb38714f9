"""
Mesh file I/O: OFF and legacy-VTK ASCII polydata, plus PLY through trimesh.

OFF and VTK coordinates are written with 17 significant digits so a write/read
round trip is lossless. Binary OFF and VTK files are rejected.
"""
from pathlib import Path
import logging

import numpy as np
import trimesh

from geometry.exceptions import InvalidArgumentError, MeshParseError

from .mesh import TriangleMesh

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "{:.17g}"


def _tokens(lines, start=0):
    """Yield (token, 1-based line number) from ``lines[start:]`` with comments removed."""
    for number, line in enumerate(lines[start:], start=start + 1):
        for token in line.split("#", 1)[0].split():
            yield token, number


class _TokenStream:
    def __init__(self, lines, path, start=0):
        self._iter = _tokens(lines, start)
        self.path = path
        self.line = start
        self._peeked = None

    def peek(self):
        if self._peeked is None:
            self._peeked = next(self._iter, None)
        return self._peeked

    def next(self, what):
        item = self.peek()
        self._peeked = None
        if item is None:
            raise MeshParseError(f"unexpected end of file while reading {what}", path=self.path, line=self.line)
        token, self.line = item
        return token

    def number(self, kind, what):
        token = self.next(what)
        try:
            return kind(token)
        except ValueError:
            raise MeshParseError(f"invalid {what}: {token!r}", path=self.path, line=self.line) from None


def _read_off(lines, path):
    content = [(i, line.split("#", 1)[0].strip()) for i, line in enumerate(lines)]
    content = [(i, line) for i, line in content if line]
    if not content or not content[0][1].startswith("OFF"):
        raise MeshParseError("missing OFF header", path=path, line=content[0][0] + 1 if content else 1)
    header_index, header = content[0]
    rest = header[3:].split()
    stream = _TokenStream(lines, path, start=header_index + 1)
    counts = []
    for token in rest:
        try:
            counts.append(int(token))
        except ValueError:
            raise MeshParseError(f"invalid count {token!r}", path=path, line=header_index + 1) from None
    while len(counts) < 3:
        counts.append(stream.number(int, "element counts"))
    n_vertices, n_faces = counts[0], counts[1]

    vertices = np.empty((n_vertices, 3))
    for i in range(n_vertices):
        for j in range(3):
            vertices[i, j] = stream.number(float, "vertex coordinate")
    triangles = np.empty((n_faces, 3), dtype=np.int64)
    for i in range(n_faces):
        size = stream.number(int, "face size")
        if size != 3:
            raise MeshParseError(f"only triangles are supported, got a {size}-gon", path=path, line=stream.line)
        face_line = stream.line
        for j in range(3):
            triangles[i, j] = stream.number(int, "vertex index")
            if stream.line != face_line:
                raise MeshParseError("face record spans several lines", path=path, line=stream.line)
        # Optional per-face colour values are ignored.
        while stream.peek() is not None and stream.peek()[1] == face_line:
            stream.next("face colour")
    return vertices, triangles


def _read_vtk(lines, path):
    if not lines or not lines[0].lower().startswith("# vtk datafile version"):
        raise MeshParseError("missing '# vtk DataFile Version' header", path=path, line=1)
    if len(lines) < 4:
        raise MeshParseError("truncated VTK header", path=path, line=len(lines))
    if lines[2].strip().upper() != "ASCII":
        raise MeshParseError("only ASCII VTK files are supported", path=path, line=3)
    stream = _TokenStream(lines, path, start=3)
    if stream.next("DATASET").upper() != "DATASET" or stream.next("dataset type").upper() != "POLYDATA":
        raise MeshParseError("expected 'DATASET POLYDATA'", path=path, line=stream.line)

    vertices = triangles = None
    while stream.peek() is not None:
        keyword = stream.next("section").upper()
        if keyword == "POINTS":
            n_points = stream.number(int, "point count")
            stream.next("point type")
            vertices = np.array([stream.number(float, "point coordinate") for _ in range(3 * n_points)]).reshape(-1, 3)
        elif keyword == "POLYGONS":
            n_polygons = stream.number(int, "polygon count")
            stream.number(int, "polygon list size")
            triangles = np.empty((n_polygons, 3), dtype=np.int64)
            for i in range(n_polygons):
                size = stream.number(int, "polygon size")
                if size != 3:
                    raise MeshParseError(f"only triangles are supported, got a {size}-gon", path=path, line=stream.line)
                for j in range(3):
                    triangles[i, j] = stream.number(int, "polygon index")
        else:
            logger.warning("%s: ignoring VTK section %s and everything after line %d", path, keyword, stream.line)
            break

    if vertices is None or triangles is None:
        raise MeshParseError("VTK file lacks POINTS or POLYGONS", path=path, line=stream.line)
    return vertices, triangles


_READERS = {".off": _read_off, ".vtk": _read_vtk}


def _read_ply(path):
    try:
        surface = trimesh.load(str(path), file_type="ply", process=False, force="mesh")
    except Exception as error:  # noqa: BLE001 - trimesh raises loader-specific errors
        raise MeshParseError(f"unreadable PLY file: {error}", path=path) from error
    if len(getattr(surface, "faces", ())) == 0:
        raise MeshParseError("PLY file has no triangles", path=path)
    return TriangleMesh.from_trimesh(surface)


def read_mesh(path):
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return _read_ply(path)
    reader = _READERS.get(path.suffix.lower())
    if reader is None:
        raise InvalidArgumentError("unsupported mesh format", context={"path": str(path)})
    with open(path, "r", encoding="utf-8") as handle:
        lines = handle.read().splitlines()
    vertices, triangles = reader(lines, path)
    return TriangleMesh(vertices, triangles)


def _format_point(point):
    return " ".join(FLOAT_FORMAT.format(value) for value in point)


def write_mesh(mesh, path):
    path = Path(path)
    suffix = path.suffix.lower()
    path.parent.mkdir(parents=True, exist_ok=True)
    if suffix == ".ply":
        mesh.to_trimesh().export(str(path), file_type="ply", encoding="ascii")
        return path
    lines = []
    if suffix == ".off":
        lines.append("OFF")
        lines.append(f"{mesh.n_vertices} {mesh.n_triangles} 0")
        lines.extend(_format_point(point) for point in mesh.points)
        lines.extend(f"3 {a} {b} {c}" for a, b, c in mesh.triangles)
    elif suffix == ".vtk":
        lines.append("# vtk DataFile Version 3.0")
        lines.append("systole mesh")
        lines.append("ASCII")
        lines.append("DATASET POLYDATA")
        lines.append(f"POINTS {mesh.n_vertices} double")
        lines.extend(_format_point(point) for point in mesh.points)
        lines.append(f"POLYGONS {mesh.n_triangles} {4 * mesh.n_triangles}")
        lines.extend(f"3 {a} {b} {c}" for a, b, c in mesh.triangles)
    else:
        raise InvalidArgumentError("unsupported mesh format", context={"path": str(path)})
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        handle.write("\n".join(lines) + "\n")
    return path
