"""Triangle meshes: zero-level-set extraction, point/mesh geometry kernels and
the OBJ / PLY codecs."""

import struct
from dataclasses import dataclass

import numpy as np
from skimage import measure

from handsdf import LOGGER
from handsdf.helper.ext_utils.exceptions import FormatError, InvalidInputError
from handsdf.helper.ext_utils.task_utils import parallel_map

AREA_TOLERANCE = 1e-12
MESH_FORMATS = ("obj", "ply")


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(vertices)):
            raise InvalidInputError("mesh vertices must be finite")
        if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise InvalidInputError("triangle index out of range")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)
        if self.normals is not None:
            object.__setattr__(
                self, "normals", np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            )

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    @classmethod
    def concatenate(cls, meshes):
        vertices, triangles, offset = [], [], 0
        for mesh in meshes:
            vertices.append(mesh.vertices)
            triangles.append(mesh.triangles + offset)
            offset += len(mesh.vertices)
        if not vertices:
            return cls.empty()
        return cls(np.concatenate(vertices), np.concatenate(triangles))

    @property
    def is_empty(self):
        return len(self.triangles) == 0

    @property
    def corners(self):
        """(T, 3, 3) vertex positions per triangle."""
        return self.vertices[self.triangles]

    def face_areas(self):
        return triangle_areas(self.vertices, self.triangles)

    def face_normals(self):
        c = self.corners
        n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
        length = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(length > 0, length, 1.0)

    def edge_degrees(self):
        edges = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(edges, axis=0, return_counts=True)
        return counts

    @property
    def is_watertight(self):
        return not self.is_empty and bool(np.all(self.edge_degrees() == 2))

    def cleaned(self):
        """
        Welds coincident vertices, drops repeated-index and zero-area faces,
        removes unreferenced vertices and sorts faces.
        """
        if self.is_empty:
            return Mesh.empty()
        vertices, inverse = np.unique(self.vertices, axis=0, return_inverse=True)
        triangles = inverse.reshape(-1)[self.triangles]
        distinct = (
            (triangles[:, 0] != triangles[:, 1])
            & (triangles[:, 1] != triangles[:, 2])
            & (triangles[:, 0] != triangles[:, 2])
        )
        triangles = triangles[distinct]
        triangles = triangles[triangle_areas(vertices, triangles) > AREA_TOLERANCE]
        used, remap = np.unique(triangles, return_inverse=True)
        triangles = remap.reshape(-1, 3)
        triangles = triangles[np.lexsort(triangles.T[::-1])]
        return Mesh(vertices[used], triangles)

    def flipped(self):
        return Mesh(self.vertices, self.triangles[:, ::-1])


def triangle_areas(vertices, triangles):
    c = vertices[triangles]
    return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=1)


def signed_volume(mesh):
    c = mesh.corners
    return float(np.einsum("ij,ij->i", c[:, 0], np.cross(c[:, 1], c[:, 2])).sum() / 6.0)


def mesh_volume(mesh):
    """Enclosed volume in mm^3 by the divergence theorem, orientation-free."""
    if mesh.is_empty:
        return 0.0
    if not mesh.is_watertight:
        LOGGER.warning("Volume of an open mesh is a best-effort value")
    return abs(signed_volume(mesh))


def transform_mesh(mesh, rotation, translation):
    vertices = mesh.vertices @ np.asarray(rotation).T + np.asarray(translation)
    return Mesh(vertices, mesh.triangles)


def marching_cubes(field, bounds, resolution):
    """
    Extracts the zero level set of a field sampled on a node grid.

    The grid spans `bounds` with `resolution` nodes per axis. Faces are
    oriented outward. A field without a sign change yields an empty mesh.
    """
    bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    resolution = np.broadcast_to(np.asarray(resolution, dtype=int), (3,))
    if np.any(resolution < 2):
        raise InvalidInputError("extraction resolution must be at least 2 per axis")
    axes = [np.linspace(bounds[0, i], bounds[1, i], resolution[i]) for i in range(3)]
    nodes = np.stack([m.ravel() for m in np.meshgrid(*axes, indexing="ij")], axis=1)
    values = parallel_map(field.evaluate, nodes).reshape(tuple(resolution))
    if not (values.min() < 0.0 < values.max()):
        return Mesh.empty()
    spacing = (bounds[1] - bounds[0]) / (resolution - 1)
    verts, faces, _, _ = measure.marching_cubes(
        values,
        level=0.0,
        spacing=tuple(spacing),
        method="lorensen",
        allow_degenerate=False,
    )
    mesh = Mesh(verts + bounds[0], faces).cleaned()
    if signed_volume(mesh) < 0:
        mesh = mesh.flipped()
    return mesh


def sample_surface(mesh, count, seed=0):
    """Area-weighted surface samples and the normals of their faces."""
    if mesh.is_empty:
        raise InvalidInputError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    areas = mesh.face_areas()
    faces = rng.choice(len(areas), size=count, p=areas / areas.sum())
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    c = mesh.corners[faces]
    points = (
        (1.0 - r1)[:, None] * c[:, 0]
        + (r1 * (1.0 - r2))[:, None] * c[:, 1]
        + (r1 * r2)[:, None] * c[:, 2]
    )
    return points, mesh.face_normals()[faces]


def _chunk_rows(triangle_count, budget=2_000_000):
    return max(1, budget // max(triangle_count, 1))


def closest_points_on_triangles(points, a, b, c):
    """
    Closest point of every triangle to every query, by Voronoi region of the
    triangle (vertex, edge or face). Shapes: points (P, 1, 3), corners (1, T, 3).
    """
    ab, ac = b - a, c - a
    ap, bp, cp = points - a, points - b, points - c
    d1 = np.einsum("...i,...i", ab, ap)
    d2 = np.einsum("...i,...i", ac, ap)
    d3 = np.einsum("...i,...i", ab, bp)
    d4 = np.einsum("...i,...i", ac, bp)
    d5 = np.einsum("...i,...i", ab, cp)
    d6 = np.einsum("...i,...i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        result = a + (vb / denom)[..., None] * ab + (vc / denom)[..., None] * ac

        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        result = np.where(on_bc[..., None], b + t_bc[..., None] * (c - b), result)

        t_ac = d2 / (d2 - d6)
        on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        result = np.where(on_ac[..., None], a + t_ac[..., None] * ac, result)

        result = np.where(((d6 >= 0) & (d5 <= d6))[..., None], c, result)

        t_ab = d1 / (d1 - d3)
        on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        result = np.where(on_ab[..., None], a + t_ab[..., None] * ab, result)

        result = np.where(((d3 >= 0) & (d4 <= d3))[..., None], b, result)
        result = np.where(((d1 <= 0) & (d2 <= 0))[..., None], a, result)
    return np.broadcast_to(result, np.broadcast_shapes(points.shape, a.shape))


def point_mesh_distance(mesh, points):
    """Unsigned distance from each point to the nearest triangle."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    corners = mesh.corners
    a, b, c = (corners[None, :, k] for k in range(3))
    out = np.empty(len(points))
    step = _chunk_rows(len(corners))
    for i in range(0, len(points), step):
        p = points[i : i + step, None, :]
        closest = closest_points_on_triangles(p, a, b, c)
        out[i : i + step] = np.sqrt(((closest - p) ** 2).sum(axis=2).min(axis=1))
    return out


def winding_number(mesh, points):
    """Generalized winding number from the summed solid angles of all faces."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    corners = mesh.corners
    out = np.empty(len(points))
    step = _chunk_rows(len(corners))
    for i in range(0, len(points), step):
        rel = corners[None, :, :, :] - points[i : i + step, None, None, :]
        a, b, c = rel[..., 0, :], rel[..., 1, :], rel[..., 2, :]
        la, lb, lc = (np.linalg.norm(v, axis=-1) for v in (a, b, c))
        det = np.einsum("...i,...i", a, np.cross(b, c))
        denom = (
            la * lb * lc
            + np.einsum("...i,...i", a, b) * lc
            + np.einsum("...i,...i", b, c) * la
            + np.einsum("...i,...i", c, a) * lb
        )
        out[i : i + step] = 2.0 * np.arctan2(det, denom).sum(axis=1) / (4.0 * np.pi)
    return out


def column_winding(mesh, xs, ys, zs):
    """
    Winding number on a voxel lattice by signed crossings of +x rays.

    For every (y, z) column the mesh faces pierced by the ray are found in
    the y-z projection; each crossing at x_t contributes the sign of the face
    normal's x component to every voxel with x < x_t.
    """
    xs, ys, zs = (np.asarray(v, dtype=np.float64) for v in (xs, ys, zs))
    yy, zz = np.meshgrid(ys, zs, indexing="ij")
    columns = np.stack([yy.ravel(), zz.ravel()], axis=1)
    # nudge rays off edges that lie exactly on lattice lines
    columns += np.array([np.pi, np.e]) * 1e-9 * (1.0 + np.abs(columns).max(initial=0.0))
    corners = mesh.corners
    normals_x = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])[:, 0]
    faces = np.flatnonzero(normals_x != 0)
    tri = corners[faces]
    signs = np.sign(normals_x[faces]).astype(np.int64)
    diff = np.zeros((len(columns), len(xs) + 1), dtype=np.int64)
    step = _chunk_rows(len(faces))
    for i in range(0, len(columns), step):
        q = columns[i : i + step, None, :]
        edge = []
        for k in range(3):
            p0 = tri[None, :, k, 1:]
            p1 = tri[None, :, (k + 1) % 3, 1:]
            e = p1 - p0
            r = q - p0
            edge.append(e[..., 0] * r[..., 1] - e[..., 1] * r[..., 0])
        e0, e1, e2 = edge
        hit = ((e0 > 0) & (e1 > 0) & (e2 > 0)) | ((e0 < 0) & (e1 < 0) & (e2 < 0))
        col, face = np.nonzero(hit)
        if not len(col):
            continue
        # barycentric weights in the projection give the crossing x
        w = np.stack([e1[col, face], e2[col, face], e0[col, face]], axis=1)
        w /= w.sum(axis=1, keepdims=True)
        x_hit = np.einsum("ij,ij->i", w, tri[face, :, 0])
        cut = np.searchsorted(xs, x_hit, side="left")
        np.add.at(diff, (i + col, np.zeros_like(col)), signs[face])
        np.add.at(diff, (i + col, cut), -signs[face])
    winding = np.cumsum(diff[:, :-1], axis=1)
    return winding.reshape(len(ys), len(zs), len(xs)).transpose(2, 0, 1)


def _format_float(value):
    return np.format_float_positional(value, unique=True, trim="-")


def export_mesh(mesh, fmt):
    """Serializes a mesh to OBJ (ASCII, 1-indexed) or PLY (binary little endian)."""
    fmt = fmt.lower()
    vertices = mesh.vertices.astype(np.float32)
    if fmt == "obj":
        lines = [
            "v " + " ".join(_format_float(c) for c in vertex) for vertex in vertices
        ]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
        return ("\n".join(lines) + "\n").encode() if lines else b""
    if fmt == "ply":
        header = (
            "ply\nformat binary_little_endian 1.0\n"
            f"element vertex {len(vertices)}\n"
            "property float x\nproperty float y\nproperty float z\n"
            f"element face {len(mesh.triangles)}\n"
            "property list uchar int vertex_indices\nend_header\n"
        ).encode()
        faces = np.empty(len(mesh.triangles), dtype=[("n", "u1"), ("idx", "<i4", 3)])
        faces["n"] = 3
        faces["idx"] = mesh.triangles
        return header + vertices.astype("<f4").tobytes() + faces.tobytes()
    raise InvalidInputError(f"unsupported mesh format {fmt!r}")


def import_mesh(data, fmt):
    fmt = fmt.lower()
    if fmt == "obj":
        return _import_obj(data.decode())
    if fmt == "ply":
        return _import_ply(data)
    raise InvalidInputError(f"unsupported mesh format {fmt!r}")


def _import_obj(text):
    vertices, triangles = [], []
    for number, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            vertices.append([np.float32(c) for c in parts[1:4]])
        elif parts[0] == "f":
            try:
                idx = [int(p.split("/")[0]) for p in parts[1:]]
            except ValueError as e:
                raise FormatError(f"obj line {number}: bad face {line!r}") from e
            idx = [i - 1 if i > 0 else len(vertices) + i for i in idx]
            triangles.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
    return Mesh(
        np.asarray(vertices, dtype=np.float32).astype(np.float64).reshape(-1, 3),
        np.asarray(triangles, dtype=np.int64).reshape(-1, 3),
    )


_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "<i2", "ushort": "<u2",
    "int": "<i4", "uint": "<u4", "float": "<f4", "double": "<f8",
    "int8": "i1", "uint8": "u1", "int32": "<i4", "uint32": "<u4",
    "float32": "<f4", "float64": "<f8",
}


def _import_ply(data):
    marker = b"end_header\n"
    end = data.find(marker)
    if not data.startswith(b"ply\n") or end < 0:
        raise FormatError("not a ply stream")
    header = data[:end].decode().splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise FormatError("only binary little endian ply is supported")
    elements, current = [], None
    for line in header:
        parts = line.split()
        if parts[0] == "element":
            current = {"name": parts[1], "count": int(parts[2]), "props": []}
            elements.append(current)
        elif parts[0] == "property" and current is not None:
            current["props"].append(parts[1:])
    offset = end + len(marker)
    vertices = triangles = None
    for element in elements:
        if element["name"] == "vertex":
            dtype = np.dtype([(p[-1], _PLY_TYPES[p[0]]) for p in element["props"]])
            block = np.frombuffer(data, dtype=dtype, count=element["count"], offset=offset)
            offset += dtype.itemsize * element["count"]
            vertices = np.stack([block[k].astype(np.float64) for k in "xyz"], axis=1)
        elif element["name"] == "face":
            _, count_type, index_type, _ = element["props"][0]
            count_size = np.dtype(_PLY_TYPES[count_type]).itemsize
            index_dtype = np.dtype(_PLY_TYPES[index_type])
            fixed = np.dtype([("n", _PLY_TYPES[count_type]), ("idx", index_dtype, 3)])
            if len(data) - offset == fixed.itemsize * element["count"]:
                block = np.frombuffer(data, dtype=fixed, count=element["count"], offset=offset)
                if np.all(block["n"] == 3):
                    triangles = block["idx"].astype(np.int64)
                    offset += fixed.itemsize * element["count"]
                    continue
            faces = []
            for _ in range(element["count"]):
                (n,) = struct.unpack_from(
                    "<" + np.dtype(_PLY_TYPES[count_type]).char, data, offset
                )
                offset += count_size
                idx = np.frombuffer(data, dtype=index_dtype, count=n, offset=offset)
                offset += index_dtype.itemsize * n
                faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, n - 1))
            triangles = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        else:
            raise FormatError(f"unexpected ply element {element['name']!r}")
    if vertices is None:
        raise FormatError("ply stream has no vertex element")
    return Mesh(vertices, triangles if triangles is not None else np.zeros((0, 3)))
