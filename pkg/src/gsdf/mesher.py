"""Surface extraction: marching tetrahedra on the SDF zero level set, with the
tetrahedral lattice restricted to cells near Gaussian primitives.

The lattice is a uniform world-space grid over the primitives' bounding box;
each cube splits into the six tetrahedra sharing its main diagonal (one per
permutation of the axis order), which keeps face diagonals consistent across
neighboring cubes. A cube is active when its center lies within
radius_sigma * (largest scale axis) of any primitive, so extraction never
visits empty space far from the explicit representation.
"""

from __future__ import annotations

import itertools
import struct
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from .errors import EmptyResultError, InvalidInputError

def _cube_tetrahedra() -> np.ndarray:
    """(6, 4) corner indices into the cube's 8 corners (bit order x*4 + y*2 + z)."""
    tets = []
    for perm in itertools.permutations(range(3)):
        corner = np.zeros(3, dtype=np.int64)
        path = [corner.copy()]
        for axis in perm:
            corner[axis] = 1
            path.append(corner.copy())
        tets.append([c[0] * 4 + c[1] * 2 + c[2] for c in path])
    return np.asarray(tets, dtype=np.int64)


TET_TABLE = _cube_tetrahedra()
_CUBE_OFFSETS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)],
                         dtype=np.int64)


@dataclass
class TetraGrid:
    origin: np.ndarray  # world position of lattice vertex (0, 0, 0)
    cell_size: np.ndarray  # (3,) world units per cube edge
    dims: np.ndarray  # (3,) cube counts per axis
    active: np.ndarray  # (A, 3) int cube indices, lexicographically sorted
    total_cells: int = 0

    def __post_init__(self):
        self.total_cells = int(np.prod(self.dims))

    @property
    def active_fraction(self) -> float:
        return len(self.active) / max(self.total_cells, 1)

    def vertex_position(self, ijk: np.ndarray) -> np.ndarray:
        return self.origin + ijk * self.cell_size


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64 world
    triangles: np.ndarray  # (T, 3) int64
    normals: np.ndarray | None = None  # (V, 3) unit, from the SDF gradient
    triangle_cubes: np.ndarray | None = None  # (T, 3) source cube per triangle
    stats: dict = field(default_factory=dict)

    def validate(self):
        if self.triangles.size and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise InvalidInputError("triangle indices out of range")


@dataclass
class ExtractionStats:
    active_fraction: float
    active_cells: int
    total_cells: int
    wall_time_s: float
    vertex_count: int
    triangle_count: int


def select_active_cells(means: np.ndarray, scales: np.ndarray, resolution: int,
                        radius_sigma: float = 3.0, margin: float = 0.0,
                        bounds: tuple | None = None) -> TetraGrid:
    """Cubes whose center lies within radius_sigma * max-scale of any primitive.

    The lattice spans the primitives' bounding box inflated by the 3-sigma
    support of the largest primitive plus `margin` (independent of
    radius_sigma, so constrained and dense extraction share the lattice), or
    explicit `bounds` = (lo, hi). radius_sigma = inf activates every cube.
    """
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    scales = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
    if means.shape[0] == 0:
        raise InvalidInputError("select_active_cells requires at least one primitive")
    if resolution < 1:
        raise InvalidInputError("resolution must be >= 1")
    radii = (np.inf if np.isinf(radius_sigma)
             else radius_sigma * scales.max(axis=1))
    if bounds is not None:
        lo = np.asarray(bounds[0], dtype=np.float64)
        hi = np.asarray(bounds[1], dtype=np.float64)
    else:
        pad = margin + 3.0 * float(scales.max())
        lo = means.min(axis=0) - pad
        hi = means.max(axis=0) + pad
    span = np.maximum(hi - lo, 1e-6)
    dims = np.full(3, int(resolution), dtype=np.int64)
    cell = span / dims

    if np.isinf(radius_sigma):
        grid = np.ones(dims, dtype=bool)
    else:
        grid = np.zeros(dims, dtype=bool)
        centers_base = lo + 0.5 * cell
        for mu, r in zip(means, radii):
            i0 = np.maximum(np.floor((mu - r - lo) / cell - 0.5).astype(np.int64), 0)
            i1 = np.minimum(np.ceil((mu + r - lo) / cell - 0.5).astype(np.int64) + 1, dims)
            if np.any(i1 <= i0):
                continue
            ax = [centers_base[d] + np.arange(i0[d], i1[d]) * cell[d] for d in range(3)]
            dist2 = ((ax[0][:, None, None] - mu[0]) ** 2
                     + (ax[1][None, :, None] - mu[1]) ** 2
                     + (ax[2][None, None, :] - mu[2]) ** 2)
            block = grid[i0[0]:i1[0], i0[1]:i1[1], i0[2]:i1[2]]
            block |= dist2 <= r * r
    active = np.argwhere(grid)
    if active.shape[0] == 0:
        raise EmptyResultError("no active cells: increase radius_sigma or resolution")
    return TetraGrid(origin=lo, cell_size=cell, dims=dims, active=active)


def _evaluate_sdf(sdf, points: np.ndarray, chunk: int = 200_000) -> np.ndarray:
    """Evaluate an SdfField-like object (has .query) or a plain callable."""
    out = np.empty(points.shape[0], dtype=np.float64)
    for a in range(0, points.shape[0], chunk):
        b = min(a + chunk, points.shape[0])
        if hasattr(sdf, "query"):
            with torch.no_grad():
                v = sdf.query(points[a:b])
            out[a:b] = np.asarray(v, dtype=np.float64).reshape(-1)
        else:
            out[a:b] = np.asarray(sdf(points[a:b]), dtype=np.float64).reshape(-1)
    return out


def marching_tetrahedra(grid: TetraGrid, sdf) -> TriangleMesh:
    """Triangulate the zero level set over the grid's active cells.

    Corner values exactly 0 count as positive (deterministic tie-break).
    Zero crossings interpolate linearly along tet edges; shared edges weld to
    shared vertices; triangle winding points toward positive SDF. Degenerate
    triangles (area < 1e-12) are dropped.
    """
    nx, ny, nz = (int(d) for d in grid.dims)
    vert_strides = np.array([(ny + 1) * (nz + 1), nz + 1, 1], dtype=np.int64)

    corner_ijk = grid.active[:, None, :] + _CUBE_OFFSETS[None, :, :]  # (A, 8, 3)
    corner_gid = corner_ijk @ vert_strides  # (A, 8)

    gids, inverse = np.unique(corner_gid.reshape(-1), return_inverse=True)
    ijk = np.stack([gids // vert_strides[0],
                    (gids % vert_strides[0]) // vert_strides[1],
                    gids % vert_strides[1]], axis=1)
    positions = grid.vertex_position(ijk)
    values = _evaluate_sdf(sdf, positions)

    # corner values within FP noise of zero snap to exact zero: their crossings
    # then land bitwise on the corner and weld exactly (positive tie-break)
    snap_tol = 1e-9 * float(np.linalg.norm(grid.cell_size))
    values = np.where(np.abs(values) < snap_tol, 0.0, values)

    local = inverse.reshape(corner_gid.shape)  # (A, 8) -> index into gids
    tets = local[:, TET_TABLE]  # (A, 6, 4)
    tet_cubes = np.repeat(grid.active, 6, axis=0)
    tets = tets.reshape(-1, 4)

    tv = values[tets]  # (T, 4)
    neg = tv < 0.0  # exact zero counts as positive
    ncount = neg.sum(axis=1)
    crossing = (ncount > 0) & (ncount < 4)
    tets = tets[crossing]
    tv = tv[crossing]
    neg = neg[crossing]
    ncount = ncount[crossing]
    tet_cubes = tet_cubes[crossing]
    if tets.shape[0] == 0:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64),
                            normals=np.zeros((0, 3)),
                            triangle_cubes=np.zeros((0, 3), np.int64))

    # Order corners so the negatives come first: (T, 4) corner slots.
    order = np.argsort(~neg, axis=1, kind="stable")
    sorted_corners = np.take_along_axis(tets, order, axis=1)

    tri_edges = []  # rows of (corner_a_gid, corner_b_gid) triples per triangle
    tri_cubes = []

    def edge_rows(c_from, c_to):
        return np.stack([c_from, c_to], axis=-1)

    one = ncount == 1
    if one.any():
        s = sorted_corners[one]
        e = [edge_rows(s[:, 0], s[:, k]) for k in (1, 2, 3)]
        tri_edges.append(np.stack(e, axis=1))  # (n, 3 edges, 2)
        tri_cubes.append(tet_cubes[one])
    three = ncount == 3
    if three.any():
        s = sorted_corners[three]
        e = [edge_rows(s[:, k], s[:, 3]) for k in (0, 1, 2)]
        tri_edges.append(np.stack(e, axis=1))
        tri_cubes.append(tet_cubes[three])
    two = ncount == 2
    if two.any():
        s = sorted_corners[two]
        e02 = edge_rows(s[:, 0], s[:, 2])
        e03 = edge_rows(s[:, 0], s[:, 3])
        e12 = edge_rows(s[:, 1], s[:, 2])
        e13 = edge_rows(s[:, 1], s[:, 3])
        tri_edges.append(np.stack([e02, e03, e13], axis=1))
        tri_edges.append(np.stack([e02, e13, e12], axis=1))
        tri_cubes.append(tet_cubes[two])
        tri_cubes.append(tet_cubes[two])

    edges = np.concatenate(tri_edges, axis=0)  # (T, 3, 2) local vertex ids
    tri_cubes = np.concatenate(tri_cubes, axis=0)

    key = np.sort(edges.reshape(-1, 2), axis=1)
    uniq, tri_idx = np.unique(key, axis=0, return_inverse=True)
    va, vb = uniq[:, 0], uniq[:, 1]
    sa, sb = values[va], values[vb]
    t = sa / (sa - sb)
    verts = positions[va] + t[:, None] * (positions[vb] - positions[va])
    # corners with exactly zero SDF put the crossing on the corner itself
    # (t == 1; t == 0 cannot happen, negatives are strict); snap bitwise so the
    # position weld below can merge the coincident vertices different edges
    # produce there -- without the merge those corners break watertightness
    on_corner = t >= 1.0
    if on_corner.any():
        verts[on_corner] = positions[vb[on_corner]]
    verts, pos_remap = np.unique(verts, axis=0, return_inverse=True)
    tris = pos_remap[tri_idx].reshape(-1, 3)

    # Orient toward positive SDF: inside each tet the interpolant is linear, so
    # the (positive centroid - negative centroid) direction is the gradient side.
    cent_neg = np.zeros((tets.shape[0], 3))
    cent_pos = np.zeros((tets.shape[0], 3))
    pos_counts = (~neg).sum(axis=1)
    cp = positions[sorted_corners]
    for k in range(4):
        w_neg = (k < ncount)[:, None]
        cent_neg += np.where(w_neg, cp[:, k], 0)
        cent_pos += np.where(~w_neg, cp[:, k], 0)
    cent_neg /= ncount[:, None]
    cent_pos /= pos_counts[:, None]
    ref = cent_pos - cent_neg

    # Per-triangle reference direction: tet index per triangle in the same
    # concatenation order used above.
    tet_ids = []
    if one.any():
        tet_ids.append(np.nonzero(one)[0])
    if three.any():
        tet_ids.append(np.nonzero(three)[0])
    if two.any():
        tet_ids.append(np.nonzero(two)[0])
        tet_ids.append(np.nonzero(two)[0])
    tet_ids = np.concatenate(tet_ids)
    refs = ref[tet_ids]

    p0, p1, p2 = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    n = np.cross(p1 - p0, p2 - p0)
    flip = (n * refs).sum(axis=1) < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]

    collapsed = ((tris[:, 0] == tris[:, 1]) | (tris[:, 1] == tris[:, 2])
                 | (tris[:, 0] == tris[:, 2]))
    area2 = np.linalg.norm(np.cross(verts[tris[:, 1]] - verts[tris[:, 0]],
                                    verts[tris[:, 2]] - verts[tris[:, 0]]), axis=1)
    good = (~collapsed) & (area2 > 2e-12)  # |cross| = 2 * area
    tris = tris[good]
    tri_cubes = tri_cubes[good]

    normals = None
    if hasattr(sdf, "gradient"):
        g = sdf.gradient(verts)
        g = np.asarray(g, dtype=np.float64)
        normals = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    mesh = TriangleMesh(verts, tris.astype(np.int64), normals=normals,
                        triangle_cubes=tri_cubes,
                        stats={"degenerate_dropped": int((~good).sum())})
    mesh.validate()
    return mesh


def extract_mesh(means, scales, sdf, resolution: int = 64,
                 radius_sigma: float = 3.0) -> tuple[TriangleMesh, ExtractionStats]:
    """Gaussian-constrained isosurface extraction; reports cell stats and wall time."""
    t0 = time.perf_counter()
    grid = select_active_cells(means, scales, resolution, radius_sigma)
    mesh = marching_tetrahedra(grid, sdf)
    dt = time.perf_counter() - t0
    if mesh.triangles.shape[0] == 0:
        raise EmptyResultError(
            "extracted mesh is empty: increase resolution or radius_sigma")
    stats = ExtractionStats(active_fraction=grid.active_fraction,
                            active_cells=len(grid.active),
                            total_cells=grid.total_cells, wall_time_s=dt,
                            vertex_count=len(mesh.vertices),
                            triangle_count=len(mesh.triangles))
    mesh.stats.update(stats.__dict__)
    return mesh, stats


def chamfer_distance(a, b) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets, halved."""
    pa = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    pb = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if pa.shape[0] == 0 or pb.shape[0] == 0:
        raise InvalidInputError("chamfer_distance requires non-empty point sets")
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def sample_mesh_surface(mesh: TriangleMesh, count: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform-by-area surface samples from a triangle mesh."""
    if mesh.triangles.shape[0] == 0:
        raise EmptyResultError("cannot sample an empty mesh")
    v = mesh.vertices
    t = mesh.triangles
    e1 = v[t[:, 1]] - v[t[:, 0]]
    e2 = v[t[:, 2]] - v[t[:, 0]]
    area = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    probs = area / area.sum()
    idx = rng.choice(len(t), size=count, p=probs)
    u = rng.random(count)
    w = rng.random(count)
    flip = u + w > 1
    u[flip] = 1 - u[flip]
    w[flip] = 1 - w[flip]
    return v[t[idx, 0]] + u[:, None] * e1[idx] + w[:, None] * e2[idx]


def edge_incidence(mesh: TriangleMesh):
    """Map undirected edge -> incident triangle count (watertightness checks)."""
    t = mesh.triangles
    edges = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    return uniq, counts


def write_ply(path, mesh: TriangleMesh):
    """Binary little-endian PLY with positions, normals, and triangle indices."""
    n = mesh.normals if mesh.normals is not None else np.zeros_like(mesh.vertices)
    with open(path, "wb") as f:
        f.write(b"ply\nformat binary_little_endian 1.0\n")
        f.write(f"element vertex {len(mesh.vertices)}\n".encode())
        f.write(b"property float x\nproperty float y\nproperty float z\n")
        f.write(b"property float nx\nproperty float ny\nproperty float nz\n")
        f.write(f"element face {len(mesh.triangles)}\n".encode())
        f.write(b"property list uchar int vertex_indices\nend_header\n")
        packed = np.hstack([mesh.vertices, n]).astype("<f4")
        f.write(packed.tobytes())
        for tri in mesh.triangles:
            f.write(struct.pack("<B3i", 3, int(tri[0]), int(tri[1]), int(tri[2])))


def read_ply_mesh(path) -> TriangleMesh:
    """Read back a mesh written by write_ply (binary LE, xyz + normals + faces)."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise InvalidInputError(f"cannot read PLY: {e}") from e
    header_end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or header_end < 0:
        raise InvalidInputError("not a PLY file")
    header = data[:header_end].decode("ascii", "replace").splitlines()
    if not any("binary_little_endian" in l for l in header):
        raise InvalidInputError("only binary little-endian mesh PLY supported")
    n_vertex = n_face = 0
    vertex_props = 0
    current = None
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vertex = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            vertex_props += 1
    body = data[header_end + len(b"end_header\n"):]
    vert_bytes = 4 * vertex_props * n_vertex
    varr = np.frombuffer(body[:vert_bytes], dtype="<f4").reshape(n_vertex, vertex_props)
    vertices = varr[:, :3].astype(np.float64)
    normals = varr[:, 3:6].astype(np.float64) if vertex_props >= 6 else None
    tris = np.zeros((n_face, 3), dtype=np.int64)
    off = vert_bytes
    for i in range(n_face):
        cnt = body[off]
        if cnt != 3:
            raise InvalidInputError("non-triangle face in mesh PLY")
        tris[i] = struct.unpack_from("<3i", body, off + 1)
        off += 1 + 12
    mesh = TriangleMesh(vertices, tris, normals=normals)
    mesh.validate()
    return mesh


def read_ply_points(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Vertex positions (and colors if present) from ascii / binary-LE PLY."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise InvalidInputError(f"cannot read PLY: {e}") from e
    header_end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or header_end < 0:
        raise InvalidInputError("not a PLY file")
    header = data[:header_end].decode("ascii", "replace").splitlines()
    body = data[header_end + len(b"end_header\n"):]
    fmt = next((l.split()[1] for l in header if l.startswith("format")), "ascii")
    n_vertex = 0
    props = []
    in_vertex = False
    for line in header:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                n_vertex = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise InvalidInputError("list property in vertex element unsupported")
            props.append((parts[2], parts[1]))
    type_map = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
                "uchar": "u1", "uint8": "u1", "int": "<i4", "int32": "<i4"}
    names = [p[0] for p in props]
    if not {"x", "y", "z"} <= set(names):
        raise InvalidInputError("PLY lacks x/y/z vertex properties")
    if fmt.startswith("binary_little"):
        dt = np.dtype([(nm, type_map.get(tp, "<f4")) for nm, tp in props])
        arr = np.frombuffer(body, dtype=dt, count=n_vertex)
    elif fmt == "ascii":
        rows = body.decode().splitlines()[:n_vertex]
        table = np.array([[float(x) for x in r.split()] for r in rows])
        arr = {nm: table[:, i] for i, nm in enumerate(names)}
    else:
        raise InvalidInputError(f"unsupported PLY format '{fmt}'")
    pts = np.stack([np.asarray(arr["x"], np.float64), np.asarray(arr["y"], np.float64),
                    np.asarray(arr["z"], np.float64)], axis=1)
    colors = None
    if {"red", "green", "blue"} <= set(names):
        c = np.stack([np.asarray(arr["red"], np.float64), np.asarray(arr["green"], np.float64),
                      np.asarray(arr["blue"], np.float64)], axis=1)
        colors = c / 255.0 if c.max(initial=0) > 1.0 else c
    return pts, colors
