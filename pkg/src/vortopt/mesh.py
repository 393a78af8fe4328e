"""Channel geometry, triangulation, deformation and mesh quality.

Meshes are immutable value objects.  Boundary edges carry one of the tags
``IN``, ``WALL``, ``OUT`` or ``FREE`` (the obstacle boundary) and are stored
with the orientation induced by the positively oriented triangles, so the
fluid lies to the left of every boundary edge.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import triangle

IN, WALL, OUT, FREE = "IN", "WALL", "OUT", "FREE"
TAGS = (IN, WALL, OUT, FREE)

DEFAULT_ANGLE_THRESH = 5.0
DEFAULT_AREA_THRESH = 1e-10


class MeshError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelGeometry:
    corners: tuple = ((0.0, -0.5), (0.0, 0.5), (2.0, 0.5), (2.0, -0.5))
    obstacle_center: tuple = (0.325, 0.0)
    obstacle_radius: float = 0.13
    obstacle_segments: int | None = None

    def __post_init__(self):
        c = np.asarray(self.corners, dtype=float)
        if c.shape != (4, 2):
            raise MeshError("corners must be four planar points")
        xs, ys = np.unique(c[:, 0]), np.unique(c[:, 1])
        if len(xs) != 2 or len(ys) != 2:
            raise MeshError("corners must form an axis-aligned rectangle")
        if self.obstacle_radius <= 0:
            raise MeshError("obstacle radius must be positive")
        cx, cy = self.obstacle_center
        clearance = min(cx - xs[0], xs[1] - cx, cy - ys[0], ys[1] - cy) - self.obstacle_radius
        if clearance <= 0:
            raise MeshError(f"obstacle touches or crosses the channel walls (clearance {clearance:.3g})")

    @property
    def bounds(self):
        c = np.asarray(self.corners, dtype=float)
        return c[:, 0].min(), c[:, 0].max(), c[:, 1].min(), c[:, 1].max()


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_tags: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", np.ascontiguousarray(self.vertices, dtype=float))
        object.__setattr__(self, "triangles", np.ascontiguousarray(self.triangles, dtype=np.int64))
        object.__setattr__(self, "boundary_edges", np.ascontiguousarray(self.boundary_edges, dtype=np.int64))
        object.__setattr__(self, "boundary_tags", np.asarray(self.boundary_tags, dtype="<U4"))
        for arr in (self.vertices, self.triangles, self.boundary_edges, self.boundary_tags):
            arr.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    @cached_property
    def _edge_data(self):
        t = self.triangles
        local = np.stack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]], axis=1).reshape(-1, 2)
        key = np.sort(local, axis=1)
        edges, inverse = np.unique(key, axis=0, return_inverse=True)
        return edges, inverse.reshape(-1, 3)

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges, sorted vertex pairs."""
        return self._edge_data[0]

    @property
    def triangle_edges(self) -> np.ndarray:
        """Edge index of local edges (0,1), (1,2), (2,0) per triangle."""
        return self._edge_data[1]

    def tagged_edges(self, tag: str) -> np.ndarray:
        return self.boundary_edges[self.boundary_tags == tag]

    def tag_vertices(self, tag: str) -> np.ndarray:
        return np.unique(self.tagged_edges(tag))

    @cached_property
    def free_loop(self) -> np.ndarray:
        """Ordered vertex ids of the closed FREE polyline (fluid on the left)."""
        edges = self.tagged_edges(FREE)
        if len(edges) == 0:
            return np.zeros(0, dtype=np.int64)
        nxt = dict(zip(edges[:, 0].tolist(), edges[:, 1].tolist()))
        if len(nxt) != len(edges):
            raise MeshError("FREE boundary is not a simple closed polyline")
        start = int(edges[0, 0])
        loop = [start]
        cur = nxt[start]
        while cur != start:
            loop.append(cur)
            if cur not in nxt or len(loop) > len(edges):
                raise MeshError("FREE boundary is not a closed polyline")
            cur = nxt[cur]
        if len(loop) != len(edges):
            raise MeshError("FREE boundary has more than one component")
        return np.array(loop, dtype=np.int64)

    @property
    def free_polyline(self) -> np.ndarray:
        return self.vertices[self.free_loop]

    @property
    def volume(self) -> float:
        return float(self.signed_areas.sum())

    @property
    def perimeter(self) -> float:
        e = self.tagged_edges(FREE)
        return float(np.linalg.norm(self.vertices[e[:, 1]] - self.vertices[e[:, 0]], axis=1).sum())

    def with_vertices(self, vertices: np.ndarray) -> "Mesh":
        return Mesh(vertices, self.triangles, self.boundary_edges, self.boundary_tags)

    def check(self) -> None:
        """Raise MeshError unless the mesh is conforming, positively oriented and tagged."""
        if np.any(self.signed_areas <= 0):
            raise MeshError("non-positive triangle area")
        counts = np.bincount(self.triangle_edges.ravel(), minlength=len(self.edges))
        if np.any(counts > 2):
            raise MeshError("edge shared by more than two triangles")
        boundary = {tuple(e) for e in self.edges[counts == 1].tolist()}
        tagged = {tuple(sorted(e)) for e in self.boundary_edges.tolist()}
        if boundary != tagged:
            raise MeshError("boundary edges and tagged edges differ")
        if not set(self.boundary_tags.tolist()) <= set(TAGS):
            raise MeshError("unknown boundary tag")
        if len(self.tagged_edges(FREE)):
            self.free_loop  # noqa: B018 - raises on a broken loop


def _orient_boundary(vertices, triangles, edges, tags):
    """Orient boundary edges along the positively oriented triangle that owns them."""
    directed = {}
    for tri in triangles:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            directed[(min(a, b), max(a, b))] = (a, b)
    out = np.array([directed[(min(a, b), max(a, b))] for a, b in edges], dtype=np.int64)
    return out, tags


def _fix_orientation(vertices, triangles):
    p = vertices[triangles]
    d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    neg = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0] < 0
    triangles = triangles.copy()
    triangles[neg] = triangles[neg][:, [0, 2, 1]]
    return triangles


def _tri_area(h: float) -> float:
    return math.sqrt(3.0) / 4.0 * h * h


def _segment_points(p, q, h):
    n = max(1, int(math.ceil(np.linalg.norm(np.subtract(q, p)) / h - 1e-9)))
    s = np.arange(n)[:, None] / n
    return np.asarray(p) + s * (np.asarray(q) - np.asarray(p))


def _hole_point(poly: np.ndarray) -> np.ndarray:
    """A point strictly inside a closed simple polygon."""
    c = poly.mean(axis=0)
    if _point_in_polygon(c, poly):
        return c
    # step inward from the midpoint of the longest edge
    nxt = np.roll(poly, -1, axis=0)
    lengths = np.linalg.norm(nxt - poly, axis=1)
    for i in np.argsort(-lengths):
        mid = 0.5 * (poly[i] + nxt[i])
        d = nxt[i] - poly[i]
        nrm = np.array([-d[1], d[0]]) / lengths[i]
        for sgn in (1.0, -1.0):
            cand = mid + sgn * 0.25 * lengths[i] * nrm
            if _point_in_polygon(cand, poly):
                return cand
    raise MeshError("could not locate a point inside the obstacle")


def _point_in_polygon(pt, poly) -> bool:
    x, y = pt
    xs, ys = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(xs, -1), np.roll(ys, -1)
    cross = (ys > y) != (yn > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xint = xs + (y - ys) * (xn - xs) / (yn - ys)
    return bool(np.count_nonzero(cross & (x < xint)) % 2)


def _triangulate_pslg(points, segments, seg_tags, holes, max_area, area_field=None, passes=2):
    code = {t: i + 1 for i, t in enumerate(TAGS)}
    pslg = dict(vertices=points, segments=segments, segment_markers=np.array([code[t] for t in seg_tags]))
    if len(holes):
        pslg["holes"] = np.asarray(holes)
    out = triangle.triangulate(pslg, f"pq30Ya{max_area:.12g}")
    for _ in range(passes if area_field is not None else 0):
        verts, tris = out["vertices"], out["triangles"]
        centroids = verts[tris].mean(axis=1)
        target = area_field(centroids)
        out = triangle.triangulate(
            dict(out, triangle_max_area=target), "rpq30Ya"
        )
    verts = out["vertices"]
    tris = _fix_orientation(verts, out["triangles"])
    segs = out["segments"]
    names = np.array(TAGS)[out["segment_markers"].ravel() - 1]
    segs, names = _orient_boundary(verts, tris, segs, names)
    mesh = Mesh(verts, tris, segs, names)
    mesh.check()
    return mesh


def default_obstacle_segments(radius: float, h_min: float) -> int:
    return max(8, int(math.ceil(2.0 * math.pi * radius / h_min)))


def build_channel_mesh(geom: ChannelGeometry, h_min: float, h_max: float) -> Mesh:
    """Triangulate the channel with a circular hole.

    The obstacle circle is discretized with chords of length close to
    ``h_min``; the outer boundary and interior use ``h_max``.
    """
    if not 0 < h_min <= h_max:
        raise MeshError("need 0 < h_min <= h_max")
    x0, x1, y0, y1 = geom.bounds
    sides = [
        ((x0, y0), (x1, y0), WALL),
        ((x1, y0), (x1, y1), OUT),
        ((x1, y1), (x0, y1), WALL),
        ((x0, y1), (x0, y0), IN),
    ]
    pts, tags = [], []
    for p, q, tag in sides:
        seg = _segment_points(p, q, h_max)
        pts.append(seg)
        tags += [tag] * len(seg)
    outer = np.concatenate(pts)
    n_outer = len(outer)
    outer_segs = np.c_[np.arange(n_outer), (np.arange(n_outer) + 1) % n_outer]

    nseg = geom.obstacle_segments or default_obstacle_segments(geom.obstacle_radius, h_min)
    ang = 2.0 * np.pi * np.arange(nseg) / nseg
    circle = np.asarray(geom.obstacle_center) + geom.obstacle_radius * np.c_[np.cos(ang), np.sin(ang)]
    circle_segs = n_outer + np.c_[np.arange(nseg), (np.arange(nseg) + 1) % nseg]

    points = np.concatenate([outer, circle])
    segments = np.concatenate([outer_segs, circle_segs])
    seg_tags = tags + [FREE] * nseg
    return _triangulate_pslg(points, segments, seg_tags, [geom.obstacle_center], _tri_area(h_max))


def rectangle_mesh(x0, x1, y0, y1, nx, ny, tags=(WALL, OUT, WALL, IN)) -> Mesh:
    """Structured right-triangle mesh of a rectangle; tags for bottom, right, top, left."""
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    verts = np.c_[X.ravel(), Y.ravel()]
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, 1:].ravel(), idx[1:, :-1].ravel()
    tris = np.concatenate([np.c_[a, b, c], np.c_[a, c, d]])
    bottom = np.c_[idx[0, :-1], idx[0, 1:]]
    right = np.c_[idx[:-1, -1], idx[1:, -1]]
    top = np.c_[idx[-1, 1:], idx[-1, :-1]]
    left = np.c_[idx[1:, 0], idx[:-1, 0]]
    edges = np.concatenate([bottom, right, top, left])
    names = np.repeat(np.array(tags), [len(bottom), len(right), len(top), len(left)])
    mesh = Mesh(verts, tris, edges, names)
    mesh.check()
    return mesh


def apply_deformation(mesh: Mesh, theta, t: float, tol: float = 1e-12) -> Mesh:
    """Move every vertex by ``t * theta(x)``; connectivity and tags are kept.

    ``theta`` is a vector field on the mesh (anything exposing
    ``vertex_values()`` and ``boundary_values(tag)``).  It must vanish on the
    IN, WALL and OUT boundaries.  The result is not quality-checked.
    """
    for tag in (IN, WALL, OUT):
        vals = theta.boundary_values(tag)
        if vals.size and np.max(np.abs(vals)) > tol:
            raise MeshError(f"deformation field does not vanish on {tag}")
    if t == 0:
        return mesh
    return mesh.with_vertices(mesh.vertices + t * theta.vertex_values())


@dataclass(frozen=True)
class QualityReport:
    min_angle: float
    min_area: float
    worst_aspect_ratio: float
    degenerate: bool


def mesh_quality(mesh: Mesh, angle_thresh: float = DEFAULT_ANGLE_THRESH,
                 area_thresh: float = DEFAULT_AREA_THRESH) -> QualityReport:
    p = mesh.vertices[mesh.triangles]
    e = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 1], p[:, 0] - p[:, 2]], axis=1)
    lengths = np.linalg.norm(e, axis=2)
    angles = []
    for i in range(3):
        u, v = -e[:, i - 1], e[:, i]
        cosang = np.einsum("ij,ij->i", u, v) / np.maximum(lengths[:, i - 1] * lengths[:, i], 1e-300)
        angles.append(np.degrees(np.arccos(np.clip(cosang, -1.0, 1.0))))
    min_angle = float(np.min(angles))
    areas = mesh.signed_areas
    min_area = float(areas.min())
    with np.errstate(divide="ignore", invalid="ignore"):
        aspect = lengths.max(axis=1) * lengths.sum(axis=1) / (4.0 * math.sqrt(3.0) * np.abs(areas))
    worst = float(np.max(np.where(np.isfinite(aspect), aspect, np.inf)))
    degenerate = min_angle < angle_thresh or min_area < area_thresh
    return QualityReport(min_angle, min_area, worst, degenerate)


def polyline_is_simple(poly: np.ndarray) -> bool:
    """True if the closed polyline has no self-intersections."""
    a = poly
    b = np.roll(poly, -1, axis=0)
    n = len(a)
    if n < 3:
        return False

    def orient(p, q, r):
        return (q[..., 0] - p[..., 0]) * (r[..., 1] - p[..., 1]) - (q[..., 1] - p[..., 1]) * (r[..., 0] - p[..., 0])

    i, j = np.triu_indices(n, k=2)
    keep = ~((i == 0) & (j == n - 1))
    i, j = i[keep], j[keep]
    d1 = orient(a[i], b[i], a[j])
    d2 = orient(a[i], b[i], b[j])
    d3 = orient(a[j], b[j], a[i])
    d4 = orient(a[j], b[j], b[i])
    hit = (d1 * d2 < 0) & (d3 * d4 < 0)
    return not bool(hit.any())


def size_field_from_speed(points: np.ndarray, speed: np.ndarray, h_min: float, h_max: float):
    """Target size h_max / (1 + |u|/max|u|) clamped to [h_min, h_max]."""
    from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator

    smax = float(np.max(speed)) if speed.size else 0.0
    if not np.isfinite(smax) or smax <= 0:
        size = np.full(len(points), h_max)
    else:
        size = np.clip(h_max / (1.0 + speed / smax), h_min, h_max)
    lin = LinearNDInterpolator(points, size)
    near = NearestNDInterpolator(points, size)

    def field(x):
        v = lin(x)
        bad = ~np.isfinite(v)
        if bad.any():
            v[bad] = near(x[bad])
        return np.clip(v, h_min, h_max)

    return field


def adapt_mesh(mesh: Mesh, u, h_min: float, h_max: float) -> Mesh:
    """Remesh the domain with element sizes graded by the flow speed.

    All boundary vertices (in particular the FREE polyline) are kept; the
    interior is regenerated.  No field is transferred.
    """
    if not 0 < h_min <= h_max:
        raise MeshError("need 0 < h_min <= h_max")
    speed = np.linalg.norm(u.vertex_values(), axis=1)
    field = size_field_from_speed(mesh.vertices, speed, h_min, h_max)

    bverts = np.unique(mesh.boundary_edges)
    remap = -np.ones(mesh.n_vertices, dtype=np.int64)
    remap[bverts] = np.arange(len(bverts))
    points = mesh.vertices[bverts]
    segments = remap[mesh.boundary_edges]
    holes = [_hole_point(mesh.free_polyline)] if len(mesh.free_loop) else []

    def area_field(x):
        return _tri_area(1.0) * field(x) ** 2

    return _triangulate_pslg(points, segments, mesh.boundary_tags.tolist(), holes,
                             _tri_area(h_max), area_field=area_field)


def _refine_closed(poly: np.ndarray, factor: int) -> np.ndarray:
    nxt = np.roll(poly, -1, axis=0)
    s = np.arange(factor)[None, :, None] / factor
    return (poly[:, None, :] + s * (nxt - poly)[:, None, :]).reshape(-1, 2)


def _point_segment_dist(pts: np.ndarray, poly: np.ndarray) -> np.ndarray:
    a = poly
    d = np.roll(poly, -1, axis=0) - a
    dd = np.maximum(np.einsum("ij,ij->i", d, d), 1e-300)
    out = np.full(len(pts), np.inf)
    for start in range(0, len(pts), 512):
        p = pts[start:start + 512, None, :]
        s = np.clip(np.einsum("pkj,kj->pk", p - a[None], d) / dd, 0.0, 1.0)
        proj = a[None] + s[..., None] * d[None]
        out[start:start + 512] = np.sqrt(((p - proj) ** 2).sum(axis=2)).min(axis=1)
    return out


def hausdorff_distance(a, b, refine: int = 4) -> float:
    """Symmetric Hausdorff distance between closed polylines.

    Each polyline is sampled at its vertices plus ``refine - 1`` equally
    spaced points per edge; samples are measured against the other polyline's
    segments.
    """
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("empty polyline")
    da = _point_segment_dist(_refine_closed(a, refine), b).max()
    db = _point_segment_dist(_refine_closed(b, refine), a).max()
    return float(max(da, db))


# ---------------------------------------------------------------- text I/O

def write_mesh(mesh: Mesh, path) -> None:
    lines = [f"vertices {mesh.n_vertices} / triangles {mesh.n_triangles} / boundary {len(mesh.boundary_edges)}"]
    lines += [f"{x:.17g} {y:.17g}" for x, y in mesh.vertices]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.triangles]
    lines += [f"{i} {j} {t}" for (i, j), t in zip(mesh.boundary_edges, mesh.boundary_tags)]
    Path(path).write_text("\n".join(lines) + "\n")


_HEADER = re.compile(r"vertices\s+(\d+)\s*/?\s*triangles\s+(\d+)\s*/?\s*boundary\s+(\d+)")


def read_mesh(path) -> Mesh:
    text = Path(path).read_text().split("\n")
    m = _HEADER.match(text[0].strip())
    if not m:
        raise MeshError(f"{path}: bad header line {text[0]!r}")
    nv, nt, nb = map(int, m.groups())
    body = [ln.split() for ln in text[1:] if ln.strip()]
    if len(body) != nv + nt + nb:
        raise MeshError(f"{path}: expected {nv + nt + nb} records, found {len(body)}")
    verts = np.array(body[:nv], dtype=float)
    tris = np.array(body[nv:nv + nt], dtype=np.int64)
    bnd = body[nv + nt:]
    edges = np.array([r[:2] for r in bnd], dtype=np.int64)
    tags = [r[2] for r in bnd]
    mesh = Mesh(verts, tris, edges, tags)
    mesh.check()
    return mesh


def read_gmsh(path, physical_tags: dict) -> Mesh:
    """Read a Gmsh v2 ASCII mesh; ``physical_tags`` maps physical ids to boundary tags."""
    lines = iter(Path(path).read_text().split("\n"))
    nodes, tris, edges, names = {}, [], [], []
    for ln in lines:
        ln = ln.strip()
        if ln == "$MeshFormat":
            version = next(lines).split()[0]
            if not version.startswith("2"):
                raise MeshError(f"unsupported Gmsh version {version}")
        elif ln == "$Nodes":
            for _ in range(int(next(lines))):
                parts = next(lines).split()
                nodes[int(parts[0])] = (float(parts[1]), float(parts[2]))
        elif ln == "$Elements":
            for _ in range(int(next(lines))):
                parts = list(map(int, next(lines).split()))
                etype, ntags = parts[1], parts[2]
                phys = parts[3] if ntags else 0
                conn = parts[3 + ntags:]
                if etype == 2:
                    tris.append(conn)
                elif etype == 1:
                    if phys not in physical_tags:
                        raise MeshError(f"physical group {phys} has no boundary tag")
                    edges.append(conn)
                    names.append(physical_tags[phys])
    ids = sorted(nodes)
    index = {k: i for i, k in enumerate(ids)}
    verts = np.array([nodes[k] for k in ids])
    tris = np.array([[index[k] for k in t] for t in tris], dtype=np.int64)
    tris = _fix_orientation(verts, tris)
    edges = np.array([[index[k] for k in e] for e in edges], dtype=np.int64)
    edges, names = _orient_boundary(verts, tris, edges, np.array(names))
    mesh = Mesh(verts, tris, edges, names)
    mesh.check()
    return mesh
