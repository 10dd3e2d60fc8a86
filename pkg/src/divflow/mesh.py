"""Conforming triangular meshes: construction, refinement and point location.

Triangles are stored counter-clockwise with the refinement edge opposite
local vertex 0 (the "newest vertex"). Local edge ``i`` is the edge opposite
local vertex ``i``, i.e. ``(t[i+1], t[i+2])`` taken cyclically.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

BOTTOM, RIGHT, TOP, LEFT, REENTRANT = 1, 2, 3, 4, 5
TAG_NAMES = {BOTTOM: "bottom", RIGHT: "right", TOP: "top", LEFT: "left",
             REENTRANT: "reentrant"}

_LOCAL_EDGES = np.array([[1, 2], [2, 0], [0, 1]])


class PointLocationError(ValueError):
    pass


class Mesh:
    """Immutable conforming triangulation.

    Parameters
    ----------
    vertices : (nv, 2) array
    triangles : (nt, 3) int array. Refinement edge is taken opposite vertex 0.
    boundary_tags : dict mapping sorted vertex pairs of boundary edges to an
        integer tag. Boundary edges missing from the dict get tag 1.
    parent : optional (nt,) array of parent triangle indices in the mesh this
        one was refined from.
    """

    def __init__(self, vertices, triangles, boundary_tags=None, parent=None):
        vertices = np.ascontiguousarray(vertices, dtype=float)
        triangles = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        if triangles.size == 0:
            raise ValueError("mesh needs at least one triangle")
        p = vertices[triangles]
        area2 = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                 - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
        flip = area2 < 0
        # swapping vertices 1 and 2 keeps the refinement edge in place
        triangles[flip] = triangles[flip][:, [0, 2, 1]]
        if np.any(np.abs(area2) <= 1e-300):
            raise ValueError("degenerate triangle in mesh")

        self.vertices = vertices
        self.triangles = triangles
        self.parent = None if parent is None else np.asarray(parent, dtype=np.int64)
        self._build_topology(boundary_tags or {})
        for arr in (self.vertices, self.triangles, self.edges, self.tri_edges,
                    self.edge_tris, self.edge_tags):
            arr.setflags(write=False)
        self._tree = None
        self._vertex_tris = None

    def _build_topology(self, boundary_tags):
        t = self.triangles
        nt = len(t)
        loc = t[:, _LOCAL_EDGES]                      # (nt, 3, 2)
        pairs = np.sort(loc.reshape(-1, 2), axis=1)
        edges, inv, counts = np.unique(pairs, axis=0, return_inverse=True,
                                       return_counts=True)
        inv = inv.reshape(-1)
        if counts.max() > 2:
            raise ValueError("non-manifold mesh: edge shared by >2 triangles")
        self.edges = edges
        self.tri_edges = inv.reshape(nt, 3)
        owner = np.repeat(np.arange(nt), 3)
        edge_tris = -np.ones((len(edges), 2), dtype=np.int64)
        # first occurrence in sorted owner order gives the lower triangle index
        order = np.argsort(inv, kind="stable")
        e_sorted = inv[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = e_sorted[1:] != e_sorted[:-1]
        edge_tris[e_sorted[first], 0] = owner[order[first]]
        edge_tris[e_sorted[~first], 1] = owner[order[~first]]
        self.edge_tris = edge_tris
        tags = np.zeros(len(edges), dtype=np.int64)
        bnd = np.flatnonzero(edge_tris[:, 1] < 0)
        for e in bnd:
            a, b = edges[e]
            tags[e] = boundary_tags.get((int(a), int(b)), 1)
        self.edge_tags = tags

    # -- sizes -------------------------------------------------------------
    @property
    def nv(self):
        return len(self.vertices)

    @property
    def nt(self):
        return len(self.triangles)

    @property
    def ne(self):
        return len(self.edges)

    @property
    def boundary_edges(self):
        return np.flatnonzero(self.edge_tris[:, 1] < 0)

    @property
    def interior_edges(self):
        return np.flatnonzero(self.edge_tris[:, 1] >= 0)

    def boundary_tag_dict(self):
        b = self.boundary_edges
        return {(int(self.edges[e, 0]), int(self.edges[e, 1])): int(self.edge_tags[e])
                for e in b}

    # -- geometry ----------------------------------------------------------
    @property
    def jacobians(self):
        """Affine map Jacobians ``J = [v1 - v0, v2 - v0]`` (columns), shape (nt, 2, 2)."""
        if not hasattr(self, "_jac"):
            p = self.vertices[self.triangles]
            self._jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        return self._jac

    @property
    def dets(self):
        J = self.jacobians
        return J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]

    @property
    def inv_jacobians(self):
        if not hasattr(self, "_ijac"):
            J = self.jacobians
            d = self.dets
            inv = np.empty_like(J)
            inv[:, 0, 0] = J[:, 1, 1]
            inv[:, 1, 1] = J[:, 0, 0]
            inv[:, 0, 1] = -J[:, 0, 1]
            inv[:, 1, 0] = -J[:, 1, 0]
            self._ijac = inv / d[:, None, None]
        return self._ijac

    @property
    def areas(self):
        return 0.5 * self.dets

    @property
    def edge_lengths(self):
        v = self.vertices[self.edges]
        return np.hypot(*(v[:, 1] - v[:, 0]).T)

    @property
    def diameters(self):
        """h_K: longest edge of each triangle."""
        return self.edge_lengths[self.tri_edges].max(axis=1)

    @property
    def centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    @property
    def edge_normals(self):
        """Unit normals, pointing out of ``edge_tris[:, 0]`` (lower triangle index)."""
        if not hasattr(self, "_normals"):
            v = self.vertices[self.edges]
            tang = v[:, 1] - v[:, 0]
            n = np.stack([tang[:, 1], -tang[:, 0]], axis=1)
            n /= np.linalg.norm(n, axis=1)[:, None]
            mid = v.mean(axis=1)
            out = np.einsum("ij,ij->i", mid - self.centroids[self.edge_tris[:, 0]], n)
            n[out < 0] *= -1
            self._normals = n
        return self._normals

    def min_angle(self):
        p = self.vertices[self.triangles]
        angles = []
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            cos = np.einsum("ij,ij->i", a, b) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            angles.append(np.arccos(np.clip(cos, -1, 1)))
        return float(np.min(angles))

    # -- point location ----------------------------------------------------
    def _vertex_triangles(self):
        if self._vertex_tris is None:
            order = np.argsort(self.triangles.reshape(-1), kind="stable")
            verts = self.triangles.reshape(-1)[order]
            starts = np.searchsorted(verts, np.arange(self.nv + 1))
            self._vertex_tris = (order // 3, starts)
        return self._vertex_tris

    def barycentric(self, tri, x):
        """Barycentric coordinates of points ``x`` (n, 2) in triangles ``tri`` (n,)."""
        v0 = self.vertices[self.triangles[tri, 0]]
        xi = np.einsum("nij,nj->ni", self.inv_jacobians[tri], x - v0)
        return np.column_stack([1.0 - xi.sum(axis=1), xi])

    def locate(self, x, tol=1e-12):
        """Locate points; returns (triangle indices, barycentric coordinates).

        Among triangles whose closure contains a point the lowest index wins.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = len(x)
        if self._tree is None:
            self._tree = cKDTree(self.centroids)
        k = min(12, self.nt)
        _, cand = self._tree.query(x, k=k)
        cand = np.asarray(cand).reshape(n, k)
        found = -np.ones(n, dtype=np.int64)
        for j in range(k):
            todo = np.flatnonzero(found < 0)
            if todo.size == 0:
                break
            t = cand[todo, j]
            lam = self.barycentric(t, x[todo])
            ok = lam.min(axis=1) >= -tol
            found[todo[ok]] = t[ok]
        todo = np.flatnonzero(found < 0)
        for i in todo:
            lam = self.barycentric(np.arange(self.nt), np.repeat(x[i:i + 1], self.nt, axis=0))
            inside = np.flatnonzero(lam.min(axis=1) >= -tol)
            if inside.size == 0:
                raise PointLocationError(f"point {x[i]} lies outside the mesh")
            found[i] = inside[0]
        # tie-breaking for points on edges / vertices of the found triangle
        lam = self.barycentric(found, x)
        on_bnd = np.flatnonzero(lam.min(axis=1) <= tol)
        if on_bnd.size:
            vt, starts = self._vertex_triangles()
            for i in on_bnd:
                t0 = found[i]
                cands = set()
                for v in self.triangles[t0]:
                    cands.update(vt[starts[v]:starts[v + 1]].tolist())
                cands = np.array(sorted(cands))
                lc = self.barycentric(cands, np.repeat(x[i:i + 1], len(cands), axis=0))
                ok = cands[lc.min(axis=1) >= -tol]
                found[i] = ok[0]
            lam = self.barycentric(found, x)
        return found, lam

    def __repr__(self):
        return f"Mesh(nv={self.nv}, nt={self.nt}, ne={self.ne})"


# -- construction -----------------------------------------------------------
def _longest_edge_first(vertices, triangles):
    """Rotate each triangle so that its longest edge is opposite vertex 0."""
    p = vertices[triangles]
    lens = np.stack([np.linalg.norm(p[:, (i + 2) % 3] - p[:, (i + 1) % 3], axis=1)
                     for i in range(3)], axis=1)
    # tolerate round-off so structured meshes pick a deterministic edge
    longest = np.argmax(lens >= lens.max(axis=1, keepdims=True) * (1 - 1e-12), axis=1)
    idx = (longest[:, None] + np.arange(3)[None, :]) % 3
    return np.take_along_axis(triangles, idx, axis=1)


def _grid_block(x0, y0, x1, y1, nx, ny, pattern):
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    verts = [np.column_stack([X.ravel(), Y.ravel()])]
    vid = lambda i, j: j * (nx + 1) + i
    tris = []
    nbase = (nx + 1) * (ny + 1)
    centres = []
    for j in range(ny):
        for i in range(nx):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)
            if pattern == "diagonal":
                tris.append((a, b, c))
                tris.append((a, c, d))
            else:
                m = nbase + len(centres)
                centres.append(((xs[i] + xs[i + 1]) / 2, (ys[j] + ys[j + 1]) / 2))
                tris.extend([(a, b, m), (b, c, m), (c, d, m), (d, a, m)])
    if centres:
        verts.append(np.array(centres))
    return np.vstack(verts), np.array(tris)


def _merge_vertices(vertices, triangles, tol=1e-12):
    key = np.round(vertices / tol).astype(np.int64)
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inv = inv.reshape(-1)
    order = np.argsort(first)
    remap = np.empty_like(order)
    remap[order] = np.arange(len(order))
    return vertices[first[order]], remap[inv][triangles]


def _tag_boundary(vertices, triangles, tagger):
    tmp = Mesh(vertices, triangles)
    tags = {}
    for e in tmp.boundary_edges:
        a, b = tmp.edges[e]
        mid = 0.5 * (vertices[a] + vertices[b])
        tags[(int(a), int(b))] = int(tagger(mid))
    return tags


def build_rectangle_mesh(x_extent, y_extent, nx, ny, pattern="diagonal"):
    """Structured triangulation of ``(0, x_extent) x (0, y_extent)``.

    ``pattern="diagonal"`` splits every cell once along its diagonal,
    ``pattern="crossed"`` splits it into four triangles around the cell centre.
    """
    if not (x_extent > 0 and y_extent > 0):
        raise ValueError("extents must be positive")
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise ValueError("nx and ny must be positive integers")
    if pattern not in ("diagonal", "crossed"):
        raise ValueError(f"unknown pattern {pattern!r}")
    verts, tris = _grid_block(0.0, 0.0, float(x_extent), float(y_extent), int(nx), int(ny), pattern)
    tris = _longest_edge_first(verts, tris)
    eps = 1e-9 * max(x_extent, y_extent)

    def tagger(m):
        if abs(m[1]) < eps:
            return BOTTOM
        if abs(m[0] - x_extent) < eps:
            return RIGHT
        if abs(m[1] - y_extent) < eps:
            return TOP
        return LEFT

    return Mesh(verts, tris, _tag_boundary(verts, tris, tagger))


def build_lshape_mesh(n, pattern="diagonal"):
    """Triangulation of ``(-1, 1)^2 minus [0, 1)^2`` from three unit squares.

    Each square is divided into ``n x n`` cells; the reentrant corner at the
    origin is always a vertex.
    """
    if int(n) != n or n < 1:
        raise ValueError("n must be a positive integer")
    n = int(n)
    blocks = [(-1.0, -1.0, 0.0, 0.0), (0.0, -1.0, 1.0, 0.0), (-1.0, 0.0, 0.0, 1.0)]
    verts, tris, off = [], [], 0
    for x0, y0, x1, y1 in blocks:
        v, t = _grid_block(x0, y0, x1, y1, n, n, pattern)
        verts.append(v)
        tris.append(t + off)
        off += len(v)
    verts, tris = _merge_vertices(np.vstack(verts), np.vstack(tris))
    tris = _longest_edge_first(verts, tris)
    eps = 1e-9

    def tagger(m):
        x, y = m
        if abs(y + 1) < eps:
            return BOTTOM
        if abs(x - 1) < eps:
            return RIGHT
        if abs(y - 1) < eps:
            return TOP
        if abs(x + 1) < eps:
            return LEFT
        return REENTRANT

    return Mesh(verts, tris, _tag_boundary(verts, tris, tagger))


# -- refinement -------------------------------------------------------------
def _inherit_tags(mesh, mids):
    """Boundary tags for a refined mesh; ``mids[e]`` is the midpoint vertex of edge e or -1."""
    tags = {}
    for e in mesh.boundary_edges:
        a, b = (int(v) for v in mesh.edges[e])
        tag = int(mesh.edge_tags[e])
        m = int(mids[e])
        if m < 0:
            tags[(a, b)] = tag
        else:
            tags[tuple(sorted((a, m)))] = tag
            tags[tuple(sorted((m, b)))] = tag
    return tags


def refine_uniform(mesh):
    """Red refinement: every triangle is split into four similar children."""
    nv, ne = mesh.nv, mesh.ne
    mid_xy = mesh.vertices[mesh.edges].mean(axis=1)
    verts = np.vstack([mesh.vertices, mid_xy])
    mids = nv + np.arange(ne)
    t = mesh.triangles
    m = mids[mesh.tri_edges]          # m[:, i] is the midpoint of the edge opposite vertex i
    a, b, c = t[:, 0], t[:, 1], t[:, 2]
    ma, mb, mc = m[:, 0], m[:, 1], m[:, 2]
    children = np.stack([
        np.column_stack([a, mc, mb]),
        np.column_stack([mc, b, ma]),
        np.column_stack([mb, ma, c]),
        np.column_stack([ma, mb, mc]),
    ], axis=1).reshape(-1, 3)
    parent = np.repeat(np.arange(mesh.nt), 4)
    children = _longest_edge_first(verts, children)
    return Mesh(verts, children, _inherit_tags(mesh, mids), parent=parent)


def _closure(mesh, marked):
    edge_marked = np.zeros(mesh.ne, dtype=bool)
    edge_marked[mesh.tri_edges[marked, 0]] = True
    te = mesh.tri_edges
    while True:
        touched = edge_marked[te].any(axis=1)
        need = touched & ~edge_marked[te[:, 0]]
        if not need.any():
            return edge_marked
        edge_marked[te[need, 0]] = True


def refine_marked_sweeps(mesh, marks, sweeps=2):
    """Bisect the marked triangles and then their descendants, ``sweeps`` times.

    Two sweeps split every marked triangle into four, so a fully marked mesh
    halves h as uniform refinement does. ``parent`` refers to the input mesh.
    """
    out = mesh
    cur = np.asarray(list(marks) if isinstance(marks, (set, frozenset)) else marks)
    if cur.dtype == bool:
        cur = np.flatnonzero(cur)
    roots = np.unique(cur.astype(np.int64))
    anc = np.arange(mesh.nt)
    for _ in range(sweeps):
        nxt = refine_marked(out, np.flatnonzero(np.isin(anc, roots)))
        if nxt is out:
            break
        anc = anc[nxt.parent]
        out = nxt
    if out is not mesh:
        out.parent = anc
    return out


def refine_marked(mesh, marks):
    """Newest-vertex bisection of the marked triangles plus conforming closure.

    Every marked triangle is bisected at least once. Children record their
    ancestor in the input mesh through ``Mesh.parent``.
    ``marks`` is a collection of triangle indices or a boolean mask of length nt.
    """
    arr = np.asarray(list(marks) if isinstance(marks, (set, frozenset)) else marks)
    if arr.dtype == bool:
        if arr.shape != (mesh.nt,):
            raise IndexError(f"boolean marks must have length {mesh.nt}")
        arr = np.flatnonzero(arr)
    marked = np.unique(arr.astype(np.int64).reshape(-1))
    if marked.size == 0:
        return mesh
    if marked.min() < 0 or marked.max() >= mesh.nt:
        raise IndexError("mark index out of range")
    edge_marked = _closure(mesh, marked)
    ids = np.flatnonzero(edge_marked)
    mids = -np.ones(mesh.ne, dtype=np.int64)
    mids[ids] = mesh.nv + np.arange(len(ids))
    verts = np.vstack([mesh.vertices, mesh.vertices[mesh.edges[ids]].mean(axis=1)])

    t, te = mesh.triangles, mesh.tri_edges
    bis = edge_marked[te[:, 0]]
    out = [t[~bis]]
    par = [np.flatnonzero(~bis)]
    pidx = np.flatnonzero(bis)
    p0, p1, p2 = t[bis].T
    m = mids[te[bis, 0]]
    # children [m, p0, p1] and [m, p2, p0]; their refinement edges are the
    # parent's local edges 2 and 1
    for child, e in ((np.column_stack([m, p0, p1]), te[bis, 2]),
                     (np.column_stack([m, p2, p0]), te[bis, 1])):
        split = edge_marked[e]
        out.append(child[~split])
        par.append(pidx[~split])
        q0, q1, q2 = child[split].T
        mm = mids[e[split]]
        out.append(np.column_stack([mm, q0, q1]))
        out.append(np.column_stack([mm, q2, q0]))
        par.extend([pidx[split], pidx[split]])
    tris = np.vstack(out)
    parent = np.concatenate(par)
    order = np.argsort(parent, kind="stable")
    return Mesh(verts, tris[order], _inherit_tags(mesh, mids), parent=parent[order])


def locate_point(mesh, x, tol=1e-12):
    """Containing triangle and barycentric coordinates of one point (lowest index on ties)."""
    tri, lam = mesh.locate(np.asarray(x, dtype=float).reshape(1, 2), tol)
    return int(tri[0]), lam[0]


def is_conforming(mesh):
    """Exhaustive check that no vertex lies in the interior of an edge."""
    v = mesh.vertices
    if np.any(mesh.edge_tris[:, 0] < 0):
        return False
    for e in range(mesh.ne):
        a, b = v[mesh.edges[e]]
        d = b - a
        L2 = d @ d
        w = v - a
        s = w @ d / L2
        dist = np.abs(w[:, 0] * d[1] - w[:, 1] * d[0]) / np.sqrt(L2)
        hit = (s > 1e-9) & (s < 1 - 1e-9) & (dist < 1e-9 * np.sqrt(L2))
        if hit.any():
            return False
    return True


# -- plain-text dump ----------------------------------------------------------
def dump_mesh(mesh, path):
    """Write ``ndim=2 nv=.. nt=..``, vertex lines ``x y`` and triangle lines ``i j k tag``.

    The triangle tag is the local index of its refinement edge, always 0 in
    the stored orientation.
    """
    with open(path, "w") as fh:
        fh.write(f"ndim=2 nv={mesh.nv} nt={mesh.nt}\n")
        for x, y in mesh.vertices:
            fh.write(f"{float(x)!r} {float(y)!r}\n")
        for i, j, k in mesh.triangles:
            fh.write(f"{i} {j} {k} 0\n")


def load_mesh(path, tagger=None):
    """Read a mesh written by :func:`dump_mesh`.

    Boundary tags are not part of the format; ``tagger(midpoint)`` restores them.
    """
    with open(path) as fh:
        header = fh.readline().split()
        meta = dict(item.split("=") for item in header)
        if meta.get("ndim") != "2":
            raise ValueError("only ndim=2 supported")
        nv, nt = int(meta["nv"]), int(meta["nt"])
        verts = np.array([[float(x) for x in fh.readline().split()] for _ in range(nv)])
        rows = np.array([[int(x) for x in fh.readline().split()] for _ in range(nt)])
    tris = rows[:, :3]
    shift = rows[:, 3] % 3
    idx = (shift[:, None] + np.arange(3)[None, :]) % 3
    tris = np.take_along_axis(tris, idx, axis=1)
    tags = _tag_boundary(verts, tris, tagger) if tagger is not None else None
    return Mesh(verts, tris, tags)
