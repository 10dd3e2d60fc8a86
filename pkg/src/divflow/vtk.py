"""ASCII legacy VTK output."""
from __future__ import annotations

import os

import numpy as np

from .assembly import get_tables


def vertex_average(u):
    """Vertex values of a BDM field averaged over the triangles sharing each vertex."""
    mesh = u.space.mesh
    nt = mesh.nt
    ref = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    acc = np.zeros((mesh.nv, 2))
    cnt = np.zeros(mesh.nv)
    for i in range(3):
        val = u.eval_cells(ref[i:i + 1], derivs=0)[:, 0, :]
        np.add.at(acc, mesh.triangles[:, i], val)
        np.add.at(cnt, mesh.triangles[:, i], 1.0)
    return acc / np.maximum(cnt, 1)[:, None]


def cell_means(q):
    """Per-triangle L2 means of a (discontinuous) scalar field."""
    sp_ = q.space
    k = sp_.degree + 1 if sp_.kind == "DG" else sp_.degree
    T = get_tables(sp_.mesh, k)
    val = T.field(sp_, q.coeffs, derivs=0)[0]
    return np.sum(T.dx * val, axis=1) / np.sum(T.dx, axis=1)


def write_vtk(mesh, fields, path, title="divflow"):
    """Write mesh and fields.

    ``fields`` maps names to DiscreteFields or arrays: BDM fields become vertex
    vectors, DG fields and arrays of length nt become cell data, Lagrange fields
    are written by their vertex values.
    """
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    point, cell = [], []
    for name, f in fields.items():
        if isinstance(f, np.ndarray):
            if len(f) == mesh.nt:
                cell.append(("scalar", name, f))
            elif len(f) == mesh.nv:
                point.append(("scalar", name, f))
            else:
                raise ValueError(f"array {name!r} has length {len(f)}")
            continue
        kind = f.space.kind
        if kind == "BDM":
            point.append(("vector", name, vertex_average(f)))
        elif kind == "DG":
            cell.append(("scalar", name, cell_means(f)))
        else:
            point.append(("scalar", name, f.coeffs[:mesh.nv]))
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {mesh.nv} double\n")
        for x, y in mesh.vertices:
            fh.write(f"{float(x)!r} {float(y)!r} 0.0\n")
        fh.write(f"CELLS {mesh.nt} {4 * mesh.nt}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")
        fh.write(f"CELL_TYPES {mesh.nt}\n")
        fh.write("5\n" * mesh.nt)
        for section, items, n in (("CELL_DATA", cell, mesh.nt), ("POINT_DATA", point, mesh.nv)):
            if not items:
                continue
            fh.write(f"{section} {n}\n")
            for kind, name, arr in items:
                if kind == "scalar":
                    fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    fh.write("".join(f"{float(v)!r}\n" for v in arr))
                else:
                    fh.write(f"VECTORS {name} double\n")
                    fh.write("".join(f"{float(a)!r} {float(b)!r} 0.0\n" for a, b in arr))
    return path


def read_vtk(path):
    """Minimal reader for files produced by write_vtk (points, cells, data arrays)."""
    with open(path) as fh:
        tok = fh.read().split("\n")
    out = {"cell_data": {}, "point_data": {}}
    i = 0
    section = None
    while i < len(tok):
        line = tok[i].strip()
        parts = line.split()
        if not parts:
            i += 1
            continue
        if parts[0] == "POINTS":
            n = int(parts[1])
            out["points"] = np.array([[float(v) for v in tok[i + 1 + j].split()] for j in range(n)])
            i += n + 1
        elif parts[0] == "CELLS":
            n = int(parts[1])
            out["cells"] = np.array([[int(v) for v in tok[i + 1 + j].split()[1:]] for j in range(n)])
            i += n + 1
        elif parts[0] == "CELL_TYPES":
            n = int(parts[1])
            out["cell_types"] = np.array([int(tok[i + 1 + j]) for j in range(n)])
            i += n + 1
        elif parts[0] in ("CELL_DATA", "POINT_DATA"):
            section = ("cell_data" if parts[0] == "CELL_DATA" else "point_data", int(parts[1]))
            i += 1
        elif parts[0] == "SCALARS":
            n = section[1]
            out[section[0]][parts[1]] = np.array([float(tok[i + 2 + j]) for j in range(n)])
            i += n + 2
        elif parts[0] == "VECTORS":
            n = section[1]
            out[section[0]][parts[1]] = np.array([[float(v) for v in tok[i + 1 + j].split()] for j in range(n)])
            i += n + 1
        else:
            i += 1
    return out
