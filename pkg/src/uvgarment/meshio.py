"""OBJ mesh and PLY/XYZ point-cloud reading and writing."""

from __future__ import annotations

import numpy as np


def read_obj(path):
    """Read an OBJ file. Returns (vertices (V,3), triangles (F,3), uvs or None).

    Faces with more than 3 vertices are fan-triangulated. Per-vertex UVs are
    returned when every face carries vt indices matching its v indices.
    """
    vertices, uvs, faces = [], [], []
    uv_of_vertex = {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "vt":
                uvs.append([float(x) for x in parts[1:3]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    comps = tok.split("/")
                    vi = int(comps[0]) - 1
                    idx.append(vi)
                    if len(comps) > 1 and comps[1]:
                        uv_of_vertex[vi] = int(comps[1]) - 1
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    v = np.asarray(vertices, dtype=float)
    t = np.asarray(faces, dtype=int)
    vt = None
    if uvs and len(uv_of_vertex) == len(v):
        uvarr = np.asarray(uvs, dtype=float)
        vt = np.zeros((len(v), 2))
        for vi, ti in uv_of_vertex.items():
            vt[vi] = uvarr[ti]
    return v, t, vt


def write_obj(path, vertices, triangles, uvs=None):
    """Write an OBJ mesh, with a vt channel when per-vertex UVs are given."""
    with open(path, "w") as f:
        for v in np.asarray(vertices, dtype=float):
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        if uvs is not None:
            for t in np.asarray(uvs, dtype=float):
                f.write(f"vt {t[0]:.9g} {t[1]:.9g}\n")
        for tri in np.asarray(triangles, dtype=int):
            a, b, c = tri + 1
            if uvs is not None:
                f.write(f"f {a}/{a} {b}/{b} {c}/{c}\n")
            else:
                f.write(f"f {a} {b} {c}\n")


_PLY_TYPES = {
    "float": ("<f4", 4), "float32": ("<f4", 4),
    "double": ("<f8", 8), "float64": ("<f8", 8),
    "uchar": ("<u1", 1), "uint8": ("<u1", 1), "char": ("<i1", 1), "int8": ("<i1", 1),
    "short": ("<i2", 2), "ushort": ("<u2", 2), "int16": ("<i2", 2), "uint16": ("<u2", 2),
    "int": ("<i4", 4), "int32": ("<i4", 4), "uint": ("<u4", 4), "uint32": ("<u4", 4),
}


def read_ply_points(path):
    """Read x/y/z vertex properties from an ASCII or binary-little-endian PLY."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        n_vertex = 0
        props = []  # (name, dtype) for the vertex element
        in_vertex = False
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: truncated PLY header")
            tokens = line.decode("ascii").split()
            if not tokens:
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                in_vertex = tokens[1] == "vertex"
                if in_vertex:
                    n_vertex = int(tokens[2])
            elif tokens[0] == "property" and in_vertex:
                if tokens[1] == "list":
                    raise ValueError("list property in vertex element unsupported")
                props.append((tokens[-1], tokens[1]))
            elif tokens[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise ValueError(f"{path}: unsupported PLY format {fmt}")
        names = [p[0] for p in props]
        for axis in ("x", "y", "z"):
            if axis not in names:
                raise ValueError(f"{path}: vertex element lacks property {axis}")
        if fmt == "ascii":
            rows = np.loadtxt(f, max_rows=n_vertex, ndmin=2)
            data = {name: rows[:, k] for k, (name, _) in enumerate(props)}
        else:
            dt = np.dtype([(name, _PLY_TYPES[t][0]) for name, t in props])
            raw = np.frombuffer(f.read(dt.itemsize * n_vertex), dtype=dt, count=n_vertex)
            data = {name: raw[name].astype(float) for name, _ in props}
        return np.stack([data["x"], data["y"], data["z"]], axis=-1).astype(float)


def write_ply_points(path, points):
    """Write a point cloud as binary-little-endian PLY with float32 x/y/z."""
    points = np.ascontiguousarray(points, dtype="<f4").reshape(-1, 3)
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "end_header\n"
    )
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(points.tobytes())


def read_xyz_points(path):
    """Read whitespace-separated XYZ text (first three columns)."""
    pts = np.loadtxt(path, ndmin=2)
    if pts.shape[1] < 3:
        raise ValueError(f"{path}: expected at least 3 columns")
    return pts[:, :3].astype(float)


def read_points(path):
    """Dispatch on extension: .ply or whitespace XYZ text."""
    path = str(path)
    if path.lower().endswith(".ply"):
        return read_ply_points(path)
    return read_xyz_points(path)
