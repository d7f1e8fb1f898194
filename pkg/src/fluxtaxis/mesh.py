"""Triangular meshes for the simulation domains.

Three deterministic builders, no external mesh generator:

- ``unit_square``: structured grid, each cell split into two triangles.
- ``disk``: concentric rings (6*i nodes on ring i) joined by an angular
  merge, with a center fan.
- ``hallway``: a rectilinear union of axis-aligned rectangles rasterized
  onto a uniform grid, with inlet/outlet ports tagged on the boundary.

All builders guarantee counterclockwise elements, a max element diameter of
at most ``2 h``, and boundary tags that partition the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .util import read_f64, read_i64, write_f64, write_i64

WALL = "wall"


class MeshError(ValueError):
    """Rejected mesh descriptor (degenerate or inconsistent geometry)."""


@dataclass(frozen=True)
class HallwaySpec:
    """Rectilinear hallway: a union of axis-aligned rectangles plus ports.

    Rectangles are (x0, y0, x1, y1); ports are axis-aligned boundary
    segments (x0, y0, x1, y1) lying on the outline of the union. All
    coordinates must sit on the grid implied by the mesh size.
    """

    rects: tuple[tuple[float, float, float, float], ...]
    inlets: tuple[tuple[float, float, float, float], ...]
    outlets: tuple[tuple[float, float, float, float], ...]


@dataclass(frozen=True)
class DomainSpec:
    """Descriptor consumed by :func:`build_mesh`.

    ``h`` bounds the element diameter by ``2 h``. When ``peclet`` is given
    the builder additionally shrinks cells so the element Peclet number
    (diam * Pe / 2 at unit speed) stays at or below 2.
    """

    kind: str  # disk | unit_square | hallway
    h: float
    radius: float = 1.0
    hallway: HallwaySpec | None = None
    peclet: float | None = None


@dataclass
class Mesh:
    nodes: np.ndarray  # (n_nodes, 2) float64
    elements: np.ndarray  # (n_elements, 3) int64, counterclockwise
    boundary_nodes: np.ndarray  # sorted unique int64
    boundary_segments: np.ndarray  # (n_segments, 2) int64 node pairs
    boundary_tags: list[str] = field(default_factory=list)
    domain_kind: str = "unknown"

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    def element_areas(self) -> np.ndarray:
        """Signed areas (positive for the CCW invariant)."""
        p = self.nodes[self.elements]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def element_diameters(self) -> np.ndarray:
        p = self.nodes[self.elements]
        e0 = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
        e1 = np.linalg.norm(p[:, 2] - p[:, 1], axis=1)
        e2 = np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
        return np.maximum(e0, np.maximum(e1, e2))

    def diameter(self) -> float:
        """Diameter of the node cloud (used for domain-scaled defaults)."""
        lo = self.nodes.min(axis=0)
        hi = self.nodes.max(axis=0)
        return float(np.linalg.norm(hi - lo))

    def segment_tag_set(self) -> set[str]:
        return set(self.boundary_tags)


def _orient_ccw(nodes: np.ndarray, elements: np.ndarray) -> np.ndarray:
    p = nodes[elements]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    area2 = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    flipped = elements.copy()
    bad = area2 < 0
    flipped[bad, 1], flipped[bad, 2] = elements[bad, 2], elements[bad, 1]
    return flipped


def _boundary_edges(elements: np.ndarray) -> np.ndarray:
    """Edges incident to exactly one element, as (n, 2) node pairs."""
    edges = np.concatenate(
        [elements[:, [0, 1]], elements[:, [1, 2]], elements[:, [2, 0]]], axis=0
    )
    key = np.sort(edges, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return edges[counts[inverse] == 1]


def validate_mesh(mesh: Mesh) -> None:
    """Check the structural invariants; raise MeshError on violation."""
    if mesh.nodes.ndim != 2 or mesh.nodes.shape[1] != 2:
        raise MeshError("nodes must be (n, 2)")
    if not np.isfinite(mesh.nodes).all():
        raise MeshError("non-finite node coordinates")
    if mesh.elements.min(initial=0) < 0 or mesh.elements.max(initial=-1) >= mesh.n_nodes:
        raise MeshError("element node index out of range")
    areas = mesh.element_areas()
    if not (areas > 0).all():
        bad = int(np.argmin(areas))
        raise MeshError(f"element {bad} has non-positive signed area {areas[bad]:.3e}")
    edges = _boundary_edges(mesh.elements)
    edge_keys = {tuple(sorted(e)) for e in edges.tolist()}
    seg_keys = [tuple(sorted(s)) for s in mesh.boundary_segments.tolist()]
    if len(seg_keys) != len(edge_keys) or set(seg_keys) != edge_keys:
        raise MeshError("boundary segments do not match the element boundary")
    if len(mesh.boundary_tags) != len(seg_keys):
        raise MeshError("one tag required per boundary segment")
    nodes_from_segs = np.unique(mesh.boundary_segments)
    if not np.array_equal(np.sort(mesh.boundary_nodes), nodes_from_segs):
        raise MeshError("boundary_nodes inconsistent with boundary_segments")


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def _effective_h(spec: DomainSpec) -> float:
    if spec.h <= 0:
        raise MeshError(f"mesh size h must be positive, got {spec.h}")
    h = spec.h
    if spec.peclet is not None:
        # element Peclet = diam * Pe / 2 <= 2 at |v| = 1, with diam <= 2h
        h = min(h, 1.0 / spec.peclet)
    return h


def _square_mesh(h: float) -> Mesh:
    n = int(np.ceil(1.0 / (np.sqrt(2.0) * h) - 1e-9))
    n = max(n, 1)
    xs = np.linspace(0.0, 1.0, n + 1)
    xx, yy = np.meshgrid(xs, xs, indexing="xy")
    nodes = np.column_stack([xx.ravel(), yy.ravel()])

    def nid(i, j):
        return j * (n + 1) + i

    tris = []
    for j in range(n):
        for i in range(n):
            a, b = nid(i, j), nid(i + 1, j)
            c, d = nid(i + 1, j + 1), nid(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))
    elements = _orient_ccw(nodes, np.asarray(tris, dtype=np.int64))
    segs = _boundary_edges(elements)
    tags = [WALL] * len(segs)
    mesh = Mesh(nodes, elements, np.unique(segs), segs, tags, "unit_square")
    validate_mesh(mesh)
    return mesh


def _ring_band(inner: np.ndarray, outer: np.ndarray) -> list[tuple[int, int, int]]:
    """Triangulate the band between two concentric rings of node indices.

    Rings are ordered counterclockwise starting at angle 0; the merge walks
    both rings by angle, so bands between rings of 6i and 6(i+1) nodes come
    out conforming and well-shaped.
    """
    m, big_m = len(inner), len(outer)
    tris: list[tuple[int, int, int]] = []
    j = k = 0
    while j < m or k < big_m:
        next_inner = (j + 1) / m if j < m else np.inf
        next_outer = (k + 1) / big_m if k < big_m else np.inf
        if next_outer <= next_inner and k < big_m:
            tris.append((outer[k % big_m], outer[(k + 1) % big_m], inner[j % m]))
            k += 1
        else:
            tris.append((inner[j % m], outer[k % big_m], inner[(j + 1) % m]))
            j += 1
    return tris


def _disk_mesh(h: float, radius: float) -> Mesh:
    if radius <= 0:
        raise MeshError("disk radius must be positive")
    n_rings = max(2, int(np.ceil(radius / h - 1e-9)))
    nodes = [(0.0, 0.0)]
    rings: list[np.ndarray] = []
    for i in range(1, n_rings + 1):
        r = radius * i / n_rings
        count = 6 * i
        start = len(nodes)
        theta = 2.0 * np.pi * np.arange(count) / count
        for t in theta:
            nodes.append((r * np.cos(t), r * np.sin(t)))
        rings.append(np.arange(start, start + count, dtype=np.int64))

    tris: list[tuple[int, int, int]] = []
    first = rings[0]
    for k in range(6):
        tris.append((0, first[k], first[(k + 1) % 6]))
    for i in range(len(rings) - 1):
        tris.extend(_ring_band(rings[i], rings[i + 1]))

    node_arr = np.asarray(nodes, dtype=np.float64)
    elements = _orient_ccw(node_arr, np.asarray(tris, dtype=np.int64))
    segs = _boundary_edges(elements)
    tags = [WALL] * len(segs)
    mesh = Mesh(node_arr, elements, np.unique(segs), segs, tags, "disk")
    validate_mesh(mesh)
    if mesh.element_diameters().max() > 2.0 * h + 1e-12:
        raise MeshError("disk mesh violated the 2h diameter bound")
    return mesh


def _snap_index(value: float, cell: float, what: str) -> int:
    ratio = value / cell
    idx = round(ratio)
    if abs(ratio - idx) > 1e-6:
        raise MeshError(f"{what} coordinate {value} is not aligned to grid size {cell}")
    return int(idx)


def _hallway_mesh(h: float, spec: HallwaySpec) -> Mesh:
    if not spec.rects:
        raise MeshError("hallway descriptor lists no rectangles")
    for r in spec.rects:
        if r[2] <= r[0] or r[3] <= r[1]:
            raise MeshError(f"degenerate hallway rectangle {r}")

    # cells per unit length; rectangle coordinates must land on the lattice
    per_unit = max(1, int(np.ceil(1.0 / (np.sqrt(2.0) * h) - 1e-9)))
    s = 1.0 / per_unit

    x0 = min(r[0] for r in spec.rects)
    y0 = min(r[1] for r in spec.rects)
    x1 = max(r[2] for r in spec.rects)
    y1 = max(r[3] for r in spec.rects)
    nx = _snap_index(x1 - x0, s, "hallway width")
    ny = _snap_index(y1 - y0, s, "hallway height")

    active = np.zeros((nx, ny), dtype=bool)
    for r in spec.rects:
        i0 = _snap_index(r[0] - x0, s, "rect")
        j0 = _snap_index(r[1] - y0, s, "rect")
        i1 = _snap_index(r[2] - x0, s, "rect")
        j1 = _snap_index(r[3] - y0, s, "rect")
        active[i0:i1, j0:j1] = True
    if not active.any():
        raise MeshError("hallway rasterized to an empty domain")

    # connectivity: flood fill from the first active cell
    stack = [tuple(np.argwhere(active)[0])]
    seen = np.zeros_like(active)
    seen[stack[0]] = True
    while stack:
        ci, cj = stack.pop()
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ni, nj = ci + di, cj + dj
            if 0 <= ni < nx and 0 <= nj < ny and active[ni, nj] and not seen[ni, nj]:
                seen[ni, nj] = True
                stack.append((ni, nj))
    if seen.sum() != active.sum():
        raise MeshError("hallway domain is disconnected; check rectangle overlaps")

    # lattice nodes incident to at least one active cell
    node_id = -np.ones((nx + 1, ny + 1), dtype=np.int64)
    nodes: list[tuple[float, float]] = []

    def corner(i, j):
        if node_id[i, j] < 0:
            node_id[i, j] = len(nodes)
            nodes.append((x0 + i * s, y0 + j * s))
        return node_id[i, j]

    tris: list[tuple[int, int, int]] = []
    for i in range(nx):
        for j in range(ny):
            if not active[i, j]:
                continue
            a = corner(i, j)
            b = corner(i + 1, j)
            c = corner(i + 1, j + 1)
            d = corner(i, j + 1)
            tris.append((a, b, c))
            tris.append((a, c, d))

    node_arr = np.asarray(nodes, dtype=np.float64)
    elements = _orient_ccw(node_arr, np.asarray(tris, dtype=np.int64))
    segs = _boundary_edges(elements)

    ports = [(f"inlet_{k}", seg) for k, seg in enumerate(spec.inlets)]
    ports += [(f"outlet_{k}", seg) for k, seg in enumerate(spec.outlets)]
    tags = []
    matched = {name: 0 for name, _ in ports}
    for a, b in segs:
        mid = 0.5 * (node_arr[a] + node_arr[b])
        tag = WALL
        for name, (px0, py0, px1, py1) in ports:
            lo = np.array([min(px0, px1), min(py0, py1)]) - 1e-9
            hi = np.array([max(px0, px1), max(py0, py1)]) + 1e-9
            if (mid >= lo).all() and (mid <= hi).all():
                tag = name
                matched[name] += 1
                break
        tags.append(tag)
    unmatched = [name for name, count in matched.items() if count == 0]
    if unmatched:
        raise MeshError(f"hallway ports not on the boundary: {unmatched}")

    mesh = Mesh(node_arr, elements, np.unique(segs), segs, tags, "hallway")
    validate_mesh(mesh)
    return mesh


def default_hallway() -> HallwaySpec:
    """Corridor with six rooms below it: two end inlets, one outlet per room."""
    rects = [(0.0, 2.0, 13.0, 3.0)]
    outlets = []
    for k in range(6):
        rx = 2.0 * k + 1.0
        rects.append((rx, 0.0, rx + 1.0, 2.0))
        outlets.append((rx, 0.0, rx + 1.0, 0.0))
    inlets = [(0.0, 2.0, 0.0, 3.0), (13.0, 2.0, 13.0, 3.0)]
    return HallwaySpec(tuple(rects), tuple(inlets), tuple(outlets))


def build_mesh(spec: DomainSpec) -> Mesh:
    """Build the triangulation described by ``spec``.

    Raises MeshError for degenerate descriptors. Guarantees: conforming
    triangulation, max element diameter <= 2h, tagged boundary.
    """
    h = _effective_h(spec)
    if spec.kind == "unit_square":
        return _square_mesh(h)
    if spec.kind == "disk":
        return _disk_mesh(h, spec.radius)
    if spec.kind == "hallway":
        hallway = spec.hallway if spec.hallway is not None else default_hallway()
        return _hallway_mesh(h, hallway)
    raise MeshError(f"unknown domain kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# mesh file formats
# ---------------------------------------------------------------------------


def save_mesh_text(mesh: Mesh, path: Path | str) -> None:
    """Structured text format: NODES / ELEMENTS / BOUNDARY sections."""
    lines = [f"MESH v1 kind={mesh.domain_kind}"]
    lines.append(f"NODES {mesh.n_nodes}")
    for i, (x, y) in enumerate(mesh.nodes):
        lines.append(f"{i} {float(x)!r} {float(y)!r}")
    lines.append(f"ELEMENTS {mesh.n_elements}")
    for i, (a, b, c) in enumerate(mesh.elements):
        lines.append(f"{i} {a} {b} {c}")
    lines.append(f"BOUNDARY {len(mesh.boundary_segments)}")
    for (a, b), tag in zip(mesh.boundary_segments, mesh.boundary_tags):
        lines.append(f"{a} {b} {tag}")
    lines.append("END")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_mesh_text(path: Path | str) -> Mesh:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    header = lines[0].split()
    if not header or header[0] != "MESH":
        raise MeshError(f"{path}: not a mesh file")
    kind = header[2].split("=", 1)[1] if len(header) > 2 else "unknown"
    pos = 1
    n_nodes = int(lines[pos].split()[1])
    pos += 1
    nodes = np.empty((n_nodes, 2))
    for i in range(n_nodes):
        parts = lines[pos + i].split()
        nodes[int(parts[0])] = (float(parts[1]), float(parts[2]))
    pos += n_nodes
    n_elems = int(lines[pos].split()[1])
    pos += 1
    elements = np.empty((n_elems, 3), dtype=np.int64)
    for i in range(n_elems):
        parts = lines[pos + i].split()
        elements[int(parts[0])] = [int(p) for p in parts[1:4]]
    pos += n_elems
    n_segs = int(lines[pos].split()[1])
    pos += 1
    segs = np.empty((n_segs, 2), dtype=np.int64)
    tags = []
    for i in range(n_segs):
        parts = lines[pos + i].split()
        segs[i] = (int(parts[0]), int(parts[1]))
        tags.append(parts[2])
    mesh = Mesh(nodes, elements, np.unique(segs), segs, tags, kind)
    validate_mesh(mesh)
    return mesh


def save_mesh_binary(mesh: Mesh, directory: Path | str) -> None:
    """Binary twin of the text format: manifest plus flat LE column files."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_f64(d / "nodes.f64", mesh.nodes)
    write_i64(d / "elements.i64", mesh.elements)
    write_i64(d / "boundary.i64", mesh.boundary_segments)
    manifest = [
        "MESH v1 binary little-endian",
        f"kind {mesh.domain_kind}",
        f"nodes {mesh.n_nodes} 2 f64 nodes.f64",
        f"elements {mesh.n_elements} 3 i64 elements.i64",
        f"boundary {len(mesh.boundary_segments)} 2 i64 boundary.i64",
        "tags " + " ".join(mesh.boundary_tags),
        "END",
    ]
    (d / "manifest.txt").write_text("\n".join(manifest) + "\n", encoding="utf-8")


def load_mesh_binary(directory: Path | str) -> Mesh:
    d = Path(directory)
    lines = (d / "manifest.txt").read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("MESH v1 binary"):
        raise MeshError(f"{directory}: not a binary mesh container")
    fields = {}
    tags: list[str] = []
    for line in lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "END":
            continue
        if parts[0] == "tags":
            tags = parts[1:]
        elif parts[0] == "kind":
            fields["kind"] = parts[1]
        else:
            fields[parts[0]] = parts[1:]
    n_nodes = int(fields["nodes"][0])
    n_elems = int(fields["elements"][0])
    n_segs = int(fields["boundary"][0])
    nodes = read_f64(d / fields["nodes"][3], (n_nodes, 2))
    elements = read_i64(d / fields["elements"][3], (n_elems, 3))
    segs = read_i64(d / fields["boundary"][3], (n_segs, 2))
    mesh = Mesh(nodes, elements, np.unique(segs), segs, tags, fields.get("kind", "unknown"))
    validate_mesh(mesh)
    return mesh
