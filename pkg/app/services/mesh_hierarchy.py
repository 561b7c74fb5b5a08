"""R-level mesh stack: Delaunay coarsening, point location, condition
interpolation and cross-level up-sampling edges.

Levels are numbered 1 (coarsest) .. R (finest, the input graph). One extra
auxiliary level 0 is coarser still; it only feeds MP-step tuning of level 1.
"""

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay

from app.errors import DegenerateGeometryError, MeshFragmentError, ResolutionError, StructuralError
from app.services.mesh_core import (
    MeshGraph, NodeConditions, format_number, mesh_from_elements, read_mesh, write_mesh,
)

logger = logging.getLogger(__name__)

HOLE_SHAPE_CIRCLE = "circle"
HOLE_SHAPE_SQUARE = "square"
HOLE_SHAPE_HEXAGON = "hexagon"
VALID_HOLE_SHAPES = [HOLE_SHAPE_CIRCLE, HOLE_SHAPE_SQUARE, HOLE_SHAPE_HEXAGON]

MIN_CONTOUR_SAMPLES = 8
DEFAULT_COARSENING_FACTOR = 2.0
CONTAINMENT_TOLERANCE = 1e-12
JITTER_FRACTION = 0.2
HIERARCHY_FORMAT_VERSION = 1


def _segments(length: float, spacing: float) -> int:
    return max(1, int(math.floor(length / spacing + 0.5)))


# ── Geometry ─────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class HoleSpec:
    shape: str
    center: tuple[float, float]
    diameter: float

    def __post_init__(self):
        if self.shape not in VALID_HOLE_SHAPES:
            raise ValueError(f"Unknown hole shape: {self.shape}. Valid: {VALID_HOLE_SHAPES}")
        if not self.diameter > 0:
            raise ValueError(f"Hole diameter must be positive, got {self.diameter}")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "diameter", float(self.diameter))

    @property
    def radius(self) -> float:
        return self.diameter / 2.0

    @property
    def bounding_radius(self) -> float:
        if self.shape == HOLE_SHAPE_SQUARE:
            return self.diameter / math.sqrt(2.0)
        return self.radius

    @property
    def half_extent(self) -> tuple[float, float]:
        if self.shape == HOLE_SHAPE_HEXAGON:
            return self.radius, self.radius * math.sqrt(3.0) / 2.0
        return self.radius, self.radius

    @property
    def perimeter(self) -> float:
        if self.shape == HOLE_SHAPE_CIRCLE:
            return math.pi * self.diameter
        if self.shape == HOLE_SHAPE_SQUARE:
            return 4.0 * self.diameter
        return 6.0 * self.radius

    @property
    def area(self) -> float:
        if self.shape == HOLE_SHAPE_CIRCLE:
            return math.pi * self.radius ** 2
        if self.shape == HOLE_SHAPE_SQUARE:
            return self.diameter ** 2
        return 1.5 * math.sqrt(3.0) * self.radius ** 2

    def vertices(self) -> np.ndarray:
        """Polygon corners, counter-clockwise (square and hexagon only)."""
        cx, cy = self.center
        if self.shape == HOLE_SHAPE_SQUARE:
            h = self.diameter / 2.0
            return np.array([[cx - h, cy - h], [cx + h, cy - h], [cx + h, cy + h], [cx - h, cy + h]])
        if self.shape == HOLE_SHAPE_HEXAGON:
            angles = np.arange(6) * math.pi / 3.0
            return np.column_stack([cx + self.radius * np.cos(angles), cy + self.radius * np.sin(angles)])
        raise ValueError("A circle has no polygon vertices")

    def contour(self, spacing: float) -> np.ndarray:
        """Contour samples, counter-clockwise, about `spacing` apart."""
        n = int(math.floor(self.perimeter / spacing + 0.5))
        if n < MIN_CONTOUR_SAMPLES:
            raise ResolutionError(
                f"{self.shape} hole of diameter {self.diameter} needs spacing <= "
                f"{self.perimeter / (MIN_CONTOUR_SAMPLES - 0.5):.4g} mm, got {spacing:.4g} mm "
                f"({n} contour samples, minimum {MIN_CONTOUR_SAMPLES})"
            )
        cx, cy = self.center
        if self.shape == HOLE_SHAPE_CIRCLE:
            angles = 2.0 * math.pi * np.arange(n) / n
            return np.column_stack([cx + self.radius * np.cos(angles), cy + self.radius * np.sin(angles)])
        corners = self.vertices()
        per_side = math.ceil(n / corners.shape[0])
        points = []
        for a, b in zip(corners, np.roll(corners, -1, axis=0)):
            for t in np.arange(per_side) / per_side:
                points.append(a + t * (b - a))
        return np.array(points)

    def to_dict(self) -> dict:
        return {"shape": self.shape, "center": list(self.center), "diameter": self.diameter}

    @classmethod
    def from_dict(cls, data: dict) -> "HoleSpec":
        return cls(data["shape"], tuple(data["center"]), data["diameter"])


@dataclass(frozen=True)
class GeometrySpec:
    width: float
    height: float
    holes: tuple[HoleSpec, ...] = ()

    def validate(self) -> None:
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"Rectangle sides must be positive, got {self.width} x {self.height}")
        if len(self.holes) > 2:
            raise ValueError(f"At most two holes are supported, got {len(self.holes)}")
        for idx, hole in enumerate(self.holes):
            hx, hy = hole.half_extent
            cx, cy = hole.center
            if not (cx - hx > 0 and cx + hx < self.width and cy - hy > 0 and cy + hy < self.height):
                raise ValueError(f"Hole {idx} at {hole.center} does not lie strictly inside the rectangle")
        if len(self.holes) == 2:
            a, b = self.holes
            gap = math.dist(a.center, b.center) - a.bounding_radius - b.bounding_radius
            if gap <= 0:
                raise ValueError(f"Holes at {a.center} and {b.center} overlap")

    @property
    def min_side(self) -> float:
        return min(self.width, self.height)

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "holes": [h.to_dict() for h in self.holes]}

    @classmethod
    def from_dict(cls, data: dict) -> "GeometrySpec":
        return cls(float(data["width"]), float(data["height"]),
                   tuple(HoleSpec.from_dict(h) for h in data.get("holes", [])))


def polygon_area(polygon: np.ndarray) -> float:
    x, y = polygon[:, 0], polygon[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _inside_convex_polygon(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Strict interior test against a counter-clockwise convex polygon."""
    inside = np.ones(points.shape[0], dtype=bool)
    for a, b in zip(polygon, np.roll(polygon, -1, axis=0)):
        edge = b - a
        rel = points - a
        inside &= edge[0] * rel[:, 1] - edge[1] * rel[:, 0] > 0.0
    return inside


def _distance_to_polygon(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    best = np.full(points.shape[0], np.inf)
    for a, b in zip(polygon, np.roll(polygon, -1, axis=0)):
        edge = b - a
        t = np.clip(((points - a) @ edge) / float(edge @ edge), 0.0, 1.0)
        nearest = a + t[:, None] * edge
        best = np.minimum(best, np.hypot(*(points - nearest).T))
    return best


def _rectangle_contour(width: float, height: float, spacing: float) -> np.ndarray:
    nx, ny = _segments(width, spacing), _segments(height, spacing)
    sx = width * np.arange(nx) / nx
    sy = height * np.arange(ny) / ny
    return np.concatenate([
        np.column_stack([sx, np.zeros(nx)]),
        np.column_stack([np.full(ny, width), sy]),
        np.column_stack([width - sx, np.full(nx, height)]),
        np.column_stack([np.zeros(ny), height - sy]),
    ])


def triangulate(spec: GeometrySpec, target_edge_length: float, seed: int = 0, *,
                interior_edge_length: float | None = None, hole_edge_length: float | None = None,
                level_id: int = 0) -> MeshGraph:
    """Conforming triangulation of the rectangle minus its holes.

    The rectangle is sampled at about target_edge_length, hole contours at
    hole_edge_length and the interior on a jittered grid at interior_edge_length
    (both default to the target), then Delaunay triangulated; triangles whose centroid falls in a hole are removed.
    """
    spec.validate()
    h = float(target_edge_length)
    if not (0.0 < h <= spec.min_side / 2.0):
        raise ValueError(
            f"target_edge_length must be in (0, {spec.min_side / 2.0}] for a "
            f"{spec.width} x {spec.height} rectangle, got {h}"
        )
    hi = h if interior_edge_length is None else float(interior_edge_length)
    if hi < h:
        raise ValueError(f"interior_edge_length {hi} is finer than the contour spacing {h}")
    hh = h if hole_edge_length is None else float(hole_edge_length)
    if not hh > 0:
        raise ValueError(f"hole_edge_length must be positive, got {hh}")

    rng = np.random.default_rng(seed)
    outer = _rectangle_contour(spec.width, spec.height, h)
    contours = [hole.contour(hh) for hole in spec.holes]

    mx, my = _segments(spec.width, hi), _segments(spec.height, hi)
    gx, gy = np.meshgrid(spec.width * np.arange(1, mx) / mx, spec.height * np.arange(1, my) / my)
    interior = np.column_stack([gx.ravel(), gy.ravel()])
    if interior.shape[0]:
        amplitude = JITTER_FRACTION * np.array([spec.width / mx, spec.height / my])
        interior = interior + rng.uniform(-1.0, 1.0, size=interior.shape) * amplitude
        keep = np.ones(interior.shape[0], dtype=bool)
        for contour in contours:
            keep &= ~_inside_convex_polygon(interior, contour)
            keep &= _distance_to_polygon(interior, contour) >= 0.5 * hh
        interior = interior[keep]

    points = np.concatenate([outer, *contours, interior]) if contours else np.concatenate([outer, interior])
    simplices = np.asarray(Delaunay(points).simplices, dtype=np.int64)

    a, b, c = points[simplices[:, 0]], points[simplices[:, 1]], points[simplices[:, 2]]
    area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    flip = area2 < 0
    simplices[flip] = simplices[flip][:, [0, 2, 1]]
    keep = np.abs(area2) > 2e-12 * min(h, hh) ** 2
    centroids = (a + b + c) / 3.0
    for contour in contours:
        keep &= ~_inside_convex_polygon(centroids, contour)
    simplices = simplices[keep]

    used = np.unique(simplices.ravel())
    remap = np.full(points.shape[0], -1, dtype=np.int64)
    remap[used] = np.arange(used.shape[0])
    graph = mesh_from_elements(points[used], remap[simplices], level_id)
    logger.debug(f"Triangulated level {level_id}: {graph.node_count} nodes, "
                 f"{graph.element_count} elements (h={h:.4g}, interior={hi:.4g})")
    return graph


def sampled_domain_area(spec: GeometrySpec, spacing: float) -> float:
    """Rectangle area minus the polygonal (sampled) hole areas at this contour spacing."""
    return spec.width * spec.height - sum(polygon_area(h.contour(spacing)) for h in spec.holes)


# ── Point location ───────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class ElementLocator:
    origin: np.ndarray
    cell_size: float
    shape: tuple[int, int]
    cell_start: np.ndarray
    cell_elements: np.ndarray

    def cell_of(self, point) -> tuple[int, int] | None:
        rel = (np.asarray(point, dtype=np.float64) - self.origin) / self.cell_size
        ix, iy = int(math.floor(rel[0])), int(math.floor(rel[1]))
        nx, ny = self.shape
        # points on the far bounding-box edge belong to the last cell
        if ix == nx and rel[0] <= nx + 1e-9:
            ix = nx - 1
        if iy == ny and rel[1] <= ny + 1e-9:
            iy = ny - 1
        if 0 <= ix < nx and 0 <= iy < ny:
            return ix, iy
        return None

    def candidates(self, point) -> np.ndarray:
        cell = self.cell_of(point)
        if cell is None:
            return np.zeros(0, dtype=np.int64)
        idx = cell[1] * self.shape[0] + cell[0]
        return self.cell_elements[self.cell_start[idx]:self.cell_start[idx + 1]]


def median_edge_length(graph: MeshGraph) -> float:
    if graph.edge_count == 0:
        return 0.0
    d = graph.nodes[graph.edges[:, 1]] - graph.nodes[graph.edges[:, 0]]
    return float(np.median(np.hypot(d[:, 0], d[:, 1])))


def build_locator(graph: MeshGraph, cell_size: float | None = None) -> ElementLocator:
    """Uniform background grid; every element is listed in each cell its bounding box overlaps."""
    if graph.element_count == 0:
        raise StructuralError("cannot build a locator for an empty mesh")
    size = float(cell_size) if cell_size else 2.0 * median_edge_length(graph)
    lo = graph.nodes.min(axis=0)
    hi = graph.nodes.max(axis=0)
    if not size > 0:
        size = float(max(hi - lo)) or 1.0
    nx = max(1, int(math.ceil((hi[0] - lo[0]) / size)))
    ny = max(1, int(math.ceil((hi[1] - lo[1]) / size)))

    tris = graph.nodes[graph.elements]
    cmin = np.clip(np.floor((tris.min(axis=1) - lo) / size).astype(np.int64), 0, [nx - 1, ny - 1])
    cmax = np.clip(np.floor((tris.max(axis=1) - lo) / size).astype(np.int64), 0, [nx - 1, ny - 1])
    buckets: list[list[int]] = [[] for _ in range(nx * ny)]
    for elem, ((x0, y0), (x1, y1)) in enumerate(zip(cmin, cmax)):
        for iy in range(y0, y1 + 1):
            for ix in range(x0, x1 + 1):
                buckets[iy * nx + ix].append(elem)
    start = np.zeros(nx * ny + 1, dtype=np.int64)
    start[1:] = np.cumsum([len(b) for b in buckets])
    flat = np.fromiter((e for b in buckets for e in b), dtype=np.int64, count=int(start[-1]))
    return ElementLocator(lo, size, (nx, ny), start, flat)


def barycentric_weights(point, triangle) -> np.ndarray:
    """Raw barycentric weights of point in a triangle (may be negative outside)."""
    a, b, c = np.asarray(triangle, dtype=np.float64)
    p = np.asarray(point, dtype=np.float64)
    ab, ac, ap = b - a, c - a, p - a
    det = ab[0] * ac[1] - ab[1] * ac[0]
    scale = max(float(ab @ ab), float(ac @ ac))
    if scale == 0.0 or abs(det) <= 1e-14 * scale:
        raise DegenerateGeometryError(f"zero-area triangle {triangle.tolist() if hasattr(triangle, 'tolist') else triangle}")
    w1 = (ap[0] * ac[1] - ap[1] * ac[0]) / det
    w2 = (ab[0] * ap[1] - ab[1] * ap[0]) / det
    return np.array([1.0 - w1 - w2, w1, w2])


def _barycentric_many(point: np.ndarray, tris: np.ndarray) -> np.ndarray:
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    ab, ac, ap = b - a, c - a, point - a
    det = ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0]
    w1 = (ap[:, 0] * ac[:, 1] - ap[:, 1] * ac[:, 0]) / det
    w2 = (ab[:, 0] * ap[:, 1] - ab[:, 1] * ap[:, 0]) / det
    return np.column_stack([1.0 - w1 - w2, w1, w2])


def clamped_weights(weights: np.ndarray) -> np.ndarray:
    w = np.clip(weights, 0.0, 1.0)
    return w / w.sum(axis=-1, keepdims=True)


def _nearest_element(point: np.ndarray, graph: MeshGraph) -> int:
    tris = graph.nodes[graph.elements]
    w = clamped_weights(_barycentric_many(point, tris))
    projected = np.einsum("ek,ekd->ed", w, tris)
    return int(np.argmin(np.hypot(*(projected - point).T)))


def brute_force_locate(point, graph: MeshGraph) -> int:
    """Reference scan over every element, same containment and tie rules as locate_element."""
    if graph.element_count == 0:
        raise StructuralError("cannot locate a point in an empty mesh")
    p = np.asarray(point, dtype=np.float64)
    w = _barycentric_many(p, graph.nodes[graph.elements])
    inside = np.flatnonzero(np.all(w >= -CONTAINMENT_TOLERANCE, axis=1))
    if inside.size:
        return int(inside[0])
    return _nearest_element(p, graph)


def locate_element(point, graph: MeshGraph, locator: ElementLocator) -> int:
    """Lowest-index element whose closed triangle contains point, else the clamped-nearest one."""
    if graph.element_count == 0:
        raise StructuralError("cannot locate a point in an empty mesh")
    p = np.asarray(point, dtype=np.float64)
    cands = locator.candidates(p)
    if cands.size:
        w = _barycentric_many(p, graph.nodes[graph.elements[cands]])
        inside = cands[np.all(w >= -CONTAINMENT_TOLERANCE, axis=1)]
        if inside.size:
            return int(inside.min())
    return _nearest_element(p, graph)


def locate_points(points: np.ndarray, graph: MeshGraph, locator: ElementLocator) -> np.ndarray:
    return np.fromiter((locate_element(p, graph, locator) for p in points),
                       dtype=np.int64, count=len(points))


# ── Cross-level transfer ─────────────────────────────────────────────────

def interpolate_conditions(fine: MeshGraph, fine_conditions: NodeConditions,
                           coarse: MeshGraph, fine_locator: ElementLocator) -> NodeConditions:
    """Barycentric transfer of node conditions from a fine graph onto a coarse one."""
    n = coarse.node_count
    force = np.zeros((n, 2))
    boundary = np.zeros(n, dtype=np.int64)
    fixed = np.zeros(n, dtype=np.int64)
    for i, p in enumerate(coarse.nodes):
        tri = fine.elements[locate_element(p, fine, fine_locator)]
        w = clamped_weights(barycentric_weights(p, fine.nodes[tri]))
        force[i] = w @ fine_conditions.force[tri]
        boundary[i] = int(w @ fine_conditions.boundary[tri] >= 0.5)
        fixed[i] = int(w @ fine_conditions.fixed[tri] >= 0.5)
    force[fixed == 1] = 0.0
    return NodeConditions(boundary, fixed, force)


@dataclass(frozen=True, eq=False)
class CrossEdgeSet:
    """Directed up-sampling edges from level `src_level` to level `src_level + 1`."""

    src_level: int
    src: np.ndarray
    dst: np.ndarray
    displacement: np.ndarray
    length: np.ndarray

    def __len__(self) -> int:
        return int(self.src.shape[0])

    def features(self) -> np.ndarray:
        return np.column_stack([self.displacement, self.length])

    def reversed_features(self) -> np.ndarray:
        return np.column_stack([-self.displacement, self.length])


def cross_edges_from_pairs(src_level: int, src: np.ndarray, dst: np.ndarray,
                           coarse: MeshGraph, fine: MeshGraph) -> CrossEdgeSet:
    displacement = fine.nodes[dst] - coarse.nodes[src]
    length = np.hypot(displacement[:, 0], displacement[:, 1])
    return CrossEdgeSet(src_level, np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64),
                        displacement, length)


def build_upsampling_edges(coarse: MeshGraph, fine: MeshGraph, coarse_locator: ElementLocator,
                           src_level: int | None = None) -> CrossEdgeSet:
    """Three edges into every fine node, one from each vertex of its containing coarse element."""
    located = locate_points(fine.nodes, coarse, coarse_locator)
    src = coarse.elements[located].ravel()
    dst = np.repeat(np.arange(fine.node_count, dtype=np.int64), 3)
    level = coarse.level_id if src_level is None else src_level
    return cross_edges_from_pairs(level, src, dst, coarse, fine)


# ── Multi-level mesh ─────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class MultiLevelMesh:
    levels: tuple[MeshGraph, ...]
    auxiliary_level: MeshGraph
    cross_edges: tuple[CrossEdgeSet, ...]
    conditions: tuple[NodeConditions, ...]
    metadata: dict = field(default_factory=dict)

    @property
    def R(self) -> int:
        return len(self.levels)

    def level(self, r: int) -> MeshGraph:
        """1-based level access; level 0 is the auxiliary level."""
        if r == 0:
            return self.auxiliary_level
        return self.levels[r - 1]

    def conditions_at(self, r: int) -> NodeConditions:
        return self.conditions[r - 1]

    def cross(self, r: int) -> CrossEdgeSet:
        """Up-sampling edges from level r to level r + 1."""
        return self.cross_edges[r - 1]


def _level_seed(seed: int, level: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(level)]).generate_state(1)[0])


def build_multilevel(spec: GeometrySpec, graph: MeshGraph, conditions: NodeConditions, R: int,
                     target_edge_length: float,
                     coarsening_factor: float = DEFAULT_COARSENING_FACTOR,
                     seed: int = 0) -> MultiLevelMesh:
    """Stack R levels over the input graph plus the auxiliary level 0."""
    if R < 1:
        raise ValueError(f"R must be >= 1, got {R}")
    if not coarsening_factor > 1.0:
        raise ValueError(f"coarsening_factor must be > 1, got {coarsening_factor}")

    rect_cap = spec.min_side / 2.0
    hole_cap = min((h.perimeter / MIN_CONTOUR_SAMPLES for h in spec.holes), default=math.inf)

    meshes = {R: MeshGraph(graph.nodes, graph.edges, graph.elements, R)}
    targets = {R: float(target_edge_length)}
    for r in range(R - 1, -1, -1):
        target = float(target_edge_length) * coarsening_factor ** (R - r)
        contour = min(target, rect_cap)
        mesh = triangulate(spec, contour, _level_seed(seed, r), interior_edge_length=target,
                           hole_edge_length=min(target, hole_cap), level_id=r)
        if mesh.element_count < 1:
            raise MeshFragmentError(f"level {r} degenerated to {mesh.element_count} elements")
        if mesh.element_count >= meshes[r + 1].element_count:
            raise MeshFragmentError(
                f"level {r} has {mesh.element_count} elements, not fewer than level {r + 1} "
                f"({meshes[r + 1].element_count}); coarsening no longer reduces the mesh"
            )
        meshes[r] = mesh
        targets[r] = target

    fine_locator = build_locator(graph)
    level_conditions = {R: conditions}
    for r in range(1, R):
        level_conditions[r] = interpolate_conditions(graph, conditions, meshes[r], fine_locator)

    cross = []
    for r in range(1, R):
        cross.append(build_upsampling_edges(meshes[r], meshes[r + 1], build_locator(meshes[r]), r))

    metadata = {
        "level_targets": {str(r): targets[r] for r in sorted(targets)},
        "element_counts": {str(r): meshes[r].element_count for r in sorted(meshes)},
        "total_force": {str(r): [float(v) for v in level_conditions[r].force.sum(axis=0)]
                        for r in sorted(level_conditions)},
        "coarsening_factor": float(coarsening_factor),
        "seed": int(seed),
    }
    logger.debug(f"Built {R}-level hierarchy, element counts {metadata['element_counts']}")
    return MultiLevelMesh(
        levels=tuple(meshes[r] for r in range(1, R + 1)),
        auxiliary_level=meshes[0],
        cross_edges=tuple(cross),
        conditions=tuple(level_conditions[r] for r in range(1, R + 1)),
        metadata=metadata,
    )


# ── Serialization ────────────────────────────────────────────────────────

def level_file_name(r: int) -> str:
    return f"level_{r}.json"


def save_hierarchy(multilevel: MultiLevelMesh, directory) -> str:
    """One mesh file per level plus hierarchy.json; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    for r in range(1, multilevel.R + 1):
        write_mesh(multilevel.level(r), multilevel.conditions_at(r),
                   os.path.join(directory, level_file_name(r)))
    aux = multilevel.auxiliary_level
    write_mesh(aux, NodeConditions.empty(aux.node_count), os.path.join(directory, level_file_name(0)))

    rows = []
    for cross in multilevel.cross_edges:
        for s, d, disp, length in zip(cross.src, cross.dst, cross.displacement, cross.length):
            rows.append(f"[{cross.src_level}, {int(s)}, {int(d)}, {format_number(disp[0])}, "
                        f"{format_number(disp[1])}, {format_number(length)}]")
    header = {
        "format_version": HIERARCHY_FORMAT_VERSION,
        "R": multilevel.R,
        "levels": [level_file_name(r) for r in range(1, multilevel.R + 1)],
        "auxiliary_level": level_file_name(0),
        "metadata": multilevel.metadata,
    }
    body = json.dumps(header, indent=2, sort_keys=True)[:-2]
    cross_text = ",\n    ".join(rows)
    text = body + ',\n  "cross_edges": [' + (f"\n    {cross_text}\n  " if rows else "") + "]\n}\n"
    path = os.path.join(directory, "hierarchy.json")
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)
    return path


def load_hierarchy(path) -> MultiLevelMesh:
    directory = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    levels, conditions = [], []
    for r, name in enumerate(manifest["levels"], start=1):
        graph, cond = read_mesh(os.path.join(directory, name))
        levels.append(MeshGraph(graph.nodes, graph.edges, graph.elements, r))
        conditions.append(cond)
    aux, _ = read_mesh(os.path.join(directory, manifest["auxiliary_level"]))

    rows = np.asarray(manifest["cross_edges"], dtype=np.float64).reshape(-1, 6)
    cross = []
    for r in range(1, len(levels)):
        sel = rows[rows[:, 0] == r]
        cross.append(CrossEdgeSet(r, sel[:, 1].astype(np.int64), sel[:, 2].astype(np.int64),
                                  sel[:, 3:5].copy(), sel[:, 5].copy()))
    return MultiLevelMesh(tuple(levels), MeshGraph(aux.nodes, aux.edges, aux.elements, 0),
                          tuple(cross), tuple(conditions), manifest.get("metadata", {}))
