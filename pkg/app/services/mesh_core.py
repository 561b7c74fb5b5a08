"""Mesh-graph representation, validation, input features and mesh file I/O.

A MeshGraph is one resolution level of a triangulated 2D domain: node
coordinates (mm), undirected edges stored once with i < j, and counter-clockwise
triangular elements. NodeConditions carries the per-node boundary indicator,
the fixed-support flag and the applied nodal force (N).
"""

import json
import logging
import re
from dataclasses import dataclass, field

import numpy as np

from app.errors import DegenerateGeometryError, MeshParseError

logger = logging.getLogger(__name__)

MESH_FORMAT_VERSION = 1

MESH_SECTIONS = ("format_version", "nodes", "edges", "elements", "conditions")
CONDITION_KEYS = ("boundary", "fixed", "force")


# ── Domain types ─────────────────────────────────────────────────────────

def _frozen_array(values, dtype, width: int) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    if arr.size == 0:
        arr = arr.reshape(0, width) if width else arr.reshape(0)
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class MeshGraph:
    nodes: np.ndarray
    edges: np.ndarray
    elements: np.ndarray
    level_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "nodes", _frozen_array(self.nodes, np.float64, 2))
        object.__setattr__(self, "edges", _frozen_array(self.edges, np.int64, 2))
        object.__setattr__(self, "elements", _frozen_array(self.elements, np.int64, 3))

    @property
    def node_count(self) -> int:
        return int(self.nodes.shape[0])

    @property
    def edge_count(self) -> int:
        return int(self.edges.shape[0])

    @property
    def element_count(self) -> int:
        return int(self.elements.shape[0])

    def translated(self, offset) -> "MeshGraph":
        return MeshGraph(self.nodes + np.asarray(offset, dtype=np.float64),
                         self.edges, self.elements, self.level_id)


@dataclass(frozen=True, eq=False)
class NodeConditions:
    boundary: np.ndarray
    fixed: np.ndarray
    force: np.ndarray

    def __post_init__(self):
        boundary = _frozen_array(self.boundary, np.int64, 0)
        fixed = _frozen_array(self.fixed, np.int64, 0)
        force = _frozen_array(self.force, np.float64, 2)
        n = boundary.shape[0]
        if fixed.shape[0] != n or force.shape != (n, 2):
            raise ValueError(
                f"Condition arrays disagree on node count: boundary {boundary.shape}, "
                f"fixed {fixed.shape}, force {force.shape}"
            )
        for name, flags in (("boundary", boundary), ("fixed", fixed)):
            bad = np.flatnonzero((flags != 0) & (flags != 1))
            if bad.size:
                raise ValueError(f"{name} flag must be 0 or 1, node {int(bad[0])}")
        loaded_fixed = np.flatnonzero((fixed == 1) & np.any(force != 0.0, axis=1))
        if loaded_fixed.size:
            raise ValueError(f"applied force on a fixed node, node {int(loaded_fixed[0])}")
        object.__setattr__(self, "boundary", boundary)
        object.__setattr__(self, "fixed", fixed)
        object.__setattr__(self, "force", force)

    @property
    def node_count(self) -> int:
        return int(self.boundary.shape[0])

    @classmethod
    def empty(cls, node_count: int) -> "NodeConditions":
        return cls(np.zeros(node_count, dtype=np.int64), np.zeros(node_count, dtype=np.int64),
                   np.zeros((node_count, 2)))

    def permuted(self, order: np.ndarray) -> "NodeConditions":
        """Conditions for a graph whose node i is old node order[i]."""
        return NodeConditions(self.boundary[order], self.fixed[order], self.force[order])


@dataclass(frozen=True)
class DirectedEdge:
    src: int
    dst: int
    displacement: tuple[float, float]
    length: float


@dataclass(frozen=True, eq=False)
class DirectedEdgeSet:
    """Array form of directed_edges(): forward copies first, then the reversed copies."""

    src: np.ndarray
    dst: np.ndarray
    displacement: np.ndarray
    length: np.ndarray

    def __len__(self) -> int:
        return int(self.src.shape[0])


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


# ── Construction helpers ─────────────────────────────────────────────────

def element_sides(elements: np.ndarray) -> np.ndarray:
    """All element sides as sorted node pairs, three rows per element."""
    elements = np.asarray(elements, dtype=np.int64).reshape(-1, 3)
    sides = np.concatenate([elements[:, [0, 1]], elements[:, [1, 2]], elements[:, [2, 0]]])
    return np.sort(sides, axis=1)


def mesh_from_elements(nodes, elements, level_id: int = 0) -> MeshGraph:
    """Build a MeshGraph whose edge list is exactly the set of element sides."""
    elements = np.asarray(elements, dtype=np.int64).reshape(-1, 3)
    if elements.shape[0] == 0:
        edges = np.zeros((0, 2), dtype=np.int64)
    else:
        edges = np.unique(element_sides(elements), axis=0)
    return MeshGraph(nodes, edges, elements, level_id)


def signed_areas(graph: MeshGraph) -> np.ndarray:
    if graph.element_count == 0:
        return np.zeros(0)
    a = graph.nodes[graph.elements[:, 0]]
    b = graph.nodes[graph.elements[:, 1]]
    c = graph.nodes[graph.elements[:, 2]]
    ab = b - a
    ac = c - a
    return 0.5 * (ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0])


def boundary_nodes(graph: MeshGraph) -> np.ndarray:
    """Sorted indices of nodes on sides used by exactly one element (outer and hole contours)."""
    if graph.element_count == 0:
        return np.zeros(0, dtype=np.int64)
    sides, counts = np.unique(element_sides(graph.elements), axis=0, return_counts=True)
    return np.unique(sides[counts == 1].ravel())


# ── Validation ───────────────────────────────────────────────────────────

def validate_mesh(graph: MeshGraph) -> ValidationReport:
    """Report every MeshGraph invariant violation with the offending entity index."""
    report = ValidationReport()
    n = graph.node_count

    seen = {}
    for idx, (i, j) in enumerate(graph.edges.tolist()):
        if not (0 <= i < n and 0 <= j < n):
            report.violations.append(f"index out of range, edge {idx}")
            continue
        if i == j:
            report.violations.append(f"self-loop, edge {idx}")
            continue
        key = (min(i, j), max(i, j))
        if key in seen:
            report.violations.append(f"duplicate edge, edge {idx}")
        else:
            seen[key] = idx

    valid_elements = []
    for idx, tri in enumerate(graph.elements.tolist()):
        if not all(0 <= v < n for v in tri):
            report.violations.append(f"index out of range, element {idx}")
            continue
        valid_elements.append(idx)
        a, b, c = tri
        for p, q in ((a, b), (b, c), (c, a)):
            if (min(p, q), max(p, q)) not in seen:
                report.violations.append(f"missing side ({min(p, q)}, {max(p, q)}), element {idx}")

    if valid_elements:
        sub = MeshGraph(graph.nodes, np.zeros((0, 2), dtype=np.int64),
                        graph.elements[valid_elements])
        areas = signed_areas(sub)
        for idx, area in zip(valid_elements, areas):
            if not area > 0.0:
                report.violations.append(f"non-positive area, element {idx}")

    return report


# ── Directed edges and input features ────────────────────────────────────

def directed_edge_set(graph: MeshGraph) -> DirectedEdgeSet:
    edges = graph.edges
    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    displacement = graph.nodes[dst] - graph.nodes[src]
    length = np.hypot(displacement[:, 0], displacement[:, 1])
    zero = np.flatnonzero(length == 0.0)
    if zero.size:
        edge_idx = int(zero[0]) % max(graph.edge_count, 1)
        i, j = graph.edges[edge_idx]
        raise DegenerateGeometryError(
            f"degenerate edge {edge_idx}: nodes {int(i)} and {int(j)} coincide"
        )
    for arr in (src, dst, displacement, length):
        arr.setflags(write=False)
    return DirectedEdgeSet(src, dst, displacement, length)


def directed_edges(graph: MeshGraph) -> list[DirectedEdge]:
    """Both directions of every undirected edge: 2·|E| entries."""
    edge_set = directed_edge_set(graph)
    return [
        DirectedEdge(int(s), int(d), (float(disp[0]), float(disp[1])), float(length))
        for s, d, disp, length in zip(edge_set.src, edge_set.dst,
                                      edge_set.displacement, edge_set.length)
    ]


def edge_input_features(edge: DirectedEdge) -> np.ndarray:
    dx, dy = edge.displacement
    return np.array([dx, dy, float(np.hypot(dx, dy))])


def edge_feature_matrix(edge_set: DirectedEdgeSet) -> np.ndarray:
    return np.column_stack([edge_set.displacement, edge_set.length])


def node_input_features(conditions: NodeConditions, index: int) -> np.ndarray:
    fx, fy = conditions.force[index]
    return np.array([float(conditions.boundary[index]), float(conditions.fixed[index]), fx, fy])


def node_feature_matrix(conditions: NodeConditions) -> np.ndarray:
    return np.column_stack([
        conditions.boundary.astype(np.float64),
        conditions.fixed.astype(np.float64),
        conditions.force,
    ])


# ── Mesh file I/O ────────────────────────────────────────────────────────

def format_number(value: float) -> str:
    value = float(value)
    if not np.isfinite(value):
        raise ValueError(f"Cannot serialize non-finite value {value}")
    return format(value, ".17g")


def _float_rows(rows) -> list[str]:
    return ["[" + ", ".join(format_number(v) for v in row) + "]" for row in rows]


def _int_rows(rows) -> list[str]:
    return ["[" + ", ".join(str(int(v)) for v in row) + "]" for row in rows]


def _block(key: str, lines: list[str], indent: str = "  ") -> str:
    if not lines:
        return f'{indent}"{key}": []'
    inner = (",\n" + indent + "  ").join(lines)
    return f'{indent}"{key}": [\n{indent}  {inner}\n{indent}]'


def render_mesh(graph: MeshGraph, conditions: NodeConditions, response: np.ndarray | None = None) -> str:
    """Mesh file text: one entity per line, floats with 17 significant digits."""
    parts = [
        f'  "format_version": {MESH_FORMAT_VERSION}',
        f'  "level_id": {int(graph.level_id)}',
        _block("nodes", _float_rows(graph.nodes)),
        _block("edges", _int_rows(graph.edges)),
        _block("elements", _int_rows(graph.elements)),
    ]
    cond = "\n".join([
        '  "conditions": {',
        _block("boundary", [str(int(v)) for v in conditions.boundary], "    ") + ",",
        _block("fixed", [str(int(v)) for v in conditions.fixed], "    ") + ",",
        _block("force", _float_rows(conditions.force), "    "),
        "  }",
    ])
    parts.append(cond)
    if response is not None:
        parts.append(_block("response", _float_rows(np.asarray(response).reshape(graph.node_count, -1))))
    return "{\n" + ",\n".join(parts) + "\n}\n"


def write_mesh(graph: MeshGraph, conditions: NodeConditions, path, response: np.ndarray | None = None) -> None:
    if conditions.node_count != graph.node_count:
        raise ValueError(
            f"Conditions cover {conditions.node_count} nodes, graph has {graph.node_count}"
        )
    with open(path, "w", encoding="utf-8") as f:
        f.write(render_mesh(graph, conditions, response))


def _section_at(text: str, pos: int) -> str | None:
    """Name of the last top-level section key opened before character offset pos."""
    best, best_pos = None, -1
    for key in MESH_SECTIONS + CONDITION_KEYS + ("response",):
        for match in re.finditer(rf'"{key}"\s*:', text[:pos]):
            if match.start() > best_pos:
                best, best_pos = key, match.start()
    return best


def _array(payload: dict, key: str, width: int, dtype, section: str | None = None) -> np.ndarray:
    if key not in payload:
        raise MeshParseError(f"missing section '{key}'", section=section or key)
    raw = payload[key]
    if not isinstance(raw, list):
        raise MeshParseError(f"'{key}' must be an array", section=section or key)
    for idx, row in enumerate(raw):
        ok = isinstance(row, list) and len(row) == width if width else isinstance(row, (int, float))
        if not ok or (width and not all(isinstance(v, (int, float)) for v in row)):
            raise MeshParseError(f"malformed entry {idx} in '{key}'", section=section or key)
    arr = np.asarray(raw, dtype=dtype)
    if arr.size == 0:
        arr = arr.reshape(0, width) if width else arr.reshape(0)
    return arr


def parse_mesh(text: str) -> tuple[MeshGraph, NodeConditions, np.ndarray | None]:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        section = _section_at(text, exc.pos)
        raise MeshParseError(f"invalid mesh file: {exc.msg}", line=exc.lineno,
                             column=exc.colno, section=section) from exc
    if not isinstance(payload, dict):
        raise MeshParseError("mesh file must hold a JSON object", line=1, column=1)

    version = payload.get("format_version")
    if version is None:
        raise MeshParseError("missing section 'format_version'", section="format_version")
    if version != MESH_FORMAT_VERSION:
        raise MeshParseError(f"unsupported format_version {version}", section="format_version")

    nodes = _array(payload, "nodes", 2, np.float64)
    edges = _array(payload, "edges", 2, np.int64)
    elements = _array(payload, "elements", 3, np.int64)
    if "conditions" not in payload or not isinstance(payload["conditions"], dict):
        raise MeshParseError("missing section 'conditions'", section="conditions")
    cond_payload = payload["conditions"]
    boundary = _array(cond_payload, "boundary", 0, np.int64, "conditions")
    fixed = _array(cond_payload, "fixed", 0, np.int64, "conditions")
    force = _array(cond_payload, "force", 2, np.float64, "conditions")
    try:
        conditions = NodeConditions(boundary, fixed, force)
    except ValueError as exc:
        raise MeshParseError(str(exc), section="conditions") from exc
    if conditions.node_count != nodes.shape[0]:
        raise MeshParseError(
            f"conditions cover {conditions.node_count} nodes, mesh has {nodes.shape[0]}",
            section="conditions",
        )

    response = None
    if "response" in payload:
        raw = payload["response"]
        if not isinstance(raw, list) or len(raw) != nodes.shape[0]:
            raise MeshParseError("response must hold one row per node", section="response")
        response = np.asarray(raw, dtype=np.float64)

    graph = MeshGraph(nodes, edges, elements, int(payload.get("level_id", 0)))
    return graph, conditions, response


def read_mesh(path) -> tuple[MeshGraph, NodeConditions]:
    """Read a mesh file. Invariant violations are left for validate_mesh to report."""
    graph, conditions, _ = read_mesh_with_response(path)
    return graph, conditions


def read_mesh_with_response(path) -> tuple[MeshGraph, NodeConditions, np.ndarray | None]:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    return parse_mesh(text)
