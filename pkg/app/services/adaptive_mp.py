"""Direction-based edge grouping and per-group message-passing step tuning.

Every level's directed edges are split into K groups by direction (a
Lloyd-style loop on angular distance). The MP step count of a group is the
largest hop diameter that group's edges reach inside any projected coarse
element, so one group pass can carry information across a whole coarse cell.
"""

import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, shortest_path

from app.config import RUNTIME_CONFIG
from app.errors import DegenerateGeometryError
from app.services.mesh_core import MeshGraph, directed_edge_set
from app.services.mesh_hierarchy import ElementLocator, MultiLevelMesh, build_locator, locate_points

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 100
SAMPLING_UP = "up_only"
SAMPLING_UP_DOWN = "up_down"
VALID_SAMPLING_MODES = [SAMPLING_UP, SAMPLING_UP_DOWN]
PROPAGATION_ADAPTIVE = "adaptive"
PROPAGATION_UNIFORM = "uniform"
VALID_PROPAGATION_MODES = [PROPAGATION_ADAPTIVE, PROPAGATION_UNIFORM]


# ── Edge grouping ────────────────────────────────────────────────────────

def angle_distance(u, mu) -> float:
    u = np.asarray(u, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    nu, nm = float(np.hypot(*u)), float(np.hypot(*mu))
    if nu == 0.0 or nm == 0.0:
        raise DegenerateGeometryError(f"angle_distance of a zero vector: {u.tolist()} vs {mu.tolist()}")
    return float(np.arccos(np.clip(float(u @ mu) / (nu * nm), -1.0, 1.0)))


def _angle_matrix(unit: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    return np.arccos(np.clip(unit @ centroids.T, -1.0, 1.0))


@dataclass(frozen=True, eq=False)
class SubgraphPartition:
    level_id: int
    K: int
    assignment: np.ndarray
    centroids: np.ndarray
    iterations_used: int
    objective_history: list = field(default_factory=list)
    operation_count: int = 0

    def group_edges(self, k: int) -> np.ndarray:
        """Directed-edge indices (into directed_edge_set order) belonging to group k."""
        return np.flatnonzero(self.assignment == k)

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.K)

    def to_dict(self) -> dict:
        return {
            "level_id": self.level_id,
            "K": self.K,
            "assignment": [int(a) for a in self.assignment],
            "centroids": [[float(x), float(y)] for x, y in self.centroids],
            "iterations_used": self.iterations_used,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SubgraphPartition":
        return cls(int(data["level_id"]), int(data["K"]),
                   np.asarray(data["assignment"], dtype=np.int64),
                   np.asarray(data["centroids"], dtype=np.float64).reshape(-1, 2),
                   int(data["iterations_used"]))


def _initial_centroids(unit: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    order = rng.permutation(unit.shape[0])
    chosen, keys = [], set()
    for idx in order:
        key = tuple(np.round(unit[idx], 12))
        if key not in keys:
            keys.add(key)
            chosen.append(int(idx))
            if len(chosen) == K:
                break
    # fewer than K distinct directions: pad with further edges in draw order
    for idx in order:
        if len(chosen) == K:
            break
        if int(idx) not in chosen:
            chosen.append(int(idx))
    return unit[chosen].copy()


def divide_mesh_graph(graph: MeshGraph, K: int, seed: int = 0,
                      max_iterations: int = MAX_ITERATIONS) -> SubgraphPartition:
    """Cluster the 2·|E| directed edges of graph into K direction groups."""
    if K < 1:
        raise ValueError(f"K must be >= 1, got {K}")
    edge_set = directed_edge_set(graph)
    m = len(edge_set)
    if m < K:
        raise ValueError(f"graph has {m} directed edges, fewer than K={K}")

    rng = np.random.default_rng(seed)
    unit = edge_set.displacement / edge_set.length[:, None]
    centroids = _initial_centroids(unit, K, rng)
    rows = np.arange(m)

    previous = None
    history = []
    operations = 0
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        dist = _angle_matrix(unit, centroids)
        assignment = np.argmin(dist, axis=1)
        operations += K * m
        # sum of |e|·(1 - cos θ): non-increasing under mean-vector centroid updates
        history.append(float((edge_set.length * (1.0 - np.cos(dist[rows, assignment]))).sum()))
        if previous is not None and np.array_equal(assignment, previous):
            break
        for k in range(K):
            members = np.flatnonzero(assignment == k)
            if members.size == 0:
                continue
            mean = edge_set.displacement[members].mean(axis=0)
            norm = float(np.hypot(*mean))
            if norm <= 1e-12 * float(edge_set.length[members].max()):
                centroids[k] = unit[members[rng.integers(members.size)]]
            else:
                centroids[k] = mean / norm
        previous = assignment

    sizes = np.bincount(assignment, minlength=K)
    while np.any(sizes == 0):
        empty = int(np.flatnonzero(sizes == 0)[0])
        largest = int(np.argmax(sizes))
        members = np.flatnonzero(assignment == largest)
        spread = _angle_matrix(unit[members], centroids[largest:largest + 1])[:, 0]
        moved = int(members[int(np.argmax(spread))])
        assignment[moved] = empty
        centroids[empty] = unit[moved]
        sizes = np.bincount(assignment, minlength=K)
        logger.debug(f"Level {graph.level_id}: repaired empty group {empty} from group {largest}")

    return SubgraphPartition(graph.level_id, K, assignment, centroids, iterations,
                             history, operations)


# ── Projection and diameters ─────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class ProjectedArea:
    element: int
    nodes: np.ndarray
    directed_edges: np.ndarray


def project_areas(coarse: MeshGraph, fine: MeshGraph, coarse_locator: ElementLocator | None = None) -> np.ndarray:
    """Coarse element index of every fine node (one location pass)."""
    locator = coarse_locator or build_locator(coarse)
    return locate_points(fine.nodes, coarse, locator)


def project_area(element: int, fine: MeshGraph, located: np.ndarray) -> ProjectedArea:
    """Fine nodes located in coarse `element`, with the directed fine edges between them."""
    nodes = np.flatnonzero(located == element)
    edge_set = directed_edge_set(fine)
    inside = (located[edge_set.src] == element) & (located[edge_set.dst] == element)
    return ProjectedArea(int(element), nodes, np.flatnonzero(inside))


def component_diameter(nodes, edges) -> list[int]:
    """Directed hop diameter of each weakly connected component.

    The diameter is the longest finite shortest path along edge directions, the
    distance one group pass carries information. Components are reported in
    order of their smallest node.
    """
    labels_of = sorted({int(n) for n in nodes} | {int(n) for link in edges for n in link})
    index = {node: i for i, node in enumerate(labels_of)}
    links = np.array([(index[int(a)], index[int(b)]) for a, b in edges], dtype=np.int64).reshape(-1, 2)
    n = len(labels_of)
    graph = csr_matrix((np.ones(links.shape[0]), (links[:, 0], links[:, 1])), shape=(n, n))
    _, component = connected_components(graph, directed=True, connection="weak")
    hops = shortest_path(graph, directed=True, unweighted=True)

    diameters = []
    for label in dict.fromkeys(component.tolist()):
        members = np.flatnonzero(component == label)
        sub = hops[np.ix_(members, members)]
        diameters.append(int(sub[np.isfinite(sub)].max()))
    return diameters


# ── Step schedules ───────────────────────────────────────────────────────

@dataclass(frozen=True)
class MPSchedule:
    R: int
    K: int
    steps: dict

    def __post_init__(self):
        for key, value in self.steps.items():
            if value < 1:
                raise ValueError(f"MP steps must be >= 1, got {value} at {key}")

    def get(self, r: int, k: int) -> int:
        return int(self.steps[(r, k)])

    def total(self) -> int:
        return int(sum(self.steps.values()))

    def table(self) -> list[list[int]]:
        return [[self.get(r, k) for k in range(self.K)] for r in range(1, self.R + 1)]

    def scaled(self, factor: int) -> "MPSchedule":
        return MPSchedule(self.R, self.K, {key: v * factor for key, v in self.steps.items()})

    @classmethod
    def from_table(cls, table) -> "MPSchedule":
        R, K = len(table), len(table[0])
        return cls(R, K, {(r + 1, k): int(table[r][k]) for r in range(R) for k in range(K)})

    @classmethod
    def constant(cls, R: int, K: int, value: int = 1) -> "MPSchedule":
        return cls(R, K, {(r, k): value for r in range(1, R + 1) for k in range(K)})


def sampling_passes(R: int, sampling_mode: str = SAMPLING_UP) -> int:
    if sampling_mode not in VALID_SAMPLING_MODES:
        raise ValueError(f"Unknown sampling mode: {sampling_mode}. Valid: {VALID_SAMPLING_MODES}")
    return (R - 1) * (2 if sampling_mode == SAMPLING_UP_DOWN else 1)


def counted_steps(schedule: MPSchedule, sampling_mode: str = SAMPLING_UP) -> int:
    return schedule.total() + sampling_passes(schedule.R, sampling_mode)


def _group_diameter_max(fine: MeshGraph, partition: SubgraphPartition, located: np.ndarray) -> np.ndarray:
    edge_set = directed_edge_set(fine)
    same = located[edge_set.src] == located[edge_set.dst]
    best = np.zeros(partition.K, dtype=np.int64)
    for k in range(partition.K):
        picked = np.flatnonzero(same & (partition.assignment == k))
        by_area = defaultdict(list)
        for idx in picked:
            by_area[int(located[edge_set.src[idx]])].append((int(edge_set.src[idx]), int(edge_set.dst[idx])))
        for links in by_area.values():
            endpoints = {n for link in links for n in link}
            best[k] = max(best[k], max(component_diameter(endpoints, links)))
    return best


def tune_mp_steps(multilevel: MultiLevelMesh, partitions, cap: int | None = None) -> MPSchedule:
    """L^{r,k} = clamp(max component diameter of group k over every projected coarse area, 1, cap)."""
    cap = int(cap or RUNTIME_CONFIG["step_cap"])
    partitions = list(partitions)
    if len(partitions) != multilevel.R:
        raise ValueError(f"need one partition per level ({multilevel.R}), got {len(partitions)}")
    K = partitions[0].K
    steps = {}
    for r in range(1, multilevel.R + 1):
        coarse, fine = multilevel.level(r - 1), multilevel.level(r)
        located = project_areas(coarse, fine)
        best = _group_diameter_max(fine, partitions[r - 1], located)
        for k in range(K):
            steps[(r, k)] = max(1, min(cap, int(best[k])))
        logger.debug(f"Level {r}: raw group diameters {best.tolist()}")
    return MPSchedule(multilevel.R, K, steps)


def _check_budget(R: int, K: int, budget: int, passes: int, cap: int | None) -> int:
    available = int(budget) - int(passes)
    if available < R * K:
        raise ValueError(
            f"step budget {budget} cannot give every one of {R}x{K} groups a step "
            f"after {passes} sampling passes (minimum {R * K + passes})"
        )
    if cap is not None and available > R * K * cap:
        raise ValueError(f"step budget {budget} exceeds {R}x{K} groups at the cap of {cap} steps")
    return available


def _enforce_cap(values: dict, cap: int) -> dict:
    keys = sorted(values)
    while any(values[key] > cap for key in keys):
        over = next(key for key in keys if values[key] > cap)
        values[over] -= 1
        under = min((key for key in keys if values[key] < cap), key=lambda key: (values[key], key))
        values[under] += 1
    return values


def scale_schedule(schedule: MPSchedule, budget: int, passes: int = 0, cap: int | None = None) -> MPSchedule:
    """Rescale tuned steps so they sum to budget - passes, keeping proportions (largest remainder)."""
    cap = int(cap or RUNTIME_CONFIG["step_cap"])
    available = _check_budget(schedule.R, schedule.K, budget, passes, cap)
    keys = sorted(schedule.steps)
    weights = np.array([schedule.steps[key] for key in keys], dtype=np.float64)
    spare = available - len(keys)
    quota = spare * weights / weights.sum()
    base = np.floor(quota).astype(np.int64)
    leftover = spare - int(base.sum())
    # stable sort keeps (r, k) order among equal remainders
    for idx in np.argsort(-(quota - base), kind="stable")[:leftover]:
        base[idx] += 1
    values = {key: 1 + int(b) for key, b in zip(keys, base)}
    return MPSchedule(schedule.R, schedule.K, _enforce_cap(values, cap))


def uniform_schedule(R: int, K: int, budget: int, passes: int = 0, cap: int | None = None) -> MPSchedule:
    """Equal steps per group; the remainder goes to the finest levels' groups round-robin.

    Steps are uncapped unless cap is given.
    """
    available = _check_budget(R, K, budget, passes, cap)
    base, remainder = divmod(available, R * K)
    values = {(r, k): base for r in range(1, R + 1) for k in range(K)}
    for i in range(remainder):
        values[(R - i // K, i % K)] += 1
    return MPSchedule(R, K, values)


def partition_levels(multilevel: MultiLevelMesh, K: int, seed: int = 0) -> list[SubgraphPartition]:
    """One partition per level 1..R, seeded per level."""
    partitions = []
    for r in range(1, multilevel.R + 1):
        level_seed = int(np.random.SeedSequence([int(seed), r]).generate_state(1)[0])
        partitions.append(divide_mesh_graph(multilevel.level(r), K, level_seed))
    return partitions


def describe_schedule(schedule: MPSchedule) -> str:
    rows = ", ".join(f"r{r}={row}" for r, row in enumerate(schedule.table(), start=1))
    return f"MP steps {rows} (total {schedule.total()})"

