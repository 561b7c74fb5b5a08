import math

import numpy as np
import pytest
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path

from app.errors import DegenerateGeometryError
from app.services.adaptive_mp import (
    SAMPLING_UP, SAMPLING_UP_DOWN, MPSchedule, angle_distance, component_diameter, counted_steps,
    divide_mesh_graph, partition_levels, project_area, project_areas, sampling_passes, scale_schedule,
    tune_mp_steps, uniform_schedule,
)
from app.services.mesh_core import MeshGraph, directed_edge_set
from app.services.mesh_hierarchy import GeometrySpec, MultiLevelMesh, brute_force_locate, triangulate

from conftest import grid_edge_graph, strip_fixture


# ── angle_distance ───────────────────────────────────────────────────────

def test_angle_distance_cases():
    assert angle_distance((1.0, 0.0), (0.0, 1.0)) == pytest.approx(math.pi / 2)
    assert angle_distance((2.0, 0.0), (5.0, 0.0)) == pytest.approx(0.0, abs=1e-12)
    assert angle_distance((1.0, 0.0), (1.0, 1.0)) == pytest.approx(math.pi / 4)
    assert angle_distance((1.0, 0.0), (-3.0, 0.0)) == pytest.approx(math.pi)


def test_angle_distance_of_zero_vector():
    with pytest.raises(DegenerateGeometryError):
        angle_distance((0.0, 0.0), (1.0, 0.0))


# ── divide_mesh_graph ────────────────────────────────────────────────────

def _fine_square() -> MeshGraph:
    return triangulate(GeometrySpec(1.0, 1.0), 0.125, seed=2, level_id=1)


def lloyd_oracle(graph: MeshGraph, K: int, seed: int, max_iterations: int = 100) -> np.ndarray:
    """Edge-by-edge Lloyd loop drawing from the generator in the same order as divide_mesh_graph."""
    edge_set = directed_edge_set(graph)
    m = len(edge_set)
    unit = [edge_set.displacement[i] / edge_set.length[i] for i in range(m)]
    rng = np.random.default_rng(seed)
    order = rng.permutation(m)
    chosen, keys = [], set()
    for idx in order:
        key = tuple(np.round(unit[idx], 12))
        if key not in keys:
            keys.add(key)
            chosen.append(int(idx))
            if len(chosen) == K:
                break
    centroids = [unit[i].copy() for i in chosen]

    def angle(u, c):
        return math.acos(max(-1.0, min(1.0, float(u[0] * c[0] + u[1] * c[1]))))

    previous = None
    for _ in range(max_iterations):
        assignment = []
        for u in unit:
            dists = [angle(u, c) for c in centroids]
            assignment.append(dists.index(min(dists)))
        if assignment == previous:
            break
        for k in range(K):
            members = [i for i, a in enumerate(assignment) if a == k]
            if not members:
                continue
            mean = edge_set.displacement[members].mean(axis=0)
            norm = math.hypot(*mean)
            if norm <= 1e-12 * float(edge_set.length[members].max()):
                centroids[k] = unit[members[rng.integers(len(members))]]
            else:
                centroids[k] = mean / norm
        previous = assignment
    return np.array(assignment)


def test_single_group_takes_every_edge():
    graph = _fine_square()
    partition = divide_mesh_graph(graph, 1, seed=0)
    assert np.all(partition.assignment == 0)
    assert partition.assignment.shape[0] == 2 * graph.edge_count


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_axis_grid_splits_into_four_directions(seed):
    graph = grid_edge_graph(4, 4)
    partition = divide_mesh_graph(graph, 4, seed=seed)
    edge_set = directed_edge_set(graph)
    directions = set()
    for k in range(4):
        unit = edge_set.displacement[partition.group_edges(k)]
        assert len({tuple(u) for u in unit}) == 1
        directions.add(tuple(unit[0]))
    assert directions == {(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)}
    assert partition.group_sizes().tolist() == [12, 12, 12, 12]


@pytest.mark.parametrize("K,seed", [(2, 0), (3, 1), (4, 7)])
def test_matches_edge_by_edge_oracle(K, seed):
    graph = _fine_square()
    partition = divide_mesh_graph(graph, K, seed=seed)
    assert np.array_equal(partition.assignment, lloyd_oracle(graph, K, seed))


def _random_rectangle(seed: int) -> MeshGraph:
    rng = np.random.default_rng(seed)
    width, height = rng.uniform(1.0, 2.0, size=2)
    return triangulate(GeometrySpec(float(width), float(height)), min(width, height) / 3.0,
                       seed=seed, level_id=1)


@pytest.mark.parametrize("seed", range(20))
def test_matches_oracle_on_random_meshes(seed):
    graph = _random_rectangle(100 + seed)
    assert graph.edge_count <= 200
    K = 2 + seed % 3
    partition = divide_mesh_graph(graph, K, seed=seed)
    assert np.array_equal(partition.assignment, lloyd_oracle(graph, K, seed))


def test_converged_partition_is_a_fixed_point():
    graph = _fine_square()
    partition = divide_mesh_graph(graph, 3, seed=5)
    assert partition.iterations_used < 100
    edge_set = directed_edge_set(graph)
    unit = edge_set.displacement / edge_set.length[:, None]
    dist = np.arccos(np.clip(unit @ partition.centroids.T, -1.0, 1.0))
    assert np.array_equal(np.argmin(dist, axis=1), partition.assignment)
    np.testing.assert_allclose(np.hypot(*partition.centroids.T), 1.0, atol=1e-12)


def test_objective_never_increases():
    partition = divide_mesh_graph(_fine_square(), 4, seed=3)
    history = np.array(partition.objective_history)
    assert np.all(np.diff(history) <= 1e-9)


def test_operation_count_bound():
    graph = _fine_square()
    partition = divide_mesh_graph(graph, 4, seed=1)
    assert partition.operation_count <= partition.iterations_used * 4 * 2 * graph.edge_count


def test_assignment_unchanged_by_uniform_scaling():
    graph = _fine_square()
    scaled = MeshGraph(graph.nodes * 3.0, graph.edges, graph.elements, graph.level_id)
    a = divide_mesh_graph(graph, 4, seed=8)
    b = divide_mesh_graph(scaled, 4, seed=8)
    assert np.array_equal(a.assignment, b.assignment)


def test_empty_groups_are_repaired():
    # a straight path has only two distinct directions
    path = MeshGraph([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], [[0, 1], [1, 2]], np.zeros((0, 3), dtype=np.int64))
    partition = divide_mesh_graph(path, 3, seed=0)
    sizes = partition.group_sizes()
    assert sizes.sum() == 4
    assert np.all(sizes >= 1)


def test_more_groups_than_edges_rejected():
    single = MeshGraph([[0.0, 0.0], [1.0, 0.0]], [[0, 1]], np.zeros((0, 3), dtype=np.int64))
    with pytest.raises(ValueError, match="fewer than K"):
        divide_mesh_graph(single, 3)
    with pytest.raises(ValueError):
        divide_mesh_graph(single, 0)


def test_partition_round_trips_through_dict():
    partition = divide_mesh_graph(_fine_square(), 3, seed=4)
    restored = type(partition).from_dict(partition.to_dict())
    assert np.array_equal(restored.assignment, partition.assignment)
    np.testing.assert_array_equal(restored.centroids, partition.centroids)


# ── projection and diameters ─────────────────────────────────────────────

def test_component_diameters():
    assert component_diameter([3], []) == [0]
    assert component_diameter(range(5), [(0, 1), (1, 2), (2, 3), (3, 4)]) == [4]
    edges = [(0, 1), (1, 2), (2, 3), (3, 4), (10, 11), (11, 12), (20, 21)]
    assert component_diameter([0, 1, 2, 3, 4, 10, 11, 12, 20, 21], edges) == [4, 2, 1]


def test_component_diameters_follow_edge_direction():
    # two edges into one node: neither tail reaches the other
    assert component_diameter([0, 1, 2], [(0, 2), (1, 2)]) == [1]
    assert component_diameter([0, 1, 2], [(2, 0), (2, 1)]) == [1]
    # opposite chains meeting in the middle
    assert component_diameter(range(5), [(0, 1), (1, 2), (4, 3), (3, 2)]) == [2]
    # a directed cycle needs n - 1 hops to close
    assert component_diameter(range(4), [(0, 1), (1, 2), (2, 3), (3, 0)]) == [3]


def test_projected_areas_partition_fine_nodes(two_level):
    coarse, fine = two_level.level(1), two_level.level(2)
    located = project_areas(coarse, fine)
    seen = []
    for element in range(coarse.element_count):
        area = project_area(element, fine, located)
        seen.extend(area.nodes.tolist())
        edge_set = directed_edge_set(fine)
        for idx in area.directed_edges:
            assert located[edge_set.src[idx]] == element == located[edge_set.dst[idx]]
    assert sorted(seen) == list(range(fine.node_count))


def test_identity_projection_gives_single_triangles():
    fine = _fine_square()
    located = project_areas(fine, fine)
    for element in range(fine.element_count):
        area = project_area(element, fine, located)
        assert set(area.nodes.tolist()) <= set(fine.elements[element].tolist())


def test_strip_group_reaches_diameter_four():
    multilevel, partition = strip_fixture()
    fine = multilevel.level(1)
    edge_set = directed_edge_set(fine)
    links = [(int(edge_set.src[i]), int(edge_set.dst[i])) for i in partition.group_edges(0)]
    endpoints = {n for link in links for n in link}
    assert component_diameter(endpoints, links) == [4, 3, 2]
    schedule = tune_mp_steps(multilevel, [partition])
    assert schedule.get(1, 0) == 4


# ── tune_mp_steps ────────────────────────────────────────────────────────

def tuning_oracle(multilevel: MultiLevelMesh, partitions, cap: int = 16) -> dict:
    """Brute-force location plus all-pairs directed hop counts per coarse element and group."""
    steps = {}
    for r in range(1, multilevel.R + 1):
        coarse, fine = multilevel.level(r - 1), multilevel.level(r)
        located = np.array([brute_force_locate(p, coarse) for p in fine.nodes])
        edge_set = directed_edge_set(fine)
        partition = partitions[r - 1]
        for k in range(partition.K):
            best = 0
            for element in range(coarse.element_count):
                idx = [i for i in partition.group_edges(k)
                       if located[edge_set.src[i]] == element and located[edge_set.dst[i]] == element]
                if not idx:
                    continue
                src, dst = edge_set.src[idx], edge_set.dst[idx]
                n = fine.node_count
                adjacency = csr_matrix((np.ones(len(idx)), (src, dst)), shape=(n, n))
                hops = shortest_path(adjacency, directed=True, unweighted=True)
                nodes = np.unique(np.concatenate([src, dst]))
                sub = hops[np.ix_(nodes, nodes)]
                best = max(best, int(sub[np.isfinite(sub)].max()))
            steps[(r, k)] = max(1, min(cap, best))
    return steps


def test_tuned_steps_match_oracle(two_level, two_level_partitions):
    schedule = tune_mp_steps(two_level, two_level_partitions)
    assert schedule.steps == tuning_oracle(two_level, two_level_partitions)


def test_tuned_steps_match_oracle_on_generated_hierarchy():
    from app.services.dataset_service import beam_conditions
    from app.services.mesh_hierarchy import build_multilevel

    geometry = GeometrySpec(15.0, 30.0)
    graph = triangulate(geometry, 2.5, seed=1, level_id=2)
    multilevel = build_multilevel(geometry, graph, beam_conditions(graph, geometry, 300.0, 0.0), 2, 2.5, seed=1)
    partitions = partition_levels(multilevel, 3, seed=2)
    schedule = tune_mp_steps(multilevel, partitions)
    assert schedule.steps == tuning_oracle(multilevel, partitions)
    assert all(1 <= v <= 16 for v in schedule.steps.values())


@pytest.mark.parametrize("seed", range(5))
def test_identity_levels_give_single_steps(seed):
    fine = _fine_square()
    multilevel = MultiLevelMesh((fine,), MeshGraph(fine.nodes, fine.edges, fine.elements, 0), (),
                                (None,))
    partition = divide_mesh_graph(fine, 4, seed=seed)
    schedule = tune_mp_steps(multilevel, [partition])
    assert schedule.table() == [[1, 1, 1, 1]]


@pytest.mark.parametrize("seed", range(10))
def test_tuned_steps_match_oracle_on_random_hierarchies(seed):
    from app.services.dataset_service import beam_conditions
    from app.services.mesh_hierarchy import build_multilevel

    rng = np.random.default_rng(200 + seed)
    geometry = GeometrySpec(15.0, float(rng.uniform(25.0, 45.0)))
    target = float(rng.uniform(2.0, 3.0))
    graph = triangulate(geometry, target, seed=seed, level_id=2)
    assert graph.node_count <= 500
    conditions = beam_conditions(graph, geometry, 300.0, float(rng.uniform(0.0, 90.0)))
    multilevel = build_multilevel(geometry, graph, conditions, 2, target, seed=seed)
    partitions = partition_levels(multilevel, 2 + seed % 3, seed=seed)
    assert tune_mp_steps(multilevel, partitions).steps == tuning_oracle(multilevel, partitions)


def test_tuned_steps_survive_fine_node_relabeling(two_level, two_level_partitions):
    fine = two_level.level(2)
    perm = np.random.default_rng(3).permutation(fine.node_count)
    nodes = np.empty_like(fine.nodes)
    nodes[perm] = fine.nodes
    shuffled = MeshGraph(nodes, perm[fine.edges], perm[fine.elements], fine.level_id)
    relabeled = MultiLevelMesh((two_level.level(1), shuffled), two_level.auxiliary_level, (),
                               two_level.conditions)
    assert (tune_mp_steps(relabeled, two_level_partitions).steps
            == tune_mp_steps(two_level, two_level_partitions).steps)


def test_cap_limits_steps():
    multilevel, partition = strip_fixture()
    assert tune_mp_steps(multilevel, [partition], cap=2).get(1, 0) == 2


def test_partition_count_must_match_levels(two_level, two_level_partitions):
    with pytest.raises(ValueError, match="one partition per level"):
        tune_mp_steps(two_level, two_level_partitions[:1])


# ── schedules and budgets ────────────────────────────────────────────────

def test_schedule_rejects_non_positive_steps():
    with pytest.raises(ValueError):
        MPSchedule(1, 2, {(1, 0): 1, (1, 1): 0})


def test_step_accounting_counts_sampling_passes():
    schedule = MPSchedule.from_table([[1, 2], [3, 4], [5, 6]])
    assert sampling_passes(3, SAMPLING_UP) == 2
    assert sampling_passes(3, SAMPLING_UP_DOWN) == 4
    assert counted_steps(schedule, SAMPLING_UP) == 23
    assert counted_steps(schedule, SAMPLING_UP_DOWN) == 25
    assert sampling_passes(1, SAMPLING_UP_DOWN) == 0
    with pytest.raises(ValueError):
        sampling_passes(2, "sideways")


def test_scaled_schedule_meets_budget_and_keeps_proportions():
    tuned = MPSchedule.from_table([[2, 2], [4, 4], [8, 8]])
    scaled = scale_schedule(tuned, 40, passes=2)
    assert scaled.total() == 38
    assert counted_steps(scaled, SAMPLING_UP) == 40
    table = scaled.table()
    assert table[0][0] <= table[1][0] <= table[2][0]
    assert all(1 <= v <= 16 for row in table for v in row)


def test_scaled_schedule_respects_cap():
    tuned = MPSchedule.from_table([[1, 1], [1, 30]])
    scaled = scale_schedule(tuned, 40, cap=16)
    assert scaled.total() == 40
    assert max(scaled.steps.values()) <= 16


def test_uniform_schedule_remainder_goes_to_finest_level():
    schedule = uniform_schedule(3, 2, 15, passes=2)
    assert schedule.total() == 13
    assert schedule.table() == [[2, 2], [2, 2], [3, 2]]
    assert uniform_schedule(1, 1, 50).table() == [[50]]


def test_budget_too_small_rejected():
    with pytest.raises(ValueError, match="step budget"):
        uniform_schedule(3, 4, 13, passes=2)
    with pytest.raises(ValueError, match="step budget"):
        scale_schedule(MPSchedule.constant(2, 2), 100, cap=16)
