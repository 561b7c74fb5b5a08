import os

import numpy as np
import pytest

from app.services.adaptive_mp import SubgraphPartition, divide_mesh_graph
from app.services.dataset_service import beam_conditions, desk_spec, gen_dataset
from app.services.mesh_core import MeshGraph, NodeConditions, directed_edge_set, mesh_from_elements
from app.services.mesh_hierarchy import (
    GeometrySpec, MultiLevelMesh, build_locator, build_upsampling_edges, cross_edges_from_pairs,
    interpolate_conditions, triangulate,
)
from app.services.training_service import RunConfig, train


def unit_square_coarse(offset=(0.0, 0.0)) -> MeshGraph:
    nodes = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]) + np.asarray(offset)
    return mesh_from_elements(nodes, [[0, 1, 2], [0, 2, 3]], level_id=1)


def two_level_mesh(offset=(0.0, 0.0), reference: MultiLevelMesh | None = None) -> MultiLevelMesh:
    """9-node unit-square mesh under a 2-triangle coarse square, loaded on top, clamped at the bottom.

    With reference given, the cross-edge pairs are copied from it so a translated
    copy has exactly the same connectivity.
    """
    base = triangulate(GeometrySpec(1.0, 1.0), 0.5, seed=3, level_id=2)
    fine = base.translated(offset)
    coarse = unit_square_coarse(offset)
    aux = mesh_from_elements(np.array([[-1.0, -1.0], [3.0, -1.0], [-1.0, 3.0]]) + np.asarray(offset),
                             [[0, 1, 2]], level_id=0)
    fine_conditions = beam_conditions(base, GeometrySpec(1.0, 1.0), 10.0, 30.0)
    coarse_conditions = interpolate_conditions(base, fine_conditions, unit_square_coarse(), build_locator(base))
    if reference is None:
        cross = build_upsampling_edges(coarse, fine, build_locator(coarse), 1)
    else:
        old = reference.cross(1)
        cross = cross_edges_from_pairs(1, old.src, old.dst, coarse, fine)
    return MultiLevelMesh((coarse, fine), aux, (cross,), (coarse_conditions, fine_conditions))


def random_two_level(seed: int) -> MultiLevelMesh:
    """Rectangle of at most 30 fine nodes under a 2-triangle coarse rectangle, random sides and load angle."""
    rng = np.random.default_rng(seed)
    width, height = (float(v) for v in rng.uniform(1.0, 1.5, size=2))
    geometry = GeometrySpec(width, height)
    fine = triangulate(geometry, min(width, height) / 3.0, seed=seed, level_id=2)
    corners = np.array([[0.0, 0.0], [width, 0.0], [width, height], [0.0, height]])
    coarse = mesh_from_elements(corners, [[0, 1, 2], [0, 2, 3]], level_id=1)
    aux = mesh_from_elements(np.array([[-1.0, -1.0], [4.0 * width, -1.0], [-1.0, 4.0 * height]]),
                             [[0, 1, 2]], level_id=0)
    fine_conditions = beam_conditions(fine, geometry, 10.0, float(rng.uniform(-60.0, 60.0)))
    coarse_conditions = interpolate_conditions(fine, fine_conditions, coarse, build_locator(fine))
    cross = build_upsampling_edges(coarse, fine, build_locator(coarse), 1)
    return MultiLevelMesh((coarse, fine), aux, (cross,), (coarse_conditions, fine_conditions))


def grid_edge_graph(nx: int = 4, ny: int = 4, spacing: float = 1.0) -> MeshGraph:
    """Axis-aligned grid: horizontal and vertical edges only, no elements."""
    nodes = np.array([[i * spacing, j * spacing] for j in range(ny) for i in range(nx)])
    edges = []
    for j in range(ny):
        for i in range(nx):
            idx = j * nx + i
            if i + 1 < nx:
                edges.append([idx, idx + 1])
            if j + 1 < ny:
                edges.append([idx, idx + nx])
    return MeshGraph(nodes, np.array(edges), np.zeros((0, 3), dtype=np.int64))


def strip_fixture() -> tuple[MultiLevelMesh, SubgraphPartition]:
    """Three rows of 5/4/3 fine nodes under one auxiliary triangle.

    Group 0 holds the +x horizontal edges: three paths with hop diameters 4, 3 and 2.
    """
    rows = [[(x, 0.0) for x in range(5)],
            [(x + 0.5, 1.0) for x in range(4)],
            [(x + 1.0, 2.0) for x in range(3)]]
    nodes = np.array([p for row in rows for p in row], dtype=np.float64)
    elements = []
    for i in range(4):
        elements.append([i, i + 1, 5 + i])
    for i in range(3):
        elements.append([i + 1, 6 + i, 5 + i])
    for i in range(3):
        elements.append([5 + i, 6 + i, 9 + i])
    for i in range(2):
        elements.append([6 + i, 10 + i, 9 + i])
    fine = mesh_from_elements(nodes, elements, level_id=1)
    aux = mesh_from_elements(np.array([[-1.0, -1.0], [6.0, -1.0], [2.0, 5.0]]), [[0, 1, 2]], level_id=0)
    edge_set = directed_edge_set(fine)
    plus_x = (edge_set.displacement[:, 1] == 0.0) & (edge_set.displacement[:, 0] > 0.0)
    assignment = np.where(plus_x, 0, 1).astype(np.int64)
    partition = SubgraphPartition(1, 2, assignment, np.array([[1.0, 0.0], [-1.0, 0.0]]), 0)
    multilevel = MultiLevelMesh((fine,), aux, (), (NodeConditions.empty(fine.node_count),))
    return multilevel, partition


@pytest.fixture
def two_level():
    return two_level_mesh()


@pytest.fixture
def two_level_partitions(two_level):
    return [divide_mesh_graph(two_level.level(r), 2, seed=r) for r in (1, 2)]


@pytest.fixture(scope="session")
def tiny_spec():
    return desk_spec(name="beam_tiny", height=60.0, center_counts=(1, 3), angles=(0.0,),
                     split=(0.4, 0.3, 0.3))


@pytest.fixture(scope="session")
def tiny_dataset(tiny_spec, tmp_path_factory):
    out = tmp_path_factory.mktemp("dataset")
    return gen_dataset(tiny_spec, str(out), workers=2)


@pytest.fixture(scope="session")
def tiny_run_config():
    return RunConfig(name="tiny", epochs=1, latent=8, hidden=8, seeds=(0,), total_steps=16)


@pytest.fixture(scope="session")
def tiny_checkpoint(tiny_dataset, tiny_run_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    result = train(tiny_dataset, tiny_run_config, str(out), seed=0)
    assert os.path.exists(result.checkpoint_path)
    return result.checkpoint_path
