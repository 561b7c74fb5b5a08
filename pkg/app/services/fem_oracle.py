"""Plane-stress linear elasticity on constant-strain triangles.

Produces the ground-truth displacement and von Mises stress fields the
surrogate is trained on.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix, diags
from scipy.sparse.linalg import LinearOperator, cg, splu

from app.errors import DegenerateGeometryError, RigidBodyModeError, SolverError
from app.services.mesh_core import MeshGraph, NodeConditions

logger = logging.getLogger(__name__)

DIRECT_SOLVER_NODE_LIMIT = 5000
RESIDUAL_TOLERANCE = 1e-10
SOLVER_DIRECT = "direct"
SOLVER_CG = "cg"


@dataclass(frozen=True)
class Material:
    E: float = 210000.0
    nu: float = 0.3
    thickness: float = 1.0

    def __post_init__(self):
        if not self.E > 0:
            raise ValueError(f"Young's modulus must be positive, got {self.E}")
        if not 0.0 <= self.nu < 0.5:
            raise ValueError(f"Poisson ratio must be in [0, 0.5), got {self.nu}")
        if not self.thickness > 0:
            raise ValueError(f"Thickness must be positive, got {self.thickness}")

    def constitutive(self) -> np.ndarray:
        c = self.E / (1.0 - self.nu ** 2)
        return c * np.array([
            [1.0, self.nu, 0.0],
            [self.nu, 1.0, 0.0],
            [0.0, 0.0, (1.0 - self.nu) / 2.0],
        ])

    def to_dict(self) -> dict:
        return {"E": self.E, "nu": self.nu, "thickness": self.thickness}


@dataclass(frozen=True, eq=False)
class FemSolution:
    displacement: np.ndarray
    stress: np.ndarray
    von_mises: np.ndarray
    reactions: np.ndarray
    iterations: int
    residual: float
    method: str

    def response(self) -> np.ndarray:
        """Per-node [ux, uy, von_mises] rows, the mesh-file "response" layout."""
        return np.column_stack([self.displacement, self.von_mises])


# ── Element matrices ─────────────────────────────────────────────────────

def strain_displacement(graph: MeshGraph) -> tuple[np.ndarray, np.ndarray]:
    """B matrices (e, 3, 6) and areas of every element."""
    xy = graph.nodes[graph.elements]
    x, y = xy[:, :, 0], xy[:, :, 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    twice_area = b[:, 0] * c[:, 1] - b[:, 1] * c[:, 0]
    bad = np.flatnonzero(twice_area <= 0.0)
    if bad.size:
        raise DegenerateGeometryError(
            f"element {int(bad[0])} has non-positive area {0.5 * float(twice_area[bad[0]]):.3e}"
        )
    B = np.zeros((graph.element_count, 3, 6))
    B[:, 0, 0::2] = b
    B[:, 1, 1::2] = c
    B[:, 2, 0::2] = c
    B[:, 2, 1::2] = b
    B /= twice_area[:, None, None]
    return B, 0.5 * twice_area


def element_stiffness(graph: MeshGraph, material: Material) -> np.ndarray:
    """t·A·BᵀDB for every element, shape (e, 6, 6)."""
    B, area = strain_displacement(graph)
    D = material.constitutive()
    return material.thickness * area[:, None, None] * np.einsum("eji,jk,ekl->eil", B, D, B)


def element_dofs(graph: MeshGraph) -> np.ndarray:
    e = graph.elements
    return np.stack([2 * e[:, 0], 2 * e[:, 0] + 1, 2 * e[:, 1], 2 * e[:, 1] + 1,
                     2 * e[:, 2], 2 * e[:, 2] + 1], axis=1)


def assemble(graph: MeshGraph, material: Material = Material()) -> csr_matrix:
    """Global 2|V| x 2|V| stiffness matrix."""
    ke = element_stiffness(graph, material)
    dofs = element_dofs(graph)
    rows = np.repeat(dofs, 6, axis=1).ravel()
    cols = np.tile(dofs, (1, 6)).ravel()
    size = 2 * graph.node_count
    return coo_matrix((ke.ravel(), (rows, cols)), shape=(size, size)).tocsr()


# ── Loads and constraints ────────────────────────────────────────────────

def constrained_dofs_from(conditions: NodeConditions) -> np.ndarray:
    fixed = np.flatnonzero(conditions.fixed)
    return np.sort(np.concatenate([2 * fixed, 2 * fixed + 1]))


def rigid_modes_left(graph: MeshGraph, fixed: np.ndarray) -> int:
    """Number of in-plane rigid motions (x, y translation, rotation) the constraints leave free."""
    fixed = np.asarray(fixed, dtype=np.int64)
    if fixed.size == 0:
        return 3
    centered = graph.nodes - graph.nodes.mean(axis=0)
    node, axis = fixed // 2, fixed % 2
    x, y = centered[node, 0], centered[node, 1]
    # rows: each rigid mode's motion at a constrained dof
    motion = np.column_stack([axis == 0, axis == 1, np.where(axis == 0, -y, x)]).astype(np.float64)
    scale = max(float(np.abs(centered).max()), 1.0)
    return 3 - int(np.linalg.matrix_rank(motion / [1.0, 1.0, scale], tol=1e-9))


def edge_traction_loads(graph: MeshGraph, nodes, total_force) -> np.ndarray:
    """Consistent nodal loads for a uniform traction along a straight run of boundary nodes.

    Each segment between consecutive nodes carries total_force·(segment/length),
    half to either end.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    total_force = np.asarray(total_force, dtype=np.float64)
    loads = np.zeros((graph.node_count, 2))
    if nodes.size < 2:
        loads[nodes] = total_force
        return loads
    pts = graph.nodes[nodes]
    axis = pts[-1] - pts[0] if np.any(pts[-1] != pts[0]) else np.array([1.0, 0.0])
    order = nodes[np.argsort(pts @ axis, kind="stable")]
    ordered = graph.nodes[order]
    seg = np.hypot(*np.diff(ordered, axis=0).T)
    length = float(seg.sum())
    if length == 0.0:
        raise DegenerateGeometryError("traction edge has zero length")
    for i, s in enumerate(seg):
        share = total_force * (s / length) / 2.0
        loads[order[i]] += share
        loads[order[i + 1]] += share
    return loads


def reaction_forces(stiffness, displacement: np.ndarray, loads: np.ndarray,
                    constrained_dofs: np.ndarray) -> np.ndarray:
    """Support reactions (n, 2); zero on unconstrained dofs."""
    full = stiffness @ displacement.ravel() - loads.ravel()
    reactions = np.zeros_like(full)
    reactions[constrained_dofs] = full[constrained_dofs]
    return reactions.reshape(-1, 2)


def von_mises(stress: np.ndarray) -> np.ndarray:
    sxx, syy, txy = stress[:, 0], stress[:, 1], stress[:, 2]
    return np.sqrt(np.maximum(sxx * sxx - sxx * syy + syy * syy + 3.0 * txy * txy, 0.0))


def nodal_stress(graph: MeshGraph, displacement: np.ndarray, material: Material) -> np.ndarray:
    """Area-weighted average of the incident element stresses, per node."""
    B, area = strain_displacement(graph)
    u_e = displacement.ravel()[element_dofs(graph)]
    sigma = np.einsum("ij,ejk,ek->ei", material.constitutive(), B, u_e)
    acc = np.zeros((graph.node_count, 3))
    weight = np.zeros(graph.node_count)
    for corner in range(3):
        np.add.at(acc, graph.elements[:, corner], area[:, None] * sigma)
        np.add.at(weight, graph.elements[:, corner], area)
    return np.divide(acc, weight[:, None], out=np.zeros_like(acc), where=weight[:, None] > 0)


# ── Solve ────────────────────────────────────────────────────────────────

def _direct_solve(matrix, rhs: np.ndarray) -> tuple[np.ndarray, int]:
    try:
        lu = splu(matrix.tocsc())
    except RuntimeError as e:
        raise RigidBodyModeError(f"stiffness matrix is singular after constraints: {e}") from e
    u = lu.solve(rhs)
    refinements = 0
    norm = np.linalg.norm(rhs)
    while refinements < 3 and np.linalg.norm(matrix @ u - rhs) >= RESIDUAL_TOLERANCE * norm:
        u = u + lu.solve(rhs - matrix @ u)
        refinements += 1
    return u, refinements


def _cg_solve(matrix, rhs: np.ndarray) -> tuple[np.ndarray, int]:
    diagonal = matrix.diagonal()
    if np.any(diagonal <= 0):
        raise RigidBodyModeError("stiffness matrix has a non-positive diagonal entry after constraints")
    preconditioner = diags(1.0 / diagonal)
    M = LinearOperator(matrix.shape, matvec=lambda x: preconditioner @ x)
    iterations = 0

    def count(_):
        nonlocal iterations
        iterations += 1

    maxiter = 10 * matrix.shape[0]
    u, info = cg(matrix, rhs, rtol=RESIDUAL_TOLERANCE, maxiter=maxiter, M=M, callback=count)
    if info > 0:
        raise SolverError(f"conjugate gradient did not converge in {maxiter} iterations")
    if info < 0:
        raise SolverError(f"conjugate gradient breakdown (info={info})")
    return u, iterations


def solve(graph: MeshGraph, conditions: NodeConditions, material: Material = Material(),
          stiffness=None, constrained_dofs=None) -> FemSolution:
    """Static displacement and nodal stress for the given loads and supports."""
    n = graph.node_count
    K = assemble(graph, material) if stiffness is None else csr_matrix(stiffness)
    fixed = constrained_dofs_from(conditions) if constrained_dofs is None else np.unique(constrained_dofs)
    if fixed.size < 3:
        raise RigidBodyModeError(f"only {fixed.size} constrained degrees of freedom; at least 3 are required")
    free_modes = rigid_modes_left(graph, fixed)
    if free_modes:
        raise RigidBodyModeError(
            f"constraints on {fixed.size} degrees of freedom leave {free_modes} rigid-body mode(s) free; "
            "x, y and rotation must all be held"
        )
    free = np.setdiff1d(np.arange(2 * n), fixed)
    loads = conditions.force
    f = loads.ravel()

    u = np.zeros(2 * n)
    iterations, residual = 0, 0.0
    method = SOLVER_DIRECT if n <= DIRECT_SOLVER_NODE_LIMIT else SOLVER_CG
    rhs = f[free]
    if np.any(rhs != 0.0):
        K_ff = K[free][:, free]
        if method == SOLVER_DIRECT:
            u_free, iterations = _direct_solve(K_ff, rhs)
        else:
            u_free, iterations = _cg_solve(K_ff, rhs)
        if not np.all(np.isfinite(u_free)):
            raise RigidBodyModeError("solution is not finite; the structure is under-constrained")
        residual = float(np.linalg.norm(K_ff @ u_free - rhs) / np.linalg.norm(rhs))
        if residual >= RESIDUAL_TOLERANCE:
            raise SolverError(f"relative residual {residual:.3e} above {RESIDUAL_TOLERANCE:g}")
        u[free] = u_free

    displacement = u.reshape(n, 2)
    stress = nodal_stress(graph, displacement, material)
    reactions = reaction_forces(K, displacement, loads, fixed)
    logger.debug(f"FEM solve ({method}) on {n} nodes: residual {residual:.2e}, {iterations} iterations")
    return FemSolution(displacement, stress, von_mises(stress), reactions, iterations, residual, method)
