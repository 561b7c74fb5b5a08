"""Beam dataset generation: a grid of hole positions x load angles, each sample
meshed, coarsened, partitioned, step-tuned and solved with the FEM oracle.
"""

import itertools
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from app.config import worker_count
from app.errors import MeshsimError, SampleGenerationError
from app.services.adaptive_mp import (
    MPSchedule, SubgraphPartition, partition_levels, tune_mp_steps,
)
from app.services.fem_oracle import Material, solve
from app.services.mesh_core import MeshGraph, NodeConditions, boundary_nodes, read_mesh_with_response, write_mesh
from app.services.mesh_hierarchy import (
    HOLE_SHAPE_CIRCLE, GeometrySpec, HoleSpec, MultiLevelMesh, build_multilevel,
    level_file_name, load_hierarchy, save_hierarchy, triangulate,
)
from app.services.network import Normalizer

logger = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
SPLIT_TRAIN = "train"
SPLIT_VAL = "val"
SPLIT_TEST = "test"
VALID_SPLITS = [SPLIT_TRAIN, SPLIT_VAL, SPLIT_TEST]
TARGET_FIELD = "von_mises"
SECOND_HOLE_ATTEMPTS = 200


# ── Specs ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class DatasetSpec:
    name: str = "beam"
    width: float = 15.0
    height: float = 100.0
    hole_shape: str = HOLE_SHAPE_CIRCLE
    hole_diameter: float = 5.0
    center_start: tuple[float, float] = (4.5, 10.0)
    center_step: tuple[float, float] = (2.0, 20.0)
    center_counts: tuple[int, int] = (4, 5)
    two_holes: bool = False
    angles: tuple[float, ...] = (-60.0, 0.0, 60.0)
    forces: tuple[float, ...] = (300.0,)
    force_line: float | None = None
    target_edge_length: float = 2.0
    R: int = 3
    K: int = 4
    coarsening_factor: float = 2.0
    seed: int = 0
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    E: float = 210000.0
    nu: float = 0.3
    thickness: float = 1.0

    def validate(self) -> None:
        if abs(sum(self.split) - 1.0) > 1e-9 or any(s < 0 for s in self.split):
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {self.split}")
        if min(self.center_counts) < 1 or not self.angles or not self.forces:
            raise ValueError("dataset needs at least one hole position, angle and force")
        if self.force_line is not None and not 0.0 < self.force_line <= self.height:
            raise ValueError(f"force_line must lie in (0, {self.height}], got {self.force_line}")
        self.material()
        for center in self.centers():
            GeometrySpec(self.width, self.height,
                         (HoleSpec(self.hole_shape, center, self.hole_diameter),)).validate()

    def material(self) -> Material:
        return Material(self.E, self.nu, self.thickness)

    def centers(self) -> list[tuple[float, float]]:
        (x0, y0), (dx, dy), (nx, ny) = self.center_start, self.center_step, self.center_counts
        return [(x0 + i * dx, y0 + j * dy) for i in range(nx) for j in range(ny)]

    def sample_count(self) -> int:
        return len(self.centers()) * len(self.angles) * len(self.forces)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetSpec":
        fields = {}
        for key, value in data.items():
            if key not in cls.__dataclass_fields__:
                raise ValueError(f"Unknown DatasetSpec field: {key}")
            fields[key] = tuple(value) if isinstance(value, list) else value
        return cls(**fields)


def desk_spec(**overrides) -> DatasetSpec:
    return replace(DatasetSpec(), **overrides)


def full_scale_spec(**overrides) -> DatasetSpec:
    base = DatasetSpec(name="beam_full_scale", center_start=(5.0, 5.0), center_step=(2.5, 2.5),
                       center_counts=(3, 37), angles=(-60.0, -30.0, 0.0, 30.0, 60.0))
    return replace(base, **overrides)


VARIANT_SPECS = {
    "default": lambda: desk_spec(),
    "full": lambda: full_scale_spec(),
    "square": lambda: desk_spec(name="beam_square", hole_shape="square"),
    "hexagon": lambda: desk_spec(name="beam_hexagon", hole_shape="hexagon"),
    "shifted": lambda: desk_spec(name="beam_shifted", center_start=(6.25, 6.25),
                                 center_step=(2.5, 2.5), center_counts=(2, 36)),
    "two_holes": lambda: desk_spec(name="beam_two_holes", two_holes=True),
    "diameter_4": lambda: desk_spec(name="beam_d4", hole_diameter=4.0, target_edge_length=1.5),
    "diameter_6": lambda: desk_spec(name="beam_d6", hole_diameter=6.0),
    "wide_angles": lambda: desk_spec(name="beam_wide_angles",
                                     angles=(-75.0, -45.0, -15.0, 15.0, 45.0, 75.0)),
    "force_270": lambda: desk_spec(name="beam_f270", forces=(270.0,)),
    "force_330": lambda: desk_spec(name="beam_f330", forces=(330.0,)),
    "force_line_90": lambda: desk_spec(name="beam_line90", force_line=90.0,
                                       center_counts=(4, 4)),
}


def variant_spec(name: str) -> DatasetSpec:
    if name not in VARIANT_SPECS:
        raise ValueError(f"Unknown dataset variant: {name}. Valid: {sorted(VARIANT_SPECS)}")
    return VARIANT_SPECS[name]()


@dataclass(frozen=True)
class SampleSpec:
    index: int
    holes: tuple[HoleSpec, ...]
    angle: float
    force: float

    def geometry(self, spec: DatasetSpec) -> GeometrySpec:
        return GeometrySpec(spec.width, spec.height, self.holes)

    def to_dict(self) -> dict:
        return {"index": self.index, "holes": [h.to_dict() for h in self.holes],
                "angle": self.angle, "force": self.force}

    @classmethod
    def from_dict(cls, data: dict) -> "SampleSpec":
        return cls(int(data["index"]), tuple(HoleSpec.from_dict(h) for h in data["holes"]),
                   float(data["angle"]), float(data["force"]))


def sample_seed(spec: DatasetSpec, index: int) -> int:
    return int(np.random.SeedSequence([int(spec.seed), int(index)]).generate_state(1)[0])


def _second_hole(spec: DatasetSpec, first: HoleSpec, rng: np.random.Generator) -> HoleSpec:
    hx, hy = first.half_extent
    for _ in range(SECOND_HOLE_ATTEMPTS):
        center = (rng.uniform(hx + spec.target_edge_length, spec.width - hx - spec.target_edge_length),
                  rng.uniform(hy + spec.target_edge_length, spec.height - hy - spec.target_edge_length))
        hole = HoleSpec(spec.hole_shape, center, spec.hole_diameter)
        gap = math.dist(center, first.center) - hole.bounding_radius - first.bounding_radius
        if gap > spec.target_edge_length:
            return hole
    raise SampleGenerationError("could not place a second non-overlapping hole",
                                {"first_hole": first.to_dict()})


def enumerate_samples(spec: DatasetSpec) -> list[SampleSpec]:
    """Hole positions x angles x forces, in that nesting order."""
    samples = []
    combos = itertools.product(spec.centers(), spec.angles, spec.forces)
    for index, (center, angle, force) in enumerate(combos):
        holes = (HoleSpec(spec.hole_shape, center, spec.hole_diameter),)
        if spec.two_holes:
            rng = np.random.default_rng(sample_seed(spec, index))
            holes = holes + (_second_hole(spec, holes[0], rng),)
        samples.append(SampleSpec(index, holes, float(angle), float(force)))
    return samples


# ── Boundary conditions ──────────────────────────────────────────────────

def beam_conditions(graph: MeshGraph, geometry: GeometrySpec, force: float, angle: float,
                    force_line: float | None = None, tolerance: float | None = None) -> NodeConditions:
    """Bottom edge clamped; force F at angle (degrees from +x) split evenly over the loaded nodes."""
    y = graph.nodes[:, 1]
    eps = 1e-9 * geometry.height
    if force_line is None:
        loaded = np.flatnonzero(np.abs(y - geometry.height) <= eps)
    else:
        band = tolerance if tolerance is not None else 0.5
        loaded = np.flatnonzero(np.abs(y - force_line) <= band)
    fixed_nodes = np.flatnonzero(np.abs(y) <= eps)
    if loaded.size == 0:
        raise ValueError(f"no nodes on the load line y={force_line if force_line is not None else geometry.height}")
    if fixed_nodes.size == 0:
        raise ValueError("no nodes on the clamped edge y=0")

    n = graph.node_count
    theta = math.radians(angle)
    forces = np.zeros((n, 2))
    forces[loaded] = np.array([math.cos(theta), math.sin(theta)]) * (force / loaded.size)
    fixed = np.zeros(n, dtype=np.int64)
    fixed[fixed_nodes] = 1
    forces[fixed_nodes] = 0.0
    boundary = np.zeros(n, dtype=np.int64)
    boundary[boundary_nodes(graph)] = 1
    boundary[loaded] = 1
    boundary[fixed_nodes] = 1
    return NodeConditions(boundary, fixed, forces)


# ── Samples ──────────────────────────────────────────────────────────────

@dataclass(eq=False)
class Sample:
    spec: SampleSpec
    multilevel: MultiLevelMesh
    partitions: list
    schedule: MPSchedule
    response: np.ndarray

    @property
    def graph(self) -> MeshGraph:
        return self.multilevel.level(self.multilevel.R)

    @property
    def conditions(self) -> NodeConditions:
        return self.multilevel.conditions_at(self.multilevel.R)

    @property
    def target(self) -> np.ndarray:
        return self.response[:, 2:3]


def build_structures(spec: DatasetSpec, sample: SampleSpec, graph: MeshGraph,
                      conditions: NodeConditions, R: int, K: int, seed: int):
    geometry = sample.geometry(spec)
    multilevel = build_multilevel(geometry, graph, conditions, R, spec.target_edge_length,
                                  spec.coarsening_factor, seed)
    partitions = partition_levels(multilevel, K, seed)
    schedule = tune_mp_steps(multilevel, partitions)
    return multilevel, partitions, schedule


def generate_sample(spec: DatasetSpec, sample: SampleSpec) -> Sample:
    seed = sample_seed(spec, sample.index)
    try:
        geometry = sample.geometry(spec)
        graph = triangulate(geometry, spec.target_edge_length, seed, level_id=spec.R)
        conditions = beam_conditions(graph, geometry, sample.force, sample.angle, spec.force_line,
                                     spec.target_edge_length / 2.0)
        solution = solve(graph, conditions, spec.material())
        multilevel, partitions, schedule = build_structures(spec, sample, graph, conditions,
                                                             spec.R, spec.K, seed)
    except (MeshsimError, ValueError, RuntimeError) as e:
        if isinstance(e, SampleGenerationError):
            raise
        raise SampleGenerationError(f"{type(e).__name__}: {e}", sample.to_dict()) from e
    logger.debug(f"Sample {sample.index}: {graph.node_count} nodes, steps {schedule.table()}")
    return Sample(sample, multilevel, partitions, schedule, solution.response())


def prepare_sample(spec: DatasetSpec, sample: Sample, R: int, K: int) -> Sample:
    """The sample as a model with (R, K) needs it; rebuilds coarse levels, partitions and steps when they differ."""
    if sample.multilevel.R == R and sample.partitions[0].K == K:
        return sample
    seed = sample_seed(spec, sample.spec.index)
    graph = sample.graph
    multilevel, partitions, schedule = build_structures(
        spec, sample.spec, MeshGraph(graph.nodes, graph.edges, graph.elements, R),
        sample.conditions, R, K, seed)
    return Sample(sample.spec, multilevel, partitions, schedule, sample.response)


# ── Dataset ──────────────────────────────────────────────────────────────

@dataclass(eq=False)
class Dataset:
    spec: DatasetSpec
    samples: list
    splits: dict
    normalizer: Normalizer
    metadata: dict = field(default_factory=dict)
    path: str | None = None

    def split(self, name: str) -> list:
        if name not in VALID_SPLITS:
            raise ValueError(f"Unknown split: {name}. Valid: {VALID_SPLITS}")
        return [self.samples[i] for i in self.splits[name]]


def split_indices(count: int, fractions, seed: int) -> dict:
    """Shuffled, disjoint and exhaustive train/val/test index lists."""
    order = np.random.default_rng(seed).permutation(count)
    n_train = int(math.floor(count * fractions[0] + 0.5))
    n_val = min(count - n_train, int(math.floor(count * fractions[1] + 0.5)))
    return {
        SPLIT_TRAIN: sorted(int(i) for i in order[:n_train]),
        SPLIT_VAL: sorted(int(i) for i in order[n_train:n_train + n_val]),
        SPLIT_TEST: sorted(int(i) for i in order[n_train + n_val:]),
    }


def fit_normalizer(samples: list) -> Normalizer:
    return Normalizer.fit([s.conditions.force for s in samples], [s.target for s in samples])


def gen_dataset(spec: DatasetSpec, out_dir=None, workers: int | None = None) -> Dataset:
    """Generate every sample of spec; writes the dataset when out_dir is given."""
    spec.validate()
    sample_specs = enumerate_samples(spec)
    logger.info(f"Generating {len(sample_specs)} samples for dataset '{spec.name}'")
    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        samples = list(pool.map(lambda s: generate_sample(spec, s), sample_specs))

    splits = split_indices(len(samples), spec.split, spec.seed)
    normalizer = fit_normalizer([samples[i] for i in splits[SPLIT_TRAIN]] or samples)
    node_counts = [s.graph.node_count for s in samples]
    metadata = {
        "target": TARGET_FIELD,
        "material": spec.material().to_dict(),
        "sample_count": len(samples),
        "node_count_min": min(node_counts),
        "node_count_max": max(node_counts),
        "node_count_mean": float(np.mean(node_counts)),
    }
    dataset = Dataset(spec, samples, splits, normalizer, metadata)
    if out_dir is not None:
        save_dataset(dataset, out_dir)
    logger.info(f"Dataset '{spec.name}': {len(samples)} samples, "
                f"{len(splits[SPLIT_TRAIN])}/{len(splits[SPLIT_VAL])}/{len(splits[SPLIT_TEST])} split")
    return dataset


def _sample_dir(index: int) -> str:
    return os.path.join("samples", f"sample_{index:04d}")


def save_dataset(dataset: Dataset, out_dir) -> str:
    out_dir = str(out_dir)
    entries = []
    for sample in dataset.samples:
        rel = _sample_dir(sample.spec.index)
        directory = os.path.join(out_dir, rel)
        save_hierarchy(sample.multilevel, directory)
        R = sample.multilevel.R
        write_mesh(sample.graph, sample.conditions, os.path.join(directory, level_file_name(R)),
                   response=sample.response)
        with open(os.path.join(directory, "partitions.json"), "w", encoding="utf-8") as f:
            json.dump([p.to_dict() for p in sample.partitions], f)
        with open(os.path.join(directory, "schedule.json"), "w", encoding="utf-8") as f:
            json.dump({"R": sample.schedule.R, "K": sample.schedule.K, "steps": sample.schedule.table()}, f)
        entries.append({**sample.spec.to_dict(), "dir": rel.replace(os.sep, "/")})

    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "spec": dataset.spec.to_dict(),
        "splits": dataset.splits,
        "normalizer": dataset.normalizer.to_dict(),
        "metadata": dataset.metadata,
        "samples": entries,
    }
    path = os.path.join(out_dir, "dataset.json")
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    dataset.path = out_dir
    logger.info(f"Wrote dataset to {out_dir}")
    return path


def load_sample(directory, entry: dict) -> Sample:
    multilevel = load_hierarchy(os.path.join(directory, "hierarchy.json"))
    _, _, response = read_mesh_with_response(os.path.join(directory, level_file_name(multilevel.R)))
    with open(os.path.join(directory, "partitions.json"), "r", encoding="utf-8") as f:
        partitions = [SubgraphPartition.from_dict(p) for p in json.load(f)]
    with open(os.path.join(directory, "schedule.json"), "r", encoding="utf-8") as f:
        schedule = MPSchedule.from_table(json.load(f)["steps"])
    if response is None:
        raise ValueError(f"sample {entry.get('index')} has no FEM response")
    return Sample(SampleSpec.from_dict(entry), multilevel, partitions, schedule, response)


def load_dataset(path) -> Dataset:
    """Load from a dataset directory or its dataset.json."""
    path = str(path)
    root = path if os.path.isdir(path) else os.path.dirname(os.path.abspath(path))
    with open(os.path.join(root, "dataset.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format_version") != DATASET_FORMAT_VERSION:
        raise ValueError(f"Unsupported dataset format_version {manifest.get('format_version')}")
    samples = [load_sample(os.path.join(root, entry["dir"]), entry) for entry in manifest["samples"]]
    return Dataset(DatasetSpec.from_dict(manifest["spec"]), samples,
                   {k: list(v) for k, v in manifest["splits"].items()},
                   Normalizer.from_dict(manifest["normalizer"]), manifest.get("metadata", {}), root)
