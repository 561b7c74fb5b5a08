"""Surrogate predictions from a trained checkpoint, with an optional FEM reference."""

import logging
import math
from dataclasses import dataclass

import numpy as np

from app.config import worker_count
from app.services.adaptive_mp import counted_steps
from app.services.checkpoint_service import load_checkpoint
from app.services.dataset_service import (
    DatasetSpec, Sample, SampleSpec, beam_conditions, build_structures, sample_seed,
)
from app.services.fem_oracle import solve
from app.services.mesh_hierarchy import HoleSpec, triangulate
from app.services.network import forward, prepare_inputs
from app.services.training_service import RunConfig, rmse, schedule_for

logger = logging.getLogger(__name__)


@dataclass
class PredictionResult:
    nodes: np.ndarray
    elements: np.ndarray
    von_mises: np.ndarray
    steps: int
    reference: np.ndarray | None = None
    rmse: float | None = None

    def to_dict(self) -> dict:
        data = {
            "node_count": int(self.nodes.shape[0]),
            "nodes": self.nodes.tolist(),
            "elements": self.elements.tolist(),
            "von_mises": self.von_mises.tolist(),
            "steps": self.steps,
        }
        if self.reference is not None:
            data["reference"] = self.reference.tolist()
            data["rmse"] = self.rmse
        return data


class Predictor:
    """A loaded checkpoint plus the dataset spec it was trained on."""

    def __init__(self, checkpoint_path):
        self.checkpoint_path = str(checkpoint_path)
        self.params, self.normalizer, manifest = load_checkpoint(checkpoint_path)
        extra = manifest.get("extra", {})
        config = self.params.config
        self.run_config = RunConfig.from_dict(extra.get("run_config", {
            "R": config.R, "K": config.K, "sampling_mode": config.sampling_mode,
        }))
        self.dataset_spec = DatasetSpec.from_dict(extra.get("dataset_spec", {}))
        logger.info(f"Loaded predictor {self.checkpoint_path} (R={config.R}, K={config.K})")

    def predict(self, holes, angle: float, force: float, force_line: float | None = None,
                reference: bool = False) -> PredictionResult:
        """holes: HoleSpec objects or their dict form."""
        spec = self.dataset_spec
        holes = tuple(h if isinstance(h, HoleSpec) else HoleSpec.from_dict(h) for h in holes)
        sample_spec = SampleSpec(0, holes, float(angle), float(force))
        geometry = sample_spec.geometry(spec)
        geometry.validate()
        seed = sample_seed(spec, 0)
        graph = triangulate(geometry, spec.target_edge_length, seed, level_id=self.run_config.R)
        conditions = beam_conditions(graph, geometry, sample_spec.force, sample_spec.angle, force_line,
                                     spec.target_edge_length / 2.0)
        multilevel, partitions, tuned = build_structures(spec, sample_spec, graph, conditions,
                                                         self.run_config.R, self.run_config.K, seed)

        expected = None
        response = np.zeros((graph.node_count, 3))
        if reference:
            response = solve(graph, conditions, spec.material()).response()
            expected = response[:, 2]
        sample = Sample(sample_spec, multilevel, partitions, tuned, response)
        schedule = schedule_for(sample, self.run_config)

        inputs = prepare_inputs(multilevel, partitions, self.normalizer)
        output, _ = forward(inputs, schedule, self.params, record=False, workers=worker_count())
        von_mises = self.normalizer.denormalize_target(output)[:, 0]
        result = PredictionResult(graph.nodes, graph.elements, von_mises,
                                  counted_steps(schedule, self.run_config.sampling_mode))
        if expected is not None:
            result.reference = expected
            result.rmse = rmse([output], [expected[:, None]], self.normalizer)
            if not math.isfinite(result.rmse):
                logger.warning(f"Non-finite prediction RMSE for request {sample_spec.to_dict()}")
        return result
