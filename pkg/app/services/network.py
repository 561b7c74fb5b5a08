"""Encoder-processor-decoder over a multi-level mesh, in plain numpy.

Gradients use a small tape: every op appends a closure that pushes the
output gradient back onto its inputs. Gradients are keyed by array identity,
so every op allocates fresh outputs and parameters are only ever updated in
place by the optimizer.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from app.config import worker_count
from app.errors import StructuralError
from app.services.adaptive_mp import (
    SAMPLING_UP, SAMPLING_UP_DOWN, VALID_SAMPLING_MODES, MPSchedule, SubgraphPartition,
)
from app.services.mesh_core import NodeConditions, directed_edge_set, edge_feature_matrix, node_feature_matrix
from app.services.mesh_hierarchy import CrossEdgeSet, MultiLevelMesh

logger = logging.getLogger(__name__)

NODE_INPUT_DIM = 4
EDGE_INPUT_DIM = 3
LAYER_NORM_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    R: int
    K: int
    output_dim: int = 1
    latent: int = 128
    hidden: int = 128
    seed: int = 0
    sampling_mode: str = SAMPLING_UP
    normalize: bool = True

    def __post_init__(self):
        if self.R < 1 or self.K < 1:
            raise ValueError(f"R and K must be >= 1, got R={self.R}, K={self.K}")
        if self.sampling_mode not in VALID_SAMPLING_MODES:
            raise ValueError(f"Unknown sampling mode: {self.sampling_mode}. Valid: {VALID_SAMPLING_MODES}")

    def to_dict(self) -> dict:
        return {
            "R": self.R, "K": self.K, "output_dim": self.output_dim, "latent": self.latent,
            "hidden": self.hidden, "seed": self.seed, "sampling_mode": self.sampling_mode,
            "normalize": self.normalize,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**{key: data[key] for key in cls.__dataclass_fields__ if key in data})


# ── Reverse-mode tape ────────────────────────────────────────────────────

class Tape:
    def __init__(self):
        self.records = []

    def record(self, backward_fn) -> None:
        self.records.append(backward_fn)

    def extend(self, other: "Tape") -> None:
        self.records.extend(other.records)

    def __len__(self) -> int:
        return len(self.records)


class Gradients:
    """Gradient accumulator keyed by array identity."""

    def __init__(self):
        self._values = {}

    def add(self, array: np.ndarray, grad: np.ndarray) -> None:
        key = id(array)
        if key in self._values:
            self._values[key] = self._values[key] + grad
        else:
            self._values[key] = grad

    def get(self, array: np.ndarray):
        return self._values.get(id(array))


def run_backward(tape: Tape, output: np.ndarray, d_output: np.ndarray) -> Gradients:
    grads = Gradients()
    grads.add(output, d_output)
    for backward_fn in reversed(tape.records):
        backward_fn(grads)
    return grads


def linear(x, W, b, tape: Tape | None = None) -> np.ndarray:
    y = x @ W + b
    if tape is not None:
        def backward(grads):
            g = grads.get(y)
            if g is None:
                return
            grads.add(x, g @ W.T)
            grads.add(W, x.T @ g)
            grads.add(b, g.sum(axis=0))
        tape.record(backward)
    return y


def tanh(x, tape: Tape | None = None) -> np.ndarray:
    y = np.tanh(x)
    if tape is not None:
        def backward(grads):
            g = grads.get(y)
            if g is not None:
                grads.add(x, g * (1.0 - y * y))
        tape.record(backward)
    return y


def layer_norm(x, gamma, beta, tape: Tape | None = None) -> np.ndarray:
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + LAYER_NORM_EPS)
    xhat = centered * inv_std
    y = xhat * gamma + beta
    if tape is not None:
        def backward(grads):
            g = grads.get(y)
            if g is None:
                return
            grads.add(gamma, (g * xhat).sum(axis=0))
            grads.add(beta, g.sum(axis=0))
            dxhat = g * gamma
            dx = inv_std * (dxhat - dxhat.mean(axis=1, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
            grads.add(x, dx)
        tape.record(backward)
    return y


def concat(parts, tape: Tape | None = None) -> np.ndarray:
    y = np.concatenate(parts, axis=1)
    if tape is not None:
        bounds = np.cumsum([0] + [p.shape[1] for p in parts])

        def backward(grads):
            g = grads.get(y)
            if g is None:
                return
            for part, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
                grads.add(part, g[:, lo:hi])
        tape.record(backward)
    return y


def gather(x, index, tape: Tape | None = None) -> np.ndarray:
    y = x[index]
    if tape is not None:
        def backward(grads):
            g = grads.get(y)
            if g is None:
                return
            dx = np.zeros_like(x)
            np.add.at(dx, index, g)
            grads.add(x, dx)
        tape.record(backward)
    return y


def segment_sum(x, index, count: int, tape: Tape | None = None) -> np.ndarray:
    """Row sums of x grouped by index, accumulated in ascending row order."""
    y = np.zeros((count, x.shape[1]))
    np.add.at(y, index, x)
    if tape is not None:
        def backward(grads):
            g = grads.get(y)
            if g is not None:
                grads.add(x, g[index])
        tape.record(backward)
    return y


# ── Parameters ───────────────────────────────────────────────────────────

@dataclass(frozen=True)
class MLPSpec:
    name: str
    widths: tuple[int, int, int, int]
    normalize: bool


def mlp_parameter_count(widths, normalize: bool) -> int:
    n_in, h1, h2, n_out = widths
    count = n_in * h1 + h1 + h1 * h2 + h2 + h2 * n_out + n_out
    return count + (2 * n_out if normalize else 0)


def mlp_flops(widths) -> int:
    n_in, h1, h2, n_out = widths
    return 2 * (n_in * h1 + h1 * h2 + h2 * n_out)


def mlp_specs(config: ModelConfig) -> list[MLPSpec]:
    """Every MLP of the model, in canonical order."""
    d, h, norm = config.latent, config.hidden, config.normalize

    def spec(name, n_in, n_out=d, normalize=norm):
        return MLPSpec(name, (n_in, h, h, n_out), normalize)

    specs = [spec("node_encoder", NODE_INPUT_DIM), spec("edge_encoder", EDGE_INPUT_DIM)]
    if config.R > 1:
        specs.append(spec("cross_encoder", EDGE_INPUT_DIM))
    for r in range(1, config.R + 1):
        for k in range(config.K):
            specs.append(spec(f"processor_edge.r{r}.k{k}", 3 * d))
            specs.append(spec(f"processor_node.r{r}.k{k}", 2 * d))
        specs.append(spec(f"aggregator.r{r}", config.K * d))
        if r < config.R:
            specs.append(spec(f"up_edge.r{r}", 3 * d))
            specs.append(spec(f"up_node.r{r}", 2 * d))
            if config.sampling_mode == SAMPLING_UP_DOWN:
                specs.append(spec(f"down_edge.r{r}", 3 * d))
                specs.append(spec(f"down_node.r{r}", 2 * d))
    specs.append(spec("decoder", d, config.output_dim, False))
    return specs


class MLP:
    """Two tanh hidden layers, optional layer normalization on the output."""

    def __init__(self, spec: MLPSpec, arrays: dict):
        self.spec = spec
        self.weights = [arrays[f"{spec.name}.W{i}"] for i in range(3)]
        self.biases = [arrays[f"{spec.name}.b{i}"] for i in range(3)]
        self.gamma = arrays.get(f"{spec.name}.gamma") if spec.normalize else None
        self.beta = arrays.get(f"{spec.name}.beta") if spec.normalize else None

    @property
    def widths(self) -> tuple[int, int, int, int]:
        return self.spec.widths

    def apply(self, x: np.ndarray, tape: Tape | None = None) -> np.ndarray:
        if x.shape[1] != self.widths[0]:
            raise StructuralError(f"{self.spec.name} expects {self.widths[0]} inputs, got {x.shape[1]}")
        out = tanh(linear(x, self.weights[0], self.biases[0], tape), tape)
        out = tanh(linear(out, self.weights[1], self.biases[1], tape), tape)
        out = linear(out, self.weights[2], self.biases[2], tape)
        if self.gamma is not None:
            out = layer_norm(out, self.gamma, self.beta, tape)
        return out


@dataclass(eq=False)
class ModelParameters:
    config: ModelConfig
    arrays: dict

    def __post_init__(self):
        self._specs = {spec.name: spec for spec in mlp_specs(self.config)}

    def mlp(self, name: str) -> MLP:
        return MLP(self._specs[name], self.arrays)

    def specs(self) -> list[MLPSpec]:
        return list(self._specs.values())

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "ModelParameters":
        return ModelParameters(self.config, {name: arr.copy() for name, arr in self.arrays.items()})


def init_parameters(config: ModelConfig) -> ModelParameters:
    """Uniform fan-in init (variance 1/fan_in), zero biases, unit norm scale."""
    rng = np.random.default_rng(config.seed)
    arrays = {}
    for spec in mlp_specs(config):
        widths = spec.widths
        for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = math.sqrt(3.0 / n_in)
            arrays[f"{spec.name}.W{i}"] = rng.uniform(-bound, bound, size=(n_in, n_out))
            arrays[f"{spec.name}.b{i}"] = np.zeros(n_out)
        if spec.normalize:
            arrays[f"{spec.name}.gamma"] = np.ones(widths[-1])
            arrays[f"{spec.name}.beta"] = np.zeros(widths[-1])
    return ModelParameters(config, arrays)


def count_parameters(params: ModelParameters) -> int:
    return int(sum(arr.size for arr in params.arrays.values()))


def analytic_parameter_count(config: ModelConfig) -> int:
    return sum(mlp_parameter_count(spec.widths, spec.normalize) for spec in mlp_specs(config))


def per_step_parameter_count(config: ModelConfig, total_steps: int) -> int:
    """Parameters of a flat graph network with separate weights for every MP step."""
    d, h, norm = config.latent, config.hidden, config.normalize
    encoders = (mlp_parameter_count((NODE_INPUT_DIM, h, h, d), norm)
                + mlp_parameter_count((EDGE_INPUT_DIM, h, h, d), norm))
    per_step = mlp_parameter_count((3 * d, h, h, d), norm) + mlp_parameter_count((2 * d, h, h, d), norm)
    decoder = mlp_parameter_count((d, h, h, config.output_dim), False)
    return encoders + total_steps * per_step + decoder


# ── Forward inputs ───────────────────────────────────────────────────────

@dataclass(frozen=True)
class Normalizer:
    """z-score statistics for the force inputs and the output field."""

    force_mean: tuple[float, float] = (0.0, 0.0)
    force_std: tuple[float, float] = (1.0, 1.0)
    target_mean: tuple[float, ...] = (0.0,)
    target_std: tuple[float, ...] = (1.0,)

    def node_features(self, conditions: NodeConditions) -> np.ndarray:
        feats = node_feature_matrix(conditions)
        feats[:, 2:4] = (feats[:, 2:4] - np.asarray(self.force_mean)) / np.asarray(self.force_std)
        return feats

    def normalize_target(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        values = values.reshape(values.shape[0], -1)
        return (values - np.asarray(self.target_mean)) / np.asarray(self.target_std)

    def denormalize_target(self, values: np.ndarray) -> np.ndarray:
        return values * np.asarray(self.target_std) + np.asarray(self.target_mean)

    def to_dict(self) -> dict:
        return {key: [float(v) for v in getattr(self, key)]
                for key in ("force_mean", "force_std", "target_mean", "target_std")}

    @classmethod
    def from_dict(cls, data: dict) -> "Normalizer":
        return cls(**{key: tuple(float(v) for v in data[key]) for key in data})

    @classmethod
    def fit(cls, forces: list[np.ndarray], targets: list[np.ndarray]) -> "Normalizer":
        force = np.concatenate([np.asarray(f).reshape(-1, 2) for f in forces])
        target = np.concatenate([np.asarray(t, dtype=np.float64).reshape(len(t), -1) for t in targets])
        fstd = force.std(axis=0)
        tstd = target.std(axis=0)
        return cls(tuple(force.mean(axis=0)), tuple(np.where(fstd > 0, fstd, 1.0)),
                   tuple(target.mean(axis=0)), tuple(np.where(tstd > 0, tstd, 1.0)))


@dataclass(frozen=True, eq=False)
class GroupEdges:
    src: np.ndarray
    dst: np.ndarray
    features: np.ndarray

    def __len__(self) -> int:
        return int(self.src.shape[0])


@dataclass(frozen=True, eq=False)
class ForwardInputs:
    node_features: tuple[np.ndarray, ...]
    groups: tuple[tuple[GroupEdges, ...], ...]
    cross_edges: tuple[CrossEdgeSet, ...]

    @property
    def R(self) -> int:
        return len(self.node_features)

    def node_count(self, r: int) -> int:
        return int(self.node_features[r - 1].shape[0])


def prepare_inputs(multilevel: MultiLevelMesh, partitions, normalizer: Normalizer | None = None,
                   conditions=None) -> ForwardInputs:
    """Feature matrices and per-group edge lists for every level."""
    normalizer = normalizer or Normalizer()
    partitions = list(partitions)
    if len(partitions) != multilevel.R:
        raise StructuralError(f"need one partition per level ({multilevel.R}), got {len(partitions)}")
    level_conditions = list(conditions) if conditions is not None else list(multilevel.conditions)
    node_features, groups = [], []
    for r in range(1, multilevel.R + 1):
        graph = multilevel.level(r)
        if level_conditions[r - 1].node_count != graph.node_count:
            raise StructuralError(f"level {r} conditions cover {level_conditions[r - 1].node_count} "
                                  f"nodes, graph has {graph.node_count}")
        edge_set = directed_edge_set(graph)
        partition: SubgraphPartition = partitions[r - 1]
        if partition.assignment.shape[0] != len(edge_set):
            raise StructuralError(f"level {r} partition covers {partition.assignment.shape[0]} "
                                  f"directed edges, graph has {len(edge_set)}")
        feats = edge_feature_matrix(edge_set)
        level_groups = []
        for k in range(partition.K):
            idx = partition.group_edges(k)
            level_groups.append(GroupEdges(edge_set.src[idx], edge_set.dst[idx], feats[idx]))
        node_features.append(normalizer.node_features(level_conditions[r - 1]))
        groups.append(tuple(level_groups))
    return ForwardInputs(tuple(node_features), tuple(groups), tuple(multilevel.cross_edges))


# ── Message passing ──────────────────────────────────────────────────────

def mp_step(group: GroupEdges, nodes: np.ndarray, edges: np.ndarray, f_edge: MLP, f_node: MLP,
            tape: Tape | None = None) -> tuple[np.ndarray, np.ndarray]:
    """One update of a group's edge embeddings, then of every node from its outgoing group edges."""
    if edges.shape[0] != len(group):
        raise StructuralError(f"{edges.shape[0]} edge embeddings for {len(group)} group edges")
    new_edges = f_edge.apply(concat([edges, gather(nodes, group.src, tape),
                                     gather(nodes, group.dst, tape)], tape), tape)
    summed = segment_sum(new_edges, group.src, nodes.shape[0], tape)
    new_nodes = f_node.apply(concat([nodes, summed], tape), tape)
    return new_nodes, new_edges


def run_group_pass(params: ModelParameters, r: int, k: int, level_nodes: np.ndarray,
                   group: GroupEdges, steps: int, tape: Tape | None = None) -> np.ndarray:
    """Encode group k's edges and run its L^{r,k} steps from the level snapshot."""
    f_edge = params.mlp(f"processor_edge.r{r}.k{k}")
    f_node = params.mlp(f"processor_node.r{r}.k{k}")
    edges = params.mlp("edge_encoder").apply(group.features, tape)
    nodes = level_nodes
    for _ in range(steps):
        nodes, edges = mp_step(group, nodes, edges, f_edge, f_node, tape)
    return nodes


def aggregate_subgraphs(group_nodes, aggregator: MLP, tape: Tape | None = None) -> np.ndarray:
    group_nodes = list(group_nodes)
    expected = aggregator.widths[0]
    width = sum(g.shape[1] for g in group_nodes)
    if width != expected:
        raise StructuralError(f"aggregator expects {expected} inputs, groups supply {width}")
    if len({g.shape for g in group_nodes}) != 1:
        raise StructuralError("group embeddings differ in shape")
    return aggregator.apply(concat(group_nodes, tape), tape)


def upsample(cross: CrossEdgeSet, coarse_nodes: np.ndarray, fine_nodes: np.ndarray,
             cross_edges: np.ndarray, f_edge: MLP, f_node: MLP, tape: Tape | None = None) -> np.ndarray:
    """Push coarse embeddings into the fine level along the three incoming edges of every fine node."""
    in_degree = np.bincount(cross.dst, minlength=fine_nodes.shape[0])
    if np.any(in_degree != 3):
        bad = int(np.flatnonzero(in_degree != 3)[0])
        raise StructuralError(f"fine node {bad} has {int(in_degree[bad])} up-sampling edges, expected 3")
    new_edges = f_edge.apply(concat([cross_edges, gather(coarse_nodes, cross.src, tape),
                                     gather(fine_nodes, cross.dst, tape)], tape), tape)
    summed = segment_sum(new_edges, cross.dst, fine_nodes.shape[0], tape)
    return f_node.apply(concat([fine_nodes, summed], tape), tape)


def downsample(cross: CrossEdgeSet, fine_nodes: np.ndarray, coarse_nodes: np.ndarray,
               cross_edges: np.ndarray, f_edge: MLP, f_node: MLP, tape: Tape | None = None) -> np.ndarray:
    """Reverse of upsample: fine embeddings flow back to the coarse vertices that reference them."""
    new_edges = f_edge.apply(concat([cross_edges, gather(fine_nodes, cross.dst, tape),
                                     gather(coarse_nodes, cross.src, tape)], tape), tape)
    summed = segment_sum(new_edges, cross.src, coarse_nodes.shape[0], tape)
    return f_node.apply(concat([coarse_nodes, summed], tape), tape)


@dataclass(eq=False)
class ForwardState:
    output: np.ndarray
    level_nodes: dict = field(default_factory=dict)
    group_nodes: dict = field(default_factory=dict)
    tape: Tape | None = None
    params: ModelParameters | None = None
    steps_executed: int = 0


def forward(inputs: ForwardInputs, schedule: MPSchedule, params: ModelParameters,
            record: bool = True, workers: int | None = None) -> tuple[np.ndarray, ForwardState]:
    """Encode all levels, process coarse to fine with per-group steps, decode the finest level."""
    config = params.config
    if inputs.R != config.R or schedule.R != config.R or schedule.K != config.K:
        raise StructuralError(f"model is R={config.R}, K={config.K}; inputs have R={inputs.R}, "
                              f"schedule R={schedule.R}, K={schedule.K}")
    tape = Tape() if record else None
    state = ForwardState(output=np.zeros((0, config.output_dim)), tape=tape, params=params)

    encoder = params.mlp("node_encoder")
    nodes = {r: encoder.apply(inputs.node_features[r - 1], tape) for r in range(1, config.R + 1)}
    cross_encoder = params.mlp("cross_encoder") if config.R > 1 else None

    if config.sampling_mode == SAMPLING_UP_DOWN:
        for r in range(config.R - 1, 0, -1):
            cross = inputs.cross_edges[r - 1]
            embedded = cross_encoder.apply(cross.reversed_features(), tape)
            nodes[r] = downsample(cross, nodes[r + 1], nodes[r], embedded,
                                  params.mlp(f"down_edge.r{r}"), params.mlp(f"down_node.r{r}"), tape)
            state.steps_executed += 1

    n_workers = min(worker_count(workers), config.K)
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        for r in range(1, config.R + 1):
            snapshot = nodes[r]
            group_tapes = [Tape() if record else None for _ in range(config.K)]
            jobs = [
                pool.submit(run_group_pass, params, r, k, snapshot, inputs.groups[r - 1][k],
                            schedule.get(r, k), group_tapes[k])
                for k in range(config.K)
            ]
            outputs = [job.result() for job in jobs]
            if record:
                for group_tape in group_tapes:
                    tape.extend(group_tape)
            for k, out in enumerate(outputs):
                state.group_nodes[(r, k)] = out
                state.steps_executed += schedule.get(r, k)
            nodes[r] = aggregate_subgraphs(outputs, params.mlp(f"aggregator.r{r}"), tape)
            state.level_nodes[r] = nodes[r]
            if r < config.R:
                cross = inputs.cross_edges[r - 1]
                embedded = cross_encoder.apply(cross.features(), tape)
                nodes[r + 1] = upsample(cross, nodes[r], nodes[r + 1], embedded,
                                        params.mlp(f"up_edge.r{r}"), params.mlp(f"up_node.r{r}"), tape)
                state.steps_executed += 1

    state.output = params.mlp("decoder").apply(nodes[config.R], tape)
    return state.output, state


# ── Loss, gradients, optimizer ───────────────────────────────────────────

def mse_loss(prediction: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over nodes and output dims, with its gradient."""
    prediction = np.asarray(prediction, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64).reshape(prediction.shape)
    diff = prediction - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def backward(state: ForwardState, d_output: np.ndarray) -> dict:
    """Gradient of every parameter, by name, for the recorded forward pass."""
    if state.tape is None:
        raise StructuralError("forward pass was not recorded")
    grads = run_backward(state.tape, state.output, d_output)
    result = {}
    for name, arr in state.params.arrays.items():
        g = grads.get(arr)
        result[name] = np.zeros_like(arr) if g is None else g
    return result


@dataclass
class OptimizerState:
    step: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)


def learning_rate(step: int, total_steps: int, start: float = 1e-3, end: float = 1e-4) -> float:
    """Exponential decay from start to end over total_steps."""
    if total_steps <= 1:
        return start
    return start * (end / start) ** (min(step, total_steps - 1) / (total_steps - 1))


def optimizer_step(arrays: dict, grads: dict, state: OptimizerState, lr: float = 1e-3,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> dict:
    """Bias-corrected adaptive-moment update, applied in place; returns arrays."""
    state.step += 1
    c1 = 1.0 - beta1 ** state.step
    c2 = 1.0 - beta2 ** state.step
    for name, arr in arrays.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.first.get(name)
        v = state.second.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.first[name] = m
        state.second[name] = v
        arr -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return arrays


# ── Cost accounting ──────────────────────────────────────────────────────

def estimate_flops(inputs: ForwardInputs, schedule: MPSchedule, params: ModelParameters) -> int:
    """Multiply-add count of every MLP application plus the message-sum adds."""
    config = params.config
    d = config.latent
    spec = {s.name: s.widths for s in params.specs()}
    total = 0
    for r in range(1, config.R + 1):
        n = inputs.node_count(r)
        total += n * mlp_flops(spec["node_encoder"])
        for k in range(config.K):
            m = len(inputs.groups[r - 1][k])
            steps = schedule.get(r, k)
            total += m * mlp_flops(spec["edge_encoder"])
            per_step = (m * mlp_flops(spec[f"processor_edge.r{r}.k{k}"])
                        + n * mlp_flops(spec[f"processor_node.r{r}.k{k}"]) + m * d)
            total += steps * per_step
        total += n * mlp_flops(spec[f"aggregator.r{r}"])
        if r < config.R:
            c = len(inputs.cross_edges[r - 1])
            fine = inputs.node_count(r + 1)
            total += c * mlp_flops(spec["cross_encoder"])
            total += c * mlp_flops(spec[f"up_edge.r{r}"]) + fine * mlp_flops(spec[f"up_node.r{r}"]) + c * d
            if config.sampling_mode == SAMPLING_UP_DOWN:
                total += c * mlp_flops(spec["cross_encoder"])
                total += (c * mlp_flops(spec[f"down_edge.r{r}"])
                          + n * mlp_flops(spec[f"down_node.r{r}"]) + c * d)
    total += inputs.node_count(config.R) * mlp_flops(spec["decoder"])
    return int(total)
