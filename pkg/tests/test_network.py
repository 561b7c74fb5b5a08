import numpy as np
import pytest

from app.errors import StructuralError
from app.services.adaptive_mp import (
    SAMPLING_UP, SAMPLING_UP_DOWN, MPSchedule, counted_steps, divide_mesh_graph, scale_schedule,
)
from app.services.checkpoint_service import blob_path_for, load_checkpoint, save_checkpoint
from app.services.mesh_core import directed_edge_set, edge_feature_matrix, node_feature_matrix
from app.services.mesh_hierarchy import MultiLevelMesh
from app.services.network import (
    LAYER_NORM_EPS, MLP, GroupEdges, ModelConfig, Normalizer, OptimizerState,
    aggregate_subgraphs, analytic_parameter_count, backward, count_parameters, estimate_flops, forward,
    init_parameters, learning_rate, mlp_flops, mp_step, mse_loss, optimizer_step, per_step_parameter_count,
    prepare_inputs, upsample,
)

from conftest import random_two_level, two_level_mesh


def reference_mlp(x, arrays, name, normalize=True):
    """Plain numpy evaluation of one two-hidden-layer MLP."""
    h = np.tanh(x @ arrays[f"{name}.W0"] + arrays[f"{name}.b0"])
    h = np.tanh(h @ arrays[f"{name}.W1"] + arrays[f"{name}.b1"])
    out = h @ arrays[f"{name}.W2"] + arrays[f"{name}.b2"]
    if normalize:
        mu = out.mean(axis=1, keepdims=True)
        var = ((out - mu) ** 2).mean(axis=1, keepdims=True)
        out = (out - mu) / np.sqrt(var + LAYER_NORM_EPS) * arrays[f"{name}.gamma"] + arrays[f"{name}.beta"]
    return out


def _small_model(R=2, K=2, mode=SAMPLING_UP, seed=0, latent=8, hidden=8):
    return init_parameters(ModelConfig(R, K, 1, latent, hidden, seed, mode))


# ── parameters ───────────────────────────────────────────────────────────

def test_same_seed_gives_identical_parameters():
    a = init_parameters(ModelConfig(2, 2, latent=8, hidden=8, seed=4))
    b = init_parameters(ModelConfig(2, 2, latent=8, hidden=8, seed=4))
    assert a.names() == b.names()
    for name in a.names():
        assert np.array_equal(a.arrays[name], b.arrays[name])


def test_parameter_count_matches_layer_sizes():
    def mlp(n_in, n_out=128, norm=True):
        return n_in * 128 + 128 + 128 * 128 + 128 + 128 * n_out + n_out + (2 * n_out if norm else 0)

    expected = (mlp(4) + mlp(3) + mlp(3)
                + 12 * (mlp(384) + mlp(256))
                + 3 * mlp(512)
                + 2 * (mlp(384) + mlp(256))
                + mlp(128, 1, False))
    config = ModelConfig(3, 4)
    assert analytic_parameter_count(config) == expected
    assert count_parameters(init_parameters(config)) == expected


def test_down_sampling_adds_its_own_parameters():
    up = analytic_parameter_count(ModelConfig(3, 4, latent=16, hidden=16))
    up_down = analytic_parameter_count(ModelConfig(3, 4, latent=16, hidden=16, sampling_mode=SAMPLING_UP_DOWN))
    assert up_down > up


def test_parameter_count_ignores_step_budget(two_level, two_level_partitions):
    config = ModelConfig(2, 2, latent=8, hidden=8)
    params = init_parameters(config)
    inputs = prepare_inputs(two_level, two_level_partitions)
    tuned = MPSchedule.from_table([[1, 2], [3, 1]])
    counts, flat_counts, flops = set(), [], []
    for budget in (5, 10, 20, 35):
        schedule = scale_schedule(tuned, budget, passes=1)
        counts.add(count_parameters(params))
        flat_counts.append(per_step_parameter_count(config, budget))
        flops.append(estimate_flops(inputs, schedule, params))
    assert counts == {analytic_parameter_count(config)}
    assert flat_counts == sorted(flat_counts) and len(set(flat_counts)) == 4
    assert flops == sorted(flops) and len(set(flops)) == 4


def test_flop_accounting():
    assert mlp_flops((3, 128, 128, 128)) == 2 * (3 * 128 + 128 * 128 + 128 * 128)


def test_doubling_steps_raises_flops_not_parameters(two_level, two_level_partitions):
    params = _small_model()
    inputs = prepare_inputs(two_level, two_level_partitions)
    ones = MPSchedule.constant(2, 2)
    base = MPSchedule.from_table([[2, 3], [1, 4]])
    assert estimate_flops(inputs, ones, params) < estimate_flops(inputs, base, params)
    assert estimate_flops(inputs, base, params) < estimate_flops(inputs, base.scaled(2), params)


# ── building blocks ──────────────────────────────────────────────────────

def test_mp_step_matches_hand_evaluation():
    params = init_parameters(ModelConfig(1, 1, latent=2, hidden=1, seed=6))
    arrays = params.arrays
    rng = np.random.default_rng(1)
    nodes = rng.normal(size=(2, 2))
    edges = rng.normal(size=(1, 2))
    group = GroupEdges(np.array([0]), np.array([1]), np.zeros((1, 3)))
    new_nodes, new_edges = mp_step(group, nodes, edges, params.mlp("processor_edge.r1.k0"),
                                   params.mlp("processor_node.r1.k0"))

    e = reference_mlp(np.concatenate([edges, nodes[[0]], nodes[[1]]], axis=1), arrays, "processor_edge.r1.k0")
    summed = np.zeros((2, 2))
    summed[0] = e[0]
    v = reference_mlp(np.concatenate([nodes, summed], axis=1), arrays, "processor_node.r1.k0")
    np.testing.assert_allclose(new_edges, e, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(new_nodes, v, rtol=1e-12, atol=1e-14)


def test_mp_step_with_no_group_edges():
    params = init_parameters(ModelConfig(1, 1, latent=4, hidden=4, seed=2))
    nodes = np.random.default_rng(0).normal(size=(3, 4))
    empty = GroupEdges(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), np.zeros((0, 3)))
    f_node = params.mlp("processor_node.r1.k0")
    new_nodes, new_edges = mp_step(empty, nodes, np.zeros((0, 4)), params.mlp("processor_edge.r1.k0"), f_node)
    assert new_edges.shape == (0, 4)
    np.testing.assert_array_equal(new_nodes, f_node.apply(np.concatenate([nodes, np.zeros((3, 4))], axis=1)))


def test_mp_step_rejects_mismatched_edges():
    params = init_parameters(ModelConfig(1, 1, latent=4, hidden=4))
    group = GroupEdges(np.array([0]), np.array([1]), np.zeros((1, 3)))
    with pytest.raises(StructuralError):
        mp_step(group, np.zeros((2, 4)), np.zeros((2, 4)), params.mlp("processor_edge.r1.k0"),
                params.mlp("processor_node.r1.k0"))


def test_aggregation_is_equivariant_to_group_order():
    params = init_parameters(ModelConfig(1, 2, latent=3, hidden=5, seed=9))
    aggregator = params.mlp("aggregator.r1")
    rng = np.random.default_rng(2)
    g0, g1 = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    out = aggregate_subgraphs([g0, g1], aggregator)
    assert out.shape == (4, 3)

    swapped = dict(params.arrays)
    W0 = params.arrays["aggregator.r1.W0"]
    swapped["aggregator.r1.W0"] = np.concatenate([W0[3:], W0[:3]])
    permuted = MLP(aggregator.spec, swapped)
    np.testing.assert_allclose(aggregate_subgraphs([g1, g0], permuted), out, rtol=1e-12, atol=1e-14)


def test_aggregation_rejects_wrong_group_count():
    params = init_parameters(ModelConfig(1, 2, latent=3, hidden=3))
    with pytest.raises(StructuralError):
        aggregate_subgraphs([np.zeros((4, 3))], params.mlp("aggregator.r1"))


def test_upsample_is_local_to_each_fine_node(two_level):
    params = _small_model(latent=4, hidden=4)
    cross = two_level.cross(1)
    rng = np.random.default_rng(5)
    coarse = rng.normal(size=(two_level.level(1).node_count, 4))
    fine = rng.normal(size=(two_level.level(2).node_count, 4))
    embedded = rng.normal(size=(len(cross), 4))
    f_edge, f_node = params.mlp("up_edge.r1"), params.mlp("up_node.r1")
    out = upsample(cross, coarse, fine, embedded, f_edge, f_node)

    node = 4
    masked = embedded.copy()
    masked[cross.dst != node] = 0.0
    again = upsample(cross, coarse, fine, masked, f_edge, f_node)
    np.testing.assert_allclose(again[node], out[node], rtol=1e-12, atol=1e-14)


def test_upsample_requires_three_incoming_edges(two_level):
    from app.services.mesh_hierarchy import CrossEdgeSet

    params = _small_model(latent=4, hidden=4)
    cross = two_level.cross(1)
    broken = CrossEdgeSet(1, cross.src[1:], cross.dst[1:], cross.displacement[1:], cross.length[1:])
    with pytest.raises(StructuralError, match="expected 3"):
        upsample(broken, np.zeros((4, 4)), np.zeros((two_level.level(2).node_count, 4)),
                 np.zeros((len(broken), 4)), params.mlp("up_edge.r1"), params.mlp("up_node.r1"))


# ── forward ──────────────────────────────────────────────────────────────

SCHEDULE = MPSchedule.from_table([[2, 1], [1, 2]])


def test_forward_output_shape_and_step_count(two_level, two_level_partitions):
    for mode in (SAMPLING_UP, SAMPLING_UP_DOWN):
        params = _small_model(mode=mode, latent=6, hidden=6)
        inputs = prepare_inputs(two_level, two_level_partitions)
        output, state = forward(inputs, SCHEDULE, params)
        assert output.shape == (two_level.level(2).node_count, 1)
        assert state.steps_executed == counted_steps(SCHEDULE, mode)
        assert state.level_nodes[1].shape == (two_level.level(1).node_count, 6)


def test_forward_rejects_mismatched_schedule(two_level, two_level_partitions):
    params = _small_model()
    inputs = prepare_inputs(two_level, two_level_partitions)
    with pytest.raises(StructuralError):
        forward(inputs, MPSchedule.constant(2, 3), params)


def test_forward_is_translation_invariant(two_level, two_level_partitions):
    params = _small_model(latent=8, hidden=8, seed=1)
    moved = two_level_mesh((10.0, -7.0), reference=two_level)
    a, _ = forward(prepare_inputs(two_level, two_level_partitions), SCHEDULE, params, record=False)
    b, _ = forward(prepare_inputs(moved, two_level_partitions), SCHEDULE, params, record=False)
    np.testing.assert_allclose(b, a, atol=1e-9, rtol=0)


def test_forward_is_identical_for_any_worker_count(two_level, two_level_partitions):
    params = _small_model(latent=8, hidden=8, seed=2)
    inputs = prepare_inputs(two_level, two_level_partitions)
    single, _ = forward(inputs, SCHEDULE, params, workers=1)
    many, _ = forward(inputs, SCHEDULE, params, workers=4)
    assert np.array_equal(single, many)


def test_group_pass_ignores_other_groups(two_level, two_level_partitions):
    params = _small_model(latent=5, hidden=5, seed=3)
    inputs = prepare_inputs(two_level, two_level_partitions)
    _, state = forward(inputs, SCHEDULE, params, record=False)

    other = inputs.groups[0][1]
    altered_groups = ((inputs.groups[0][0], GroupEdges(other.src, other.dst, np.zeros_like(other.features))),
                      inputs.groups[1])
    altered = type(inputs)(inputs.node_features, altered_groups, inputs.cross_edges)
    _, altered_state = forward(altered, SCHEDULE, params, record=False)
    assert np.array_equal(altered_state.group_nodes[(1, 0)], state.group_nodes[(1, 0)])
    assert not np.array_equal(altered_state.group_nodes[(1, 1)], state.group_nodes[(1, 1)])


def test_single_level_single_group_is_a_flat_graph_network(two_level):
    fine = two_level.level(2)
    conditions = two_level.conditions_at(2)
    flat = MultiLevelMesh((fine,), two_level.auxiliary_level, (), (conditions,))
    partition = divide_mesh_graph(fine, 1)
    params = init_parameters(ModelConfig(1, 1, latent=4, hidden=5, seed=3))
    steps = 3
    output, _ = forward(prepare_inputs(flat, [partition]), MPSchedule.constant(1, 1, steps), params,
                        record=False)

    arrays = params.arrays
    edge_set = directed_edge_set(fine)
    v = reference_mlp(node_feature_matrix(conditions), arrays, "node_encoder")
    e = reference_mlp(edge_feature_matrix(edge_set), arrays, "edge_encoder")
    for _ in range(steps):
        e = reference_mlp(np.concatenate([e, v[edge_set.src], v[edge_set.dst]], axis=1),
                          arrays, "processor_edge.r1.k0")
        summed = np.zeros_like(v)
        for i, s in enumerate(edge_set.src):
            summed[s] += e[i]
        v = reference_mlp(np.concatenate([v, summed], axis=1), arrays, "processor_node.r1.k0")
    v = reference_mlp(v, arrays, "aggregator.r1")
    expected = reference_mlp(v, arrays, "decoder", normalize=False)
    np.testing.assert_allclose(output, expected, rtol=1e-10, atol=1e-12)


# ── gradients and optimizer ──────────────────────────────────────────────

def _loss(inputs, params, target):
    output, _ = forward(inputs, SCHEDULE, params, record=False, workers=1)
    return mse_loss(output, target)[0]


def assert_gradients_match(inputs, params, target, entries_per_array=4, seed=0):
    """Central differences on a seeded sample of entries from every parameter array."""
    output, state = forward(inputs, SCHEDULE, params, workers=1)
    _, d_output = mse_loss(output, target)
    grads = backward(state, d_output)

    rng = np.random.default_rng(seed)
    h = 1e-5
    for name, arr in params.arrays.items():
        picked = rng.choice(arr.size, size=min(entries_per_array, arr.size), replace=False)
        for i in picked:
            idx = np.unravel_index(i, arr.shape)
            saved = arr[idx]
            arr[idx] = saved + h
            plus = _loss(inputs, params, target)
            arr[idx] = saved - h
            minus = _loss(inputs, params, target)
            arr[idx] = saved
            numeric = (plus - minus) / (2 * h)
            np.testing.assert_allclose(grads[name][idx], numeric, rtol=1e-4, atol=1e-7,
                                       err_msg=f"{name}{idx}")


@pytest.mark.parametrize("mode,seed", [(SAMPLING_UP, 0), (SAMPLING_UP, 1), (SAMPLING_UP_DOWN, 2),
                                       (SAMPLING_UP_DOWN, 3), (SAMPLING_UP, 4)])
def test_gradients_match_central_differences(two_level, two_level_partitions, mode, seed):
    params = _small_model(mode=mode, seed=seed)
    inputs = prepare_inputs(two_level, two_level_partitions)
    target = np.random.default_rng(seed).normal(size=(two_level.level(2).node_count, 1))
    assert_gradients_match(inputs, params, target, entries_per_array=8, seed=seed)


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_on_random_meshes(seed):
    multilevel = random_two_level(seed)
    assert multilevel.level(2).node_count <= 30
    partitions = [divide_mesh_graph(multilevel.level(r), 2, seed=seed + r) for r in (1, 2)]
    mode = SAMPLING_UP_DOWN if seed % 2 else SAMPLING_UP
    params = _small_model(mode=mode, seed=10 + seed)
    target = np.random.default_rng(seed).normal(size=(multilevel.level(2).node_count, 1))
    assert_gradients_match(prepare_inputs(multilevel, partitions), params, target, seed=seed)


def test_perfect_prediction_has_zero_loss_and_gradients(two_level, two_level_partitions):
    params = _small_model()
    inputs = prepare_inputs(two_level, two_level_partitions)
    output, state = forward(inputs, SCHEDULE, params)
    loss, d_output = mse_loss(output, output.copy())
    assert loss == 0.0
    assert all(not np.any(g) for g in backward(state, d_output).values())


def test_backward_needs_a_recorded_pass(two_level, two_level_partitions):
    params = _small_model()
    _, state = forward(prepare_inputs(two_level, two_level_partitions), SCHEDULE, params, record=False)
    with pytest.raises(StructuralError):
        backward(state, np.zeros_like(state.output))


def test_optimizer_finds_quadratic_minimum():
    arrays = {"p": np.array([0.0])}
    state = OptimizerState()
    for _ in range(2000):
        optimizer_step(arrays, {"p": 2.0 * (arrays["p"] - 3.0)}, state, lr=0.05)
    assert abs(arrays["p"][0] - 3.0) < 1e-6


def test_learning_rate_decays_exponentially():
    assert learning_rate(0, 101) == pytest.approx(1e-3)
    assert learning_rate(100, 101) == pytest.approx(1e-4)
    assert learning_rate(50, 101) == pytest.approx(np.sqrt(1e-3 * 1e-4))
    assert learning_rate(5, 1) == 1e-3


# ── normalization and checkpoints ────────────────────────────────────────

def test_normalizer_round_trip():
    normalizer = Normalizer.fit([np.array([[1.0, 0.0], [3.0, 0.0]])], [np.array([[2.0], [6.0]])])
    assert normalizer.force_std[1] == 1.0
    values = np.array([[2.0], [6.0]])
    np.testing.assert_allclose(normalizer.normalize_target(values), [[-1.0], [1.0]])
    np.testing.assert_allclose(normalizer.denormalize_target(normalizer.normalize_target(values)), values)
    assert Normalizer.from_dict(normalizer.to_dict()) == normalizer


def test_checkpoint_round_trip_is_exact(tmp_path):
    params = init_parameters(ModelConfig(2, 3, latent=6, hidden=7, seed=8, sampling_mode=SAMPLING_UP_DOWN))
    normalizer = Normalizer((1.0, 2.0), (3.0, 4.0), (5.0,), (6.0,))
    path = save_checkpoint(params, normalizer, tmp_path / "ckpt.json", {"epoch": 3})
    loaded, loaded_normalizer, manifest = load_checkpoint(path)
    assert loaded.config == params.config
    assert loaded.names() == params.names()
    for name in params.names():
        assert np.array_equal(loaded.arrays[name], params.arrays[name])
    assert loaded_normalizer == normalizer
    assert manifest["extra"] == {"epoch": 3}


def test_truncated_checkpoint_blob_rejected(tmp_path):
    params = init_parameters(ModelConfig(1, 1, latent=4, hidden=4))
    path = save_checkpoint(params, Normalizer(), tmp_path / "ckpt.json")
    blob = blob_path_for(path)
    with open(blob, "rb") as f:
        data = f.read()
    with open(blob, "wb") as f:
        f.write(data[:-8])
    with pytest.raises(ValueError, match="bytes"):
        load_checkpoint(path)
