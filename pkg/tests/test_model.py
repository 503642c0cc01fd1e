import numpy as np
import pytest
import torch

from radtwin.emrt import DirectionGrid, build_los_map, build_mask, query_mask, query_supports
from radtwin.model import (
    EmptySceneEncoding,
    MLPBaseline,
    ModelConfig,
    RadTwin,
    SceneEncoding,
    build_model,
    clamp_output,
    mlp_baseline,
)
from radtwin.scene import SceneConfig, generate_scene, move_obstacle, sample_point_cloud
from radtwin.voxelgrid import voxelize

SMALL = ModelConfig(conv_channels=(8, 8, 16), d_hidden=32)


def _grid(seed=0, scene=None):
    sc = scene or generate_scene(SceneConfig(), seed)
    return sc, voxelize(sample_point_cloud(sc, 25_000, seed).points, sc.room_dims, 0.5, 2)


@pytest.fixture(scope="module")
def setup():
    sc, g = _grid(0)
    model = RadTwin(ModelConfig(), seed=0)
    return sc, g, model


def test_encoding_shape_and_shared_global(setup):
    _, g, model = setup
    enc = model.encode_scene(g)
    assert enc.voxel_features.shape == (len(g), 48)
    glob = enc.voxel_features[:, 32:]
    assert torch.equal(glob, glob[:1].expand_as(glob))


def test_encoding_locality():
    sc, g = _grid(1)
    model = RadTwin(SMALL, seed=0)
    # drop one voxel far from the first: shared local rows keep their values, global part changes
    keep = np.arange(len(g)) != len(g) - 1
    from dataclasses import replace
    g2 = replace(g, indices=g.indices[keep], centers=g.centers[keep], point_counts=g.point_counts[keep])
    a = model.encode_scene(g).voxel_features
    b = model.encode_scene(g2).voxel_features
    assert torch.equal(a[:-1, :32], b[:, :32])
    assert not torch.equal(a[0, 32:], b[0, 32:])


def test_encoding_deterministic():
    _, g = _grid(2)
    a = RadTwin(SMALL, seed=5).encode_scene(g).voxel_features
    b = RadTwin(SMALL, seed=5).encode_scene(g).voxel_features
    assert torch.equal(a, b)


def test_empty_grid_rejected():
    _, g = _grid(0)
    from dataclasses import replace
    empty = replace(g, indices=g.indices[:0], centers=g.centers[:0], point_counts=g.point_counts[:0])
    with pytest.raises(EmptySceneEncoding):
        RadTwin(SMALL).encode_scene(empty)


def test_query_embedding(setup):
    _, g, model = setup
    a = model.embed_query([1.0, 2.0, 1.0], 30.0, 60.0, g)
    assert a.shape == (128,)
    assert torch.equal(a, model.embed_query([1.0, 2.0, 1.0], 30.0, 60.0, g))
    b = model.embed_query([1.0, 2.0, 1.0], 390.0, 60.0, g)
    torch.testing.assert_close(a, b, rtol=0, atol=1e-12)


def test_output_range_and_eval_determinism(setup):
    _, g, model = setup
    enc = model.encode_scene(g)
    m = build_los_map((3.0, 2.0, 1.2), g)
    s = model.predict_spectrum(enc, m)
    assert s.shape == (19, 36)
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_array_equal(s, model.predict_spectrum(enc, m))


def _perturbed(enc, rows, rng):
    f = enc.voxel_features.clone()
    f[rows] = torch.tensor(rng.normal(0, 1e6, size=(len(rows), f.shape[1])), dtype=f.dtype)
    return SceneEncoding(f, enc.grid)


def test_all_masked_uses_fallback_only(setup, rng):
    _, g, model = setup
    enc = model.encode_scene(g)
    q = model.embed_query([3.0, 2.0, 1.0], 0.0, 90.0, g)
    mask = build_mask(set(), (3.0, 2.0, 1.0), g)
    a = model.decode(q, enc, mask)
    b = model.decode(q, _perturbed(enc, list(range(len(g))), rng), mask)
    assert torch.equal(a, b)


def test_masked_rows_do_not_matter(setup, rng):
    _, g, model = setup
    enc = model.encode_scene(g)
    rx = np.array([2.2, 1.7, 1.1])
    m = build_los_map(rx, g)
    for th, ph in [(0.0, 90.0), (120.0, 40.0), (270.0, 150.0)]:
        mask = query_mask(m, g, th, ph)
        q = model.embed_query(rx, th, ph, g)
        masked = np.flatnonzero(mask.binary_mask == 1)
        assert torch.equal(model.decode(q, enc, mask), model.decode(q, _perturbed(enc, masked, rng), mask))


def test_gathered_path_matches_dense_mask(setup):
    _, g, model = setup
    enc = model.encode_scene(g)
    rx = np.array([4.1, 2.9, 0.6])
    m = build_los_map(rx, g)
    dirs = DirectionGrid()
    th, ph = dirs.angles()
    sup = query_supports(m, g)
    fast = model.forward_batch(enc, np.broadcast_to(rx, (684, 3)), th, ph, sup)
    for i in range(0, 684, 37):
        mask = query_mask(m, g, th[i], ph[i])
        ref = model.decode(model.embed_query(rx, th[i], ph[i], g), enc, mask)
        torch.testing.assert_close(fast[i], ref, rtol=0, atol=1e-12)


def test_permutation_equivariance(rng):
    _, g = _grid(3)
    model = RadTwin(SMALL, seed=1)
    enc = model.encode_scene(g)
    mask = query_mask(build_los_map((2.0, 2.0, 1.0), g), g, 60.0, 80.0)
    q = model.embed_query((2.0, 2.0, 1.0), 60.0, 80.0, g)
    perm = rng.permutation(len(g))
    enc_p = SceneEncoding(enc.voxel_features[perm], g)
    inv = np.argsort(perm)
    mask_p = build_mask({int(inv[v]) for v in mask.los_voxels}, (2.0, 2.0, 1.0), g)
    torch.testing.assert_close(model.decode(q, enc, mask), model.decode(q, enc_p, mask_p), rtol=0, atol=1e-12)


def test_dense_ablation_ignores_mask(setup):
    _, g, _ = setup
    model = build_model("unmasked", SMALL, 0)
    assert model.config.attention == "dense"
    enc = model.encode_scene(g)
    q = model.embed_query([3.0, 2.0, 1.0], 0.0, 90.0, g)
    a = model.decode(q, enc, build_mask({1}, (3, 2, 1), g))
    b = model.decode(q, enc, build_mask({2, 3}, (3, 2, 1), g))
    assert torch.equal(a, b)


def test_clamp_forward_and_gradients():
    z = torch.tensor([-0.5, 0.3, 1.7], dtype=torch.float64, requires_grad=True)
    y = clamp_output(z, 1.0, straight_through=True)
    assert y.tolist() == [0.0, 0.3, 1.0]
    y.sum().backward()
    assert z.grad.tolist() == [1.0, 1.0, 1.0]
    z2 = z.detach().clone().requires_grad_(True)
    clamp_output(z2, 1.0, straight_through=False).sum().backward()
    assert z2.grad.tolist() == [0.0, 1.0, 0.0]


def test_mlp_ignores_scene():
    model = MLPBaseline(SMALL, seed=0)
    a = mlp_baseline([1.0, 1.0, 1.0], 10.0, 20.0, model, (6.0, 4.0, 2.5))
    _, g0 = _grid(0)
    _, g1 = _grid(1)
    dirs = DirectionGrid()
    m = build_los_map((1.0, 1.0, 1.0), g0)
    s0 = model.predict_spectrum(model.encode_scene(g0), m, dirs)
    s1 = model.predict_spectrum(model.encode_scene(g1), m, dirs)
    np.testing.assert_array_equal(s0, s1)
    assert 0.0 <= a <= 1.0


def test_mlp_layer_sizes():
    model = MLPBaseline(ModelConfig(), 0)
    assert [tuple(w.shape) for w in model.weights] == [(128, 84), (128, 128), (128, 128), (1, 128)]


def test_parameter_shapes():
    model = RadTwin(ModelConfig(), 0)
    assert tuple(model.local_w.shape) == (32, 60)
    assert [tuple(w.shape) for w in model.conv_w] == [(64, 32, 3, 3, 3), (256, 64, 3, 3, 3), (768, 256, 3, 3, 3)]
    assert tuple(model.global_w.shape) == (16, 768)
    assert tuple(model.query_w.shape) == (128, 84)
    assert len(model.layers) == 3


def test_unknown_kind():
    with pytest.raises(ValueError):
        build_model("transformer", SMALL)
    with pytest.raises(ValueError):
        ModelConfig(n_heads=2)


def test_moved_obstacle_changes_prediction():
    sc, g = _grid(4)
    sc2 = move_obstacle(sc, 0, (0.0, 0.0, 0.0))
    model = RadTwin(SMALL, 0)
    _, g2 = _grid(4, sc2)
    a = model.encode_scene(g).voxel_features
    b = model.encode_scene(g2).voxel_features
    assert torch.equal(a, b)
