import numpy as np
import pytest

from evtrack.autodiff import Tensor, ops
from evtrack.correlation import (
    CorrelationPyramid,
    build_pyramid,
    correlate,
    correlate_batch,
    correlate_oracle,
    init_queries,
    load_queries_csv,
    offsets_grid,
)
from evtrack.encoders import FeatureMap
from evtrack.errors import ConfigError, UsageError


def random_pyramid(rng, channels=8, h=12, w=16, levels=3, scale=4):
    fused = Tensor(rng.standard_normal((channels, h, w)).astype(np.float32))
    return build_pyramid(fused, levels, scale)


def test_pyramid_shapes_hand_case():
    fused = Tensor(np.zeros((128, 45, 60), dtype=np.float32))
    pyr = build_pyramid(fused, 4, 4)
    shapes = [(m.shape[-2], m.shape[-1]) for m in pyr.levels]
    assert shapes == [(45, 60), (23, 30), (12, 15), (6, 8)]


def test_pyramid_single_level_and_constant():
    fused = Tensor(np.full((4, 6, 6), 2.5, dtype=np.float32))
    pyr = build_pyramid(fused, 1, 4)
    assert len(pyr.levels) == 1 and pyr.levels[0] is fused
    deep = build_pyramid(fused, 3, 4)
    for level in deep.levels:
        assert np.all(level.data == np.float32(2.5))


def test_pyramid_depth_error():
    fused = Tensor(np.zeros((4, 2, 2), dtype=np.float32))
    with pytest.raises(ConfigError):
        build_pyramid(fused, 4, 4)


def test_correlate_length_and_unit_case():
    c = 6
    maps = Tensor(np.zeros((c, 10, 10), dtype=np.float32))
    e1 = np.zeros(c, dtype=np.float32)
    e1[0] = 1.0
    const = np.zeros((c, 10, 10), dtype=np.float32)
    const[0] = 1.0
    pyr = build_pyramid(Tensor(const), 4, 4)
    vec = correlate(Tensor(e1), pyr, (20.0, 20.0), 3)
    assert vec.shape == (4 * 49,)
    # interior samples of a constant e1 map dot e1 -> exactly 1
    center = vec.data.reshape(4, 49)[:, 24]
    assert np.allclose(center[:2], 1.0)
    assert vec.shape[0] == 196

    far = correlate(Tensor(e1), pyr, (1e6, 1e6), 3)
    assert not far.data.any()
    del maps


def test_correlate_linear_in_feature(rng):
    pyr = random_pyramid(rng)
    f = rng.standard_normal(8).astype(np.float32)
    base = correlate(Tensor(f), pyr, (7.0, 5.0), 2).data
    scaled = correlate(Tensor(3.0 * f), pyr, (7.0, 5.0), 2).data
    assert np.allclose(scaled, 3.0 * base, rtol=1e-5, atol=1e-5)


def test_self_correlation_center_is_norm_squared(rng):
    fused = Tensor(rng.standard_normal((8, 12, 16)).astype(np.float32))
    pyr = build_pyramid(fused, 1, 4)
    cell = (5, 3)  # integer feature cell (x, y)
    f = fused.data[:, cell[1], cell[0]]
    vec = correlate(Tensor(f), pyr, (cell[0] * 4, cell[1] * 4), 0)
    assert vec.shape == (1,)
    assert np.allclose(vec.data[0], np.dot(f, f), rtol=1e-5)


def test_correlate_matches_oracle_randomized(rng):
    for trial in range(60):
        levels = int(rng.integers(1, 4))
        pyr = random_pyramid(rng, levels=levels)
        f = rng.standard_normal(8).astype(np.float32)
        # mix in-bounds, border, and far-outside positions
        pos = rng.uniform(-30, 90, size=2)
        r = int(rng.integers(0, 4))
        fast = correlate(Tensor(f), pyr, pos, r).data
        slow = correlate_oracle(f, pyr, pos, r)
        assert fast.shape == slow.shape
        assert np.max(np.abs(fast - slow)) < 1e-5


def test_correlate_batch_matches_single(rng):
    levels = 3
    w_len, n = 4, 3
    stacks = []
    per_slice = []
    for _ in range(w_len):
        pyr = random_pyramid(rng, levels=levels)
        per_slice.append(pyr)
    for lv in range(levels):
        stacks.append(ops.stack([p.levels[lv] for p in per_slice], axis=0))
    feats = rng.standard_normal((w_len, n, 8)).astype(np.float32)
    positions = rng.uniform(0, 60, size=(w_len, n, 2)).astype(np.float32)
    batch = correlate_batch(Tensor(feats), stacks, Tensor(positions), 2, 4).data
    for t in range(w_len):
        for q in range(n):
            single = correlate(Tensor(feats[t, q]), per_slice[t], positions[t, q], 2).data
            assert np.allclose(batch[t, q], single, atol=1e-5)


def test_offsets_layout():
    offs = offsets_grid(1)
    assert offs.shape == (9, 2)
    # dy-major, dx fastest; rows are (dx, dy)
    assert np.array_equal(offs[0], [-1, -1])
    assert np.array_equal(offs[1], [0, -1])
    assert np.array_equal(offs[4], [0, 0])
    assert np.array_equal(offs[8], [1, 1])


def make_frame_map(rng, c=8, h=10, w=12, scale=4):
    return FeatureMap(
        tensor=Tensor(rng.standard_normal((c, h, w)).astype(np.float32)),
        source="frame",
        t_frame=0,
        t_slice=0,
        scale=scale,
    )


def test_init_queries_replicates(rng):
    fmap = make_frame_map(rng)
    pos = np.array([[8.0, 4.0], [8.0, 4.0], [20.0, 16.0]])
    queries, state = init_queries(pos, fmap, window=16)
    assert state.positions.shape == (16, 3, 2)
    assert np.all(state.positions == pos[None])
    assert state.features.shape == (16, 3, 8)
    # grid-aligned position: template equals the stored cell exactly
    assert np.allclose(queries[0].template.data, fmap.tensor.data[:, 1, 2])
    # identical positions give identical templates
    assert np.array_equal(queries[0].template.data, queries[1].template.data)
    # all W entries replicate the template
    assert np.all(state.features.data[:, 2] == state.features.data[0, 2])


def test_init_queries_errors(rng):
    fmap = make_frame_map(rng)
    with pytest.raises(UsageError):
        init_queries(np.zeros((0, 2)), fmap, 8)
    with pytest.raises(UsageError):
        init_queries(np.array([[1e5, 1e5]]), fmap, 8)
    fused = FeatureMap(fmap.tensor, "fused", 0, 0, 4)
    with pytest.raises(UsageError):
        init_queries(np.array([[1.0, 1.0]]), fused, 8)


def test_query_csv(tmp_path):
    path = tmp_path / "queries.csv"
    path.write_text("id,t_us,x,y\n0,0,10.5,20.25\n3,1000,5,6\n")
    rows = load_queries_csv(str(path))
    assert rows == [(0, 0, 10.5, 20.25), (3, 1000, 5.0, 6.0)]
    empty = tmp_path / "empty.csv"
    empty.write_text("id,t_us,x,y\n")
    with pytest.raises(UsageError):
        load_queries_csv(str(empty))
