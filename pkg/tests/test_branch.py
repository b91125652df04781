
import numpy as np
import pytest
from conftest import forward_camera, random_se3

from bevinst.adaptor import POTENTIAL, PROPOSAL, SparseQuerySet
from bevinst.branch import (
    BoxEmbedParams,
    LayerParams,
    RefinementState,
    SampledFeatureStack,
    SamplingHeads,
    decode,
    embed_box,
    partition_box,
    refine_layer,
    spatiotemporal_sample,
    temporal_fuse,
)
from bevinst.errors import DimensionMismatch, LambdaOutOfRange, NoHistory
from bevinst.geometry import EgoPose, SE3Transform, project_points
from bevinst.grid_ops import (
    AttentionParams,
    FeatureGrid,
    LinearMap,
    gelu,
    sample_bilinear,
)
from bevinst.scene import (
    APPEARANCE_CHANNELS,
    MASK_CHANNEL,
    SceneConfig,
    generate_scene,
    ground_truth_boxes,
    render_all,
)


def random_boxes(rng, n):
    b = rng.normal(size=(n, 10))
    b[:, 3:6] = np.abs(b[:, 3:6])
    return b


def embed_params(rng, c):
    return BoxEmbedParams(
        LinearMap("position", rng.normal(size=(c, 3))),
        LinearMap("scale", rng.normal(size=(c, 3))),
        LinearMap("velocity", rng.normal(size=(c, 2))),
        LinearMap("orientation", rng.normal(size=(c, 2))),
        LinearMap("glob", rng.normal(size=(c, c))),
    )


def selector(name, channels, c_in):
    w = np.zeros((len(channels), c_in))
    w[np.arange(len(channels)), channels] = 1.0
    return LinearMap(name, w)


def zero_heads(c, frames, k=1, inner=None, outer=None):
    inner = inner or LinearMap.identity("inner", c)
    outer = outer or LinearMap.identity("outer", inner.out_dim)
    return SamplingHeads(
        LinearMap.zeros("offset", c, frames * k * 2), LinearMap.zeros("weight", c, frames * k), inner, outer
    )


class TestPartition:
    def test_zero_box(self):
        parts = partition_box(np.zeros((1, 10)))
        for arr in (parts.position, parts.scale, parts.velocity):
            np.testing.assert_array_equal(arr, 0.0)
        np.testing.assert_array_equal(parts.orientation, [[0.0, 1.0]])
        assert parts.degenerate.tolist() == [True]

    def test_column_slices_and_round_trip(self, rng):
        boxes = random_boxes(rng, 20)
        boxes[:, 6:8] /= np.linalg.norm(boxes[:, 6:8], axis=1, keepdims=True)
        parts = partition_box(boxes)
        np.testing.assert_array_equal(parts.position, boxes[:, 0:3])
        np.testing.assert_array_equal(parts.scale, boxes[:, 3:6])
        np.testing.assert_array_equal(parts.velocity, boxes[:, 8:10])
        assert np.max(np.abs(parts.assemble() - boxes)) < 1e-9

    def test_orientation_renormalized(self, rng):
        parts = partition_box(random_boxes(rng, 10))
        np.testing.assert_allclose(np.linalg.norm(parts.orientation, axis=1), 1.0, atol=1e-6)

    def test_width(self):
        with pytest.raises(DimensionMismatch):
            partition_box(np.zeros((2, 9)))


class TestEmbed:
    def test_zero_box_zero_embedding(self, rng):
        from bevinst.branch import BoxPartition

        z = BoxPartition(np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 2)), np.zeros((3, 2)))
        np.testing.assert_array_equal(embed_box(z, embed_params(rng, 8)), 0.0)

    def test_additivity(self, rng):
        from bevinst.branch import BoxPartition

        params = embed_params(rng, 8)

        def raw(b):  # pre-renormalization partition
            return BoxPartition(b[:, 0:3], b[:, 3:6], b[:, 8:10], b[:, 6:8])

        b1, b2 = rng.normal(size=(2, 5, 10))
        lhs = embed_box(raw(b1 + b2), params)
        assert np.max(np.abs(lhs - embed_box(raw(b1), params) - embed_box(raw(b2), params))) < 1e-8

    def test_five_matrix_oracle(self, rng):
        params = embed_params(rng, 6)
        parts = partition_box(random_boxes(rng, 7))
        want = (
            params.position.weights @ parts.position.T
            + params.scale.weights @ parts.scale.T
            + params.velocity.weights @ parts.velocity.T
            + params.orientation.weights @ parts.orientation.T
        )
        want = (params.glob.weights @ want).T
        assert np.max(np.abs(embed_box(parts, params) - want)) < 1e-9


def frozen_world(rng, frames=4, c=3):
    cam = forward_camera(width=40, height=30, fx=30, fy=30)
    data = rng.normal(size=(c, 30, 40))
    features = [[FeatureGrid(data.copy(), frame=t)] for t in range(frames)]
    poses = [EgoPose(SE3Transform.identity(), -0.5 * t) for t in range(frames)]
    return cam, features, poses


class TestSpatiotemporal:
    def test_frozen_world_time_invariance(self, rng):
        cam, features, poses = frozen_world(rng)
        n, c = 12, 3
        boxes = np.zeros((n, 10))
        boxes[:, 0] = rng.uniform(5, 20, n)
        boxes[:, 1] = rng.uniform(-3, 3, n)
        boxes[:, 2] = rng.uniform(0.5, 2.5, n)
        boxes[:, 7] = 1.0
        k = 4
        heads = SamplingHeads(
            LinearMap.zeros("offset", c, 4 * k * 2),
            LinearMap("weight", np.zeros((4 * k, c)), np.tile(rng.normal(size=k), 4)),
            LinearMap("inner", rng.normal(size=(c, c))),
            LinearMap("outer", rng.normal(size=(c, c))),
        )
        stack = spatiotemporal_sample(features, partition_box(boxes), [cam], poses, heads, rng.normal(size=(n, c)))
        assert stack.validity.all()
        assert np.max(np.abs(stack.per_frame - stack.per_frame[0])) < 1e-8

    def test_degenerate_single_read(self, rng):
        cam, features, poses = frozen_world(rng, frames=1)
        boxes = np.zeros((5, 10))
        boxes[:, 0] = rng.uniform(5, 20, 5)
        boxes[:, 1] = rng.uniform(-3, 3, 5)
        inner = LinearMap("inner", rng.normal(size=(4, 3)))
        outer = LinearMap("outer", rng.normal(size=(2, 4)))
        heads = zero_heads(3, 1, inner=inner, outer=outer)
        stack = spatiotemporal_sample(features, partition_box(boxes), [cam], poses, heads, np.zeros((5, 3)), t_chi=0)
        uv = project_points(cam, boxes[:, :3])[0]
        want = sample_bilinear(features[0][0].data, uv) @ (outer.weights @ inner.weights).T
        assert np.max(np.abs(stack.per_frame[0] - want)) < 1e-12

    def test_invisible_queries_zero_and_invalid(self, rng):
        cam, features, poses = frozen_world(rng, frames=1)
        boxes = np.zeros((2, 10))
        boxes[0, 0] = -10.0  # behind the camera
        boxes[1, :2] = (10.0, 500.0)  # far outside the image
        stack = spatiotemporal_sample(features, partition_box(boxes), [cam], poses, zero_heads(3, 1), np.zeros((2, 3)),
                                      t_chi=0)
        assert not stack.validity.any()
        np.testing.assert_array_equal(stack.per_frame, 0.0)

    def test_views_are_averaged(self, rng):
        cam, features, poses = frozen_world(rng, frames=1)
        twin = [[features[0][0], FeatureGrid(2 * features[0][0].data)]]
        boxes = np.zeros((1, 10))
        boxes[0, 0] = 10.0
        heads = zero_heads(3, 1)
        one = spatiotemporal_sample(features, partition_box(boxes), [cam], poses, heads, np.zeros((1, 3)), t_chi=0)
        two = spatiotemporal_sample(twin, partition_box(boxes), [cam, cam], poses, heads, np.zeros((1, 3)), t_chi=0)
        np.testing.assert_allclose(two.per_frame, 1.5 * one.per_frame, atol=1e-12)

    def test_no_history(self, rng):
        cam, features, poses = frozen_world(rng, frames=2)
        with pytest.raises(NoHistory):
            spatiotemporal_sample(features, partition_box(np.zeros((1, 10))), [cam], poses, zero_heads(3, 4),
                                  np.zeros((1, 3)), t_chi=3)

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_moving_object_compensated(self, seed):
        cfg = SceneConfig(num_regular=1, num_small=0, regular_speed=(3.0, 8.0), channels=16)
        scene = generate_scene(cfg, seed)
        features = render_all(scene)
        box = ground_truth_boxes(scene)
        app = list(APPEARANCE_CHANNELS) + [MASK_CHANNEL]
        heads = zero_heads(16, 4, inner=selector("inner", app, 16), outer=LinearMap.identity("outer", 4))
        stack = spatiotemporal_sample(features, partition_box(box), scene.rig, scene.poses, heads, np.zeros((1, 16)),
                                      t_chi=3, tau=scene.tau)
        assert stack.validity.any(axis=2).all(), "object must stay visible"
        want = np.append(np.float32(scene.tracks[0].appearance), 1.0)
        assert np.max(np.abs(stack.per_frame[:, 0] - want)) < 1e-5
        # without velocity compensation the historical reads miss the moving object's silhouette
        still = box.copy()
        still[:, 8:10] = 0.0
        stale = spatiotemporal_sample(features, partition_box(still), scene.rig, scene.poses, heads,
                                      np.zeros((1, 16)), t_chi=3, tau=scene.tau)
        assert np.max(np.abs(stale.per_frame[3, 0] - want)) > 1e-3


def sum_of_halves(c):
    return [(LinearMap("enc", np.hstack([np.eye(c), np.eye(c)])), "none")]


class TestTemporalFuse:
    def test_no_history(self, rng):
        f0 = rng.normal(size=(1, 4, 3))
        np.testing.assert_array_equal(temporal_fuse(f0, 0.6, sum_of_halves(3)), f0[0])

    def test_linear_collapse_coefficients(self):
        # unit basis per frame makes the coefficient of each frame directly readable
        frames = np.zeros((4, 1, 4))
        frames[np.arange(4), 0, np.arange(4)] = 1.0
        fused = temporal_fuse(SampledFeatureStack(frames, np.ones((4, 1, 1), dtype=bool)), 0.6, sum_of_halves(4))
        np.testing.assert_allclose(fused[0], [1.0, 0.6, 0.36, 0.216], rtol=0, atol=1e-15)
        assert fused[0, 0] == 1.0

    def test_coefficients_are_lambda_power_t(self, rng):
        lam = 0.37
        frames = rng.normal(size=(6, 3, 2))
        fused = temporal_fuse(frames, lam, sum_of_halves(2))
        want = sum(lam**t * frames[t] for t in range(6))
        assert np.max(np.abs(fused - want)) < 1e-12

    def test_mlp_encoder_against_loop(self, rng):
        c = 4
        enc = [(LinearMap("e0", rng.normal(size=(c, 2 * c)), rng.normal(size=c)), "gelu"),
               (LinearMap("e1", rng.normal(size=(c, c)), rng.normal(size=c)), "none")]
        frames = rng.normal(size=(4, 5, c))
        f = frames[3]
        for t in (3, 2, 1):
            x = np.concatenate([frames[t - 1], 0.6 * f], axis=1)
            f = gelu(x @ enc[0][0].weights.T + enc[0][0].bias) @ enc[1][0].weights.T + enc[1][0].bias
        assert np.max(np.abs(temporal_fuse(frames, 0.6, enc) - f)) < 1e-8

    @pytest.mark.parametrize("lam", [0.0, 1.0, -0.2, 1.5])
    def test_lambda_range(self, lam):
        with pytest.raises(LambdaOutOfRange):
            temporal_fuse(np.zeros((2, 1, 1)), lam, sum_of_halves(1))


def query_set(rng, n, c, n_pot=0):
    boxes = random_boxes(rng, n)
    boxes[:, 6:8] /= np.linalg.norm(boxes[:, 6:8], axis=1, keepdims=True)
    prov = np.array([PROPOSAL] * (n - n_pot) + [POTENTIAL] * n_pot)
    return SparseQuerySet(rng.normal(size=(n, c)), boxes, prov)


def reg_head(rng, c, zero=False):
    if zero:
        return [(LinearMap.zeros("r0", c, c), "gelu"), (LinearMap.zeros("r1", c, 10), "none")]
    return [(LinearMap("r0", rng.normal(size=(c, c)), rng.normal(size=c)), "gelu"),
            (LinearMap("r1", 0.1 * rng.normal(size=(10, c)), 0.1 * rng.normal(size=10)), "none")]


class TestRefine:
    def test_zero_head_updates_features_only(self, rng):
        q = query_set(rng, 6, 4)
        f_delta = rng.normal(size=(6, 4))
        out = refine_layer(RefinementState(q, eta=3.0), rng.normal(size=(6, 4)), f_delta, reg_head(rng, 4, zero=True))
        np.testing.assert_allclose(out.queries.boxes, q.boxes, rtol=0, atol=1e-12)  # renorm of unit rows: ulp-level
        np.testing.assert_allclose(out.queries.features, q.features + 3.0 * f_delta)
        assert out.layer == 1

    def test_full_no_op(self, rng):
        q = query_set(rng, 6, 4)
        out = refine_layer(RefinementState(q), np.zeros((6, 4)), np.zeros((6, 4)), reg_head(rng, 4, zero=True))
        np.testing.assert_array_equal(out.queries.features, q.features)
        np.testing.assert_allclose(out.queries.boxes, q.boxes, rtol=0, atol=1e-12)  # renorm of unit rows: ulp-level

    def test_against_explicit_arithmetic(self, rng):
        q = query_set(rng, 8, 4, n_pot=3)
        g, f_delta = rng.normal(size=(2, 8, 4))
        head = reg_head(rng, 4)
        out = refine_layer(RefinementState(q, eta=2.5), g, f_delta, head)
        feats = q.features + 2.5 * f_delta
        hidden = gelu((feats + g) @ head[0][0].weights.T + head[0][0].bias)
        delta = hidden @ head[1][0].weights.T + head[1][0].bias
        boxes = q.boxes + delta
        boxes[:, 6:8] /= np.linalg.norm(boxes[:, 6:8], axis=1, keepdims=True)
        boxes[:, 3:6] = np.maximum(boxes[:, 3:6], 0.0)
        assert np.max(np.abs(out.queries.features - feats)) < 1e-8
        assert np.max(np.abs(out.queries.boxes - boxes)) < 1e-8
        assert np.max(np.abs(out.box_offsets - delta)) < 1e-8
        np.testing.assert_array_equal(out.queries.provenance, q.provenance)

    def test_shape_checks(self, rng):
        q = query_set(rng, 3, 4)
        with pytest.raises(DimensionMismatch):
            refine_layer(RefinementState(q), np.zeros((3, 4)), np.zeros((3, 5)), reg_head(rng, 4))

    def test_state_validation(self, rng):
        with pytest.raises(ValueError):
            RefinementState(query_set(rng, 1, 2), eta=0.0)


def zero_layer(c, frames, k=2):
    z = lambda n, i, o: LinearMap.zeros(n, i, o)
    return LayerParams(
        attn=AttentionParams(z("q", c, c), z("k", c, c), z("v", c, c), z("o", c, c), heads=2),
        embed=BoxEmbedParams(z("p", 3, c), z("s", 3, c), z("v", 2, c), z("o", 2, c), z("g", c, c)),
        sampling=SamplingHeads(z("off", c, frames * k * 2), z("w", c, frames * k), z("in", c, c), z("out", c, c)),
        enc=[(z("enc", 2 * c, c), "none")],
        reg=[(z("r0", c, c), "gelu"), (z("r1", c, 10), "none")],
        cls=z("cls", c, 1),
    )


def random_layer(rng, c, frames, k=2):
    r = lambda n, i, o, s=0.3: LinearMap(n, s * rng.normal(size=(o, i)), s * rng.normal(size=o))
    return LayerParams(
        attn=AttentionParams(r("q", c, c), r("k", c, c), r("v", c, c), r("o", c, c), heads=2),
        embed=embed_params(rng, c),
        sampling=SamplingHeads(r("off", c, frames * k * 2), r("w", c, frames * k), r("in", c, c), r("out", c, c)),
        enc=[(r("enc", 2 * c, c), "gelu"), (r("enc2", c, c), "none")],
        reg=[(r("r0", c, c), "gelu"), (r("r1", c, 10, 0.05), "none")],
        cls=r("cls", c, 1),
    )


class TestDecode:
    @pytest.fixture
    def world(self, rng):
        cam, features, _ = frozen_world(rng, frames=4, c=4)
        poses = [EgoPose(random_se3(rng, 0.5), -0.5 * t) for t in range(4)]
        poses[0] = EgoPose(SE3Transform.identity(), 0.0)
        return cam, features, poses

    def test_zero_params_single_layer(self, rng, world):
        cam, features, poses = world
        q = query_set(rng, 7, 4, n_pot=2)
        dets = decode(q, features, [cam], poses, [zero_layer(4, 4)], output_count=300)
        assert len(dets) == 7
        np.testing.assert_array_equal(dets.scores, 0.5)
        np.testing.assert_allclose(dets.boxes, q.boxes[dets.query_index], rtol=0, atol=1e-12)
        # equal scores rank by x ascending
        assert np.all(np.diff(dets.boxes[:, 0]) >= 0)

    def test_truncation_and_invariants(self, rng, world):
        cam, features, poses = world
        q = query_set(rng, 20, 4, n_pot=8)
        layers = [random_layer(rng, 4, 4) for _ in range(3)]
        dets = decode(q, features, [cam], poses, layers, output_count=9)
        assert len(dets) == 9
        assert np.all(np.diff(dets.scores) <= 0)
        np.testing.assert_allclose(np.linalg.norm(dets.boxes[:, 6:8], axis=1), 1.0, atol=1e-6)
        np.testing.assert_array_equal(dets.provenance, q.provenance[dets.query_index])

    def test_deterministic(self, rng, world):
        cam, features, poses = world
        q = query_set(rng, 10, 4, n_pot=4)
        layers = [random_layer(rng, 4, 4) for _ in range(2)]
        a = decode(q, features, [cam], poses, layers)
        b = decode(q, features, [cam], poses, layers)
        assert a.boxes.tobytes() == b.boxes.tobytes() and a.scores.tobytes() == b.scores.tobytes()

    def test_requires_a_layer(self, rng, world):
        cam, features, poses = world
        with pytest.raises(ValueError):
            decode(query_set(rng, 2, 4), features, [cam], poses, [])
