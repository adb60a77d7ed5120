"""Network forward pass, NMS, descriptors, weights, classical detector."""

import numpy as np
import pytest

from evfront.detect import (
    Descriptors,
    NetworkSpec,
    classical_detect,
    forward,
    interpolate_descriptors,
    keypoints_to_jsonl,
    load_weights,
    nms,
    random_weights,
    save_weights,
    zero_weights,
)
from evfront.events import (
    MotionSpec,
    SensorGeometry,
    corner_positions,
    synthesize,
)
from evfront.surface import (
    EventCountRing,
    TimestampGrid,
    WindowSpec,
    apply_events,
    mcts,
)


SPEC = NetworkSpec()


class TestNetworkSpec:
    def test_cell_size_from_depth(self):
        assert SPEC.cell == 16
        assert SPEC.detector_head_channels == 257

    def test_exactly_four_encoder_stages(self):
        with pytest.raises(ValueError):
            NetworkSpec(encoder_widths=(32, 64, 128))


class TestForwardShapes:
    def test_shape_contract(self):
        rng = np.random.default_rng(1)
        w = random_weights(SPEC, 0)
        for h, wd in ((32, 32), (48, 80), (64, 32)):
            x = rng.random((8, h, wd), dtype=np.float32)
            heat, desc = forward(w, x)
            assert heat.shape == (h, wd)
            assert heat.dtype == np.float32
            assert desc.shape == (64, h // 16, wd // 16)
            assert desc.dtype == np.float32

    def test_rejects_non_divisible_input(self):
        w = random_weights(SPEC, 0)
        x = np.zeros((8, 30, 32), dtype=np.float32)
        with pytest.raises(ValueError):
            forward(w, x)

    def test_rejects_wrong_channel_count(self):
        w = random_weights(SPEC, 0)
        x = np.zeros((6, 32, 32), dtype=np.float32)
        with pytest.raises(ValueError):
            forward(w, x)


class TestForwardNumerics:
    def test_heatmap_is_probability_like(self):
        rng = np.random.default_rng(2)
        w = random_weights(SPEC, 3)
        x = rng.random((8, 48, 48), dtype=np.float32)
        heat, _ = forward(w, x)
        assert heat.min() >= 0.0
        assert heat.max() <= 1.0

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        w = random_weights(SPEC, 5)
        x = rng.random((8, 32, 48), dtype=np.float32)
        h1, d1 = forward(w, x)
        h2, d2 = forward(w, x)
        assert np.array_equal(h1, h2)
        assert np.array_equal(d1, d2)

    def test_translation_equivariance_one_cell(self):
        # shifting the input by one cell shifts the heatmap by a cell and
        # the descriptor map by one entry, exactly, away from borders
        rng = np.random.default_rng(6)
        w = random_weights(SPEC, 7)
        c = SPEC.cell
        x = rng.random((8, 8 * c, 8 * c), dtype=np.float32)
        shifted = np.roll(x, (c, c), axis=(1, 2))
        h0, d0 = forward(w, x)
        h1, d1 = forward(w, shifted)
        m = 2 * c  # two-cell interior margin
        assert np.array_equal(h0[m:-m - c, m:-m - c],
                              h1[m + c:-m, m + c:-m])
        assert np.array_equal(d0[:, 2:-3, 2:-3], d1[:, 3:-2, 3:-2])

    def test_zero_weights_give_uniform_softmax(self):
        w = zero_weights(SPEC)
        x = np.zeros((8, 32, 32), dtype=np.float32)
        heat, desc = forward(w, x)
        assert np.allclose(heat, 1.0 / SPEC.detector_head_channels)
        assert np.array_equal(desc, np.zeros_like(desc))


class TestNms:
    def test_spacing_exhaustive(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            heat = rng.random((40, 40)).astype(np.float32)
            radius = int(rng.integers(1, 6))
            kps = nms(heat, radius, 0.0, 200)
            pts = kps.xy
            for i in range(len(pts)):
                d = np.abs(pts[i + 1:] - pts[i]).max(axis=1, initial=radius)
                assert (d >= radius).all()

    def test_strict_local_maxima_only(self):
        heat = np.zeros((9, 9), dtype=np.float32)
        heat[4, 4] = 1.0
        heat[4, 5] = 1.0  # tied neighbor: both suppressed
        kps = nms(heat, 2, 0.5, 10)
        assert len(kps.xy) == 0

    def test_threshold_applies(self):
        heat = np.zeros((9, 9), dtype=np.float32)
        heat[2, 3] = 0.4
        heat[6, 6] = 0.9
        kps = nms(heat, 1, 0.5, 10)
        assert len(kps.xy) == 1
        assert tuple(kps.xy[0]) == (6.0, 6.0)

    def test_scores_descending_and_capped(self):
        rng = np.random.default_rng(9)
        heat = rng.random((64, 64)).astype(np.float32)
        kps = nms(heat, 1, 0.0, 25)
        assert len(kps.xy) == 25
        assert (np.diff(kps.scores) <= 0).all()

    def test_border_peak_detected(self):
        heat = np.zeros((8, 8), dtype=np.float32)
        heat[0, 0] = 0.7
        kps = nms(heat, 3, 0.1, 10)
        assert (kps.xy == [0.0, 0.0]).all()


class TestInterpolateDescriptors:
    def test_cell_center_returns_cell_vector(self):
        rng = np.random.default_rng(10)
        dmap = rng.standard_normal((64, 4, 4)).astype(np.float32)
        # center of cell (1, 2): x = 2*16 + 7.5, y = 1*16 + 7.5
        from evfront.detect import KeypointSet
        kps = KeypointSet(np.array([[39.5, 23.5]]), np.array([1.0]))
        d = interpolate_descriptors(dmap, kps, 16)
        want = dmap[:, 1, 2] / np.linalg.norm(dmap[:, 1, 2])
        assert np.allclose(d.vectors[0], want, atol=1e-6)

    def test_midpoint_blends_equally(self):
        from evfront.detect import KeypointSet
        dmap = np.zeros((64, 1, 2), dtype=np.float32)
        u = np.zeros(64); u[0] = 1.0
        v = np.zeros(64); v[1] = 1.0
        dmap[:, 0, 0] = u
        dmap[:, 0, 1] = v
        # halfway between cell centers x=7.5 and x=23.5
        kps = KeypointSet(np.array([[15.5, 7.5]]), np.array([1.0]))
        d = interpolate_descriptors(dmap, kps, 16)
        want = (u + v) / np.linalg.norm(u + v)
        assert np.allclose(d.vectors[0], want, atol=1e-6)

    def test_unit_norm_outputs(self):
        rng = np.random.default_rng(11)
        dmap = rng.standard_normal((64, 3, 5)).astype(np.float32)
        from evfront.detect import KeypointSet
        xy = np.column_stack([rng.uniform(0, 80, 50), rng.uniform(0, 48, 50)])
        kps = KeypointSet(xy, np.ones(50))
        d = interpolate_descriptors(dmap, kps, 16)
        norms = np.linalg.norm(d.vectors, axis=1)
        assert np.allclose(norms[d.valid], 1.0, atol=1e-4)

    def test_edge_keypoints_clamp(self):
        rng = np.random.default_rng(12)
        dmap = rng.standard_normal((64, 2, 2)).astype(np.float32)
        from evfront.detect import KeypointSet
        kps = KeypointSet(np.array([[0.0, 0.0], [31.0, 31.0]]),
                          np.ones(2))
        d = interpolate_descriptors(dmap, kps, 16)
        w0 = dmap[:, 0, 0] / np.linalg.norm(dmap[:, 0, 0])
        w1 = dmap[:, 1, 1] / np.linalg.norm(dmap[:, 1, 1])
        assert np.allclose(d.vectors[0], w0, atol=1e-6)
        assert np.allclose(d.vectors[1], w1, atol=1e-6)


class TestWeights:
    def test_round_trip_random_bundles(self):
        rng = np.random.default_rng(13)
        for seed in rng.integers(0, 1_000, 5):
            w = random_weights(SPEC, int(seed))
            back = load_weights(save_weights(w))
            assert back.spec == w.spec
            assert back.bn_epsilon == w.bn_epsilon
            for a, b in zip(w.conv_kernels, back.conv_kernels):
                assert np.array_equal(a, b)
            for name in ("bn_scale", "bn_shift", "bn_mean", "bn_var"):
                for a, b in zip(getattr(w, name), getattr(back, name)):
                    assert np.array_equal(a, b)
            assert np.array_equal(w.detector_kernel, back.detector_kernel)
            assert np.array_equal(w.detector_bias, back.detector_bias)
            assert np.array_equal(w.descriptor_kernel, back.descriptor_kernel)
            assert np.array_equal(w.descriptor_bias, back.descriptor_bias)

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            load_weights(b"NOPE" + b"\x00" * 100)

    def test_truncated_tensor_section(self):
        blob = save_weights(random_weights(SPEC, 0))
        with pytest.raises(ValueError) as err:
            load_weights(blob[:-40])
        assert "truncated" in str(err.value)

    def test_header_only(self):
        blob = save_weights(random_weights(SPEC, 0))
        with pytest.raises(ValueError):
            load_weights(blob[:16])

    def test_trailing_bytes_rejected(self):
        blob = save_weights(random_weights(SPEC, 0))
        with pytest.raises(ValueError):
            load_weights(blob + b"\x00\x00\x00\x00")

    def test_seeded_init_reproducible(self):
        a = random_weights(SPEC, 42)
        b = random_weights(SPEC, 42)
        assert all(np.array_equal(x, y)
                   for x, y in zip(a.conv_kernels, b.conv_kernels))

    def test_init_respects_fan_in_bound(self):
        w = random_weights(SPEC, 1)
        k0 = w.conv_kernels[0]          # (32, 8, 3, 3), fan_in = 72
        bound = 1.0 / np.sqrt(8 * 9)
        assert np.abs(k0).max() <= bound


class TestClassicalDetect:
    @staticmethod
    def _tensor(geo, spec, velocity=(40.0, 30.0), duration=1.0,
                pitch=16, side=6):
        motion = MotionSpec("grid-of-corners", velocity, duration,
                            grid_pitch=pitch, square_side=side)
        batch = synthesize(motion, geo)
        grid = TimestampGrid.create(geo)
        ring = EventCountRing(spec.ring_capacity(geo))
        apply_events(grid, ring, batch)
        return motion, batch, mcts(grid, ring, grid.latest_time, spec)

    def test_flat_surface_yields_nothing(self):
        from evfront.surface import MctsTensor
        t = MctsTensor(np.zeros((8, 32, 32), dtype=np.float32), 100,
                       (1, 2, 3, 4))
        kps, desc = classical_detect(t, 1, 4, 1e-4, 100)
        assert len(kps.xy) == 0
        assert desc.vectors.shape == (0, 64)

    def test_recovers_ground_truth_corners(self):
        # at least 90% of true corner positions have a detection within
        # 2 px; axis-aligned motion keeps all four corner types visible
        # as segment ends of the emitting vertical edges
        geo = SensorGeometry(128, 128)
        wspec = WindowSpec.default_constant_count()
        motion, _, tensor = self._tensor(geo, wspec, velocity=(50.0, 0.0))
        kps, _ = classical_detect(tensor, 2, 2, 1e-8, 1024)
        truth = corner_positions(motion, geo, tensor.tau)
        hits = 0
        for c in truth:
            d = np.linalg.norm(kps.xy - c, axis=1).min()
            hits += d <= 2.0
        assert hits / len(truth) >= 0.9

    def test_descriptors_unit_norm_64d(self):
        geo = SensorGeometry(64, 64)
        wspec = WindowSpec.default_constant_count()
        _, _, tensor = self._tensor(geo, wspec)
        _, desc = classical_detect(tensor, 1, 4, 1e-4, 256)
        assert desc.vectors.shape[1] == 64
        norms = np.linalg.norm(desc.vectors[desc.valid], axis=1)
        assert np.allclose(norms, 1.0, atol=1e-5)

    def test_translation_symmetry_duplicates(self):
        # same-type corners on the rigid lattice look identical
        geo = SensorGeometry(64, 64)
        wspec = WindowSpec.default_constant_count()
        _, _, tensor = self._tensor(geo, wspec)
        _, desc = classical_detect(tensor, 1, 4, 1e-4, 256)
        distinct = np.unique(np.round(desc.vectors, 5), axis=0)
        assert len(distinct) < len(desc.vectors)

    def test_channel_pair_bounds_checked(self):
        geo = SensorGeometry(32, 32)
        wspec = WindowSpec.default_constant_count()
        _, _, tensor = self._tensor(geo, wspec)
        with pytest.raises(ValueError):
            classical_detect(tensor, 4, 4, 1e-4, 100)


class TestKeypointExport:
    def test_jsonl_lines_parse(self):
        import json
        from evfront.detect import KeypointSet
        kps = KeypointSet(np.array([[1.0, 2.0], [3.0, 4.0]]),
                          np.array([0.9, 0.5]))
        desc = Descriptors(np.eye(2, 64, dtype=np.float32),
                           np.array([True, True]))
        lines = keypoints_to_jsonl(kps, desc).splitlines()
        assert len(lines) == 2
        row = json.loads(lines[0])
        assert row["x"] == 1.0 and row["y"] == 2.0
        assert len(row["descriptor"]) == 64
