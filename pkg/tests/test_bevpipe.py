import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bevbench.bevpipe import (DEFAULT_CAMERA_CHANNELS, LIDAR_CHANNELS, BEVEncoderSpec, BEVGrid, DepthConfig,
                              DepthDistribution, GridSpec, PipelineConfig, VoxelGrid, bev_pool, box_spread,
                              camera_bev, dump_bev, estimate_depth_distribution, fuse_bev,
                              lidar_bev, lift_camera_features, run_pipeline, voxelize, zero_bev)
from bevbench.degrade import LidarDegradeSpec, lidar_dropout
from bevbench.scene import CameraModel, RigidTransform, SceneGenConfig, camera_pose_for_azimuth, generate_scene
from bevbench.sensors import FeatureImage, PointCloud, render_cameras, render_lidar

SMALL = GridSpec((-4.0, 4.0), (-4.0, 4.0), (-2.0, 2.0), (0.5, 0.5, 0.5))


def cloud_from(xyz, intensity=None):
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    inten = np.zeros(len(xyz)) if intensity is None else intensity
    return PointCloud(xyz, inten, np.zeros(len(xyz), dtype=np.int64))


def feature_image(H, W, occupied, depth_value, camera_id="c", C=2):
    grid = np.zeros((H, W, C))
    depth = np.zeros((H, W))
    for v, u in occupied:
        grid[v, u] = 1.0 + np.arange(C)
        depth[v, u] = depth_value
    names = ("occupancy",) + tuple(f"f{k}" for k in range(C - 1))
    return FeatureImage(camera_id, grid, depth, names)


def simple_camera(H=6, W=8, f=4.0, cid="c"):
    return CameraModel(cid, (f, f, W / 2, H / 2), (H, W), camera_pose_for_azimuth(0.0, (0.0, 0.0, 0.0)))


class TestGridSpec:
    def test_default_dims(self):
        assert GridSpec().dims == (360, 360, 16)

    def test_boundary_rule(self):
        idx, inside = SMALL.cell_index([[0.5, -4.0, 2.0], [4.0, 4.0, -2.0], [4.01, 0, 0]])
        assert idx[0].tolist() == [9, 0, 7]  # on a max edge -> next cell; grid max clipped
        assert idx[1].tolist() == [15, 15, 0]
        assert inside.tolist() == [True, True, False]

    def test_invalid(self):
        with pytest.raises(ValueError):
            GridSpec((1.0, 1.0))
        with pytest.raises(ValueError):
            GridSpec(resolution=(0.3, 0.0, 0.5))


class TestVoxelize:
    def test_empty(self):
        assert not voxelize(PointCloud.empty(), SMALL).data.any()

    def test_single_point_at_center(self):
        vg = voxelize(cloud_from([0.25, 0.25, 0.25], np.array([0.5])), SMALL)
        nz = np.argwhere(vg.data[..., 0])
        assert nz.tolist() == [[8, 8, 4]]
        assert vg.data[8, 8, 4].tolist() == [1.0, 0.5, 0.0]
        assert np.count_nonzero(vg.data) == 2

    def test_count_conservation(self, rng):
        pts = rng.uniform(-5, 5, size=(500, 3))
        in_range = np.all((pts >= SMALL.mins) & (pts <= SMALL.maxs), axis=1).sum()
        vg = voxelize(cloud_from(pts), SMALL)
        assert vg.data[..., 0].sum() == in_range
        assert bev_pool(vg).data[..., 0].sum() == in_range

    def test_lidar_bev_equals_pool(self, rng):
        pts = rng.uniform(-4, 4, size=(300, 3))
        c = cloud_from(pts, rng.random(300))
        a, b = lidar_bev(c, SMALL), bev_pool(voxelize(c, SMALL))
        assert a.channel_names == b.channel_names == LIDAR_CHANNELS
        assert np.abs(a.data - b.data).max() < 1e-12

    def test_dropout_then_voxelize(self, rng):
        c = cloud_from(rng.uniform(-1.9, 1.9, size=(250, 3)))
        out = lidar_dropout(c, LidarDegradeSpec(0.7, 4))
        assert voxelize(out, SMALL).data[..., 0].sum() == len(out)


class TestDepthDistribution:
    def test_uniform(self):
        img = feature_image(2, 2, [(0, 1)], 5.0)
        p = estimate_depth_distribution(img, 4, "uniform").probs
        assert p[0, 1].tolist() == [0.25] * 4
        assert not p[0, 0].any()

    def test_one_hot_limit(self):
        img = feature_image(1, 1, [(0, 0)], 12.3)
        d = estimate_depth_distribution(img, 8, "oracle", tau=0.0, z_near=0.0, z_far=40.0)
        assert d.probs[0, 0].tolist() == [0, 0, 1, 0, 0, 0, 0, 0]
        tiny = estimate_depth_distribution(img, 8, "oracle", tau=1e-3, z_near=0.0, z_far=40.0)
        assert int(np.argmax(tiny.probs[0, 0])) == 2

    def test_gaussian_oracle(self):
        img = feature_image(1, 1, [(0, 0)], 10.0)
        d = estimate_depth_distribution(img, 8, "oracle", tau=2.0, z_near=0.0, z_far=40.0)
        centers = [2.5 + 5 * k for k in range(8)]
        w = [math.exp(-((c - 10.0) ** 2) / (2 * 2.0 ** 2)) for c in centers]
        expected = [x / sum(w) for x in w]
        assert np.abs(d.probs[0, 0] - expected).max() < 1e-9
        assert d.bin_edges.tolist() == [0, 5, 10, 15, 20, 25, 30, 35, 40]

    def test_rows_normalized(self):
        s = generate_scene(SceneGenConfig(), 3)
        for img in render_cameras(s)[:2]:
            p = estimate_depth_distribution(img, 59).probs
            sums = p.sum(axis=2)
            occ = img.depth > 0
            assert np.abs(sums[occ] - 1).max() < 1e-9 and not sums[~occ].any()

    def test_invalid(self):
        img = feature_image(1, 1, [(0, 0)], 3.0)
        with pytest.raises(ValueError):
            estimate_depth_distribution(img, 4, "learned")
        with pytest.raises(ValueError):
            estimate_depth_distribution(img, 0)
        with pytest.raises(ValueError):
            DepthDistribution(np.zeros((1, 1, 2)), np.array([0.0, 1.0, 1.0]))


class TestLift:
    spec = GridSpec((-1.0, 20.0), (-10.0, 10.0), (-5.0, 5.0), (1.0, 1.0, 1.0))

    def test_zero_image(self):
        cam = simple_camera()
        img = feature_image(6, 8, [], 0.0)
        d = estimate_depth_distribution(img, 4, "uniform", z_near=1, z_far=9)
        assert not lift_camera_features(img, d, cam, self.spec).data.any()

    def test_one_hot_single_voxel(self):
        cam = simple_camera()
        img = feature_image(6, 8, [(3, 4)], 6.5)
        d = estimate_depth_distribution(img, 4, "oracle", tau=0.0, z_near=1, z_far=9)
        vg = lift_camera_features(img, d, cam, self.spec)
        nz = np.argwhere(vg.data[..., 0])
        assert len(nz) == 1
        assert vg.data[tuple(nz[0])].tolist() == [1.0, 2.0]

    def test_uniform_split(self):
        cam = simple_camera()
        img = feature_image(6, 8, [(3, 4)], 6.5)
        d = estimate_depth_distribution(img, 4, "uniform", z_near=1, z_far=9)
        vg = lift_camera_features(img, d, cam, self.spec)
        occ = vg.data[..., 0]
        assert np.count_nonzero(occ) == 4
        assert np.allclose(occ[occ > 0], 0.25, atol=1e-12)
        assert abs(occ.sum() - 1.0) < 1e-9

    def test_one_hot_equals_point_projection(self, rng):
        # brute force: back-project each pixel center to its bin-center depth by hand
        cam = simple_camera(H=3, W=3, f=2.0)
        occupied = [(v, u) for v in range(3) for u in range(3) if rng.random() < 0.8]
        img = feature_image(3, 3, occupied, 7.2)
        d = estimate_depth_distribution(img, 6, "oracle", tau=0.0, z_near=1, z_far=13)
        vg = lift_camera_features(img, d, cam, self.spec)
        ref = np.zeros_like(vg.data)
        for v, u in occupied:
            z = 8.0  # 2 m bins from 1 m: 7.2 falls in [7, 9), center 8
            x_cam = (u + 0.5 - 1.5) / 2.0 * z
            y_cam = (v + 0.5 - 1.5) / 2.0 * z
            ego = np.array([z, -x_cam, -y_cam])  # forward, left = -right, up = -down
            i, j, k = (int(math.floor((ego[a] - self.spec.mins[a]) / 1.0)) for a in range(3))
            ref[i, j, k] += img.grid[v, u]
        assert np.abs(vg.data - ref).max() < 1e-12

    def test_mass_conservation(self, rng):
        cam = simple_camera(H=6, W=8, f=6.0)
        occupied = [(v, u) for v in range(6) for u in range(8)]
        img = feature_image(6, 8, occupied, 5.0, C=3)
        img = img.replace_grid(img.grid * rng.random((6, 8, 1)))
        d = estimate_depth_distribution(img, 5, "oracle", tau=1.5, z_near=1, z_far=11)
        vg = lift_camera_features(img, d, cam, self.spec)
        assert np.abs(vg.data.sum(axis=(0, 1, 2)) - img.grid.sum(axis=(0, 1))).max() < 1e-9
        bev = bev_pool(vg)
        assert np.abs(bev.data.sum(axis=(0, 1)) - img.grid.sum(axis=(0, 1))).max() < 1e-9

    def test_camera_bev_equals_lift_then_pool(self):
        s = generate_scene(SceneGenConfig(), 6)
        imgs = render_cameras(s)
        cfg = DepthConfig()
        spec = GridSpec()
        fast = camera_bev(imgs, s.cameras, spec, cfg)
        slow = np.zeros_like(fast.data)
        for img, cam in zip(imgs, s.cameras):
            dist = estimate_depth_distribution(img, cfg.bins, cfg.mode, cfg.tau, cfg.z_near, cfg.z_far)
            slow += bev_pool(lift_camera_features(img, dist, cam, spec)).data
        assert np.abs(fast.data - slow).max() < 1e-9


class TestPoolAndFuse:
    def test_zero(self):
        vg = VoxelGrid(SMALL, np.zeros((*SMALL.dims, 2)), ("a", "b"))
        assert not bev_pool(vg).data.any()

    def test_column_sum(self):
        data = np.zeros((*SMALL.dims, 1))
        data[3, 4, :3, 0] = (1, 2, 3)
        assert bev_pool(VoxelGrid(SMALL, data, ("a",))).data[3, 4, 0] == 6

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(-3, 3))
    def test_linearity(self, seed, alpha):
        r = np.random.default_rng(seed)
        g1 = r.normal(size=(*SMALL.dims, 2))
        g2 = r.normal(size=(*SMALL.dims, 2))
        p = lambda g: bev_pool(VoxelGrid(SMALL, g, ("a", "b"))).data
        assert np.abs(p(alpha * g1) - alpha * p(g1)).max() < 1e-9
        assert np.abs(p(g1 + g2) - p(g1) - p(g2)).max() < 1e-9
        assert np.abs(p(g1).sum(axis=(0, 1)) - g1.sum(axis=(0, 1, 2))).max() < 1e-9

    def test_identity_encoder(self, rng):
        cam = BEVGrid(SMALL, rng.random((16, 16, 2)), ("cam/occupancy", "cam/x"))
        lid = BEVGrid(SMALL, rng.random((16, 16, 3)), LIDAR_CHANNELS)
        f = fuse_bev(cam, lid)
        assert np.array_equal(f.data, np.concatenate([cam.data, lid.data], axis=-1))
        assert f.channel_names == cam.channel_names + LIDAR_CHANNELS

    def test_zero_lidar(self, rng):
        cam = BEVGrid(SMALL, rng.random((16, 16, 2)), ("cam/occupancy", "cam/x"))
        f = fuse_bev(cam, zero_bev(SMALL, LIDAR_CHANNELS))
        assert not f.data[..., 2:].any() and np.array_equal(f.data[..., :2], cam.data)

    def test_impulse_spread(self):
        data = np.zeros((16, 16, 1))
        data[7, 9, 0] = 1.0
        out = box_spread(data, 1)
        assert np.allclose(out[6:9, 8:11, 0], 1 / 9, atol=1e-15)
        assert np.count_nonzero(out) == 9 and abs(out.sum() - 1) < 1e-9

    @pytest.mark.parametrize("radius", [1, 2, 3])
    def test_spread_oracle(self, rng, radius):
        data = rng.random((9, 7, 2))
        ref = np.zeros_like(data)
        for i in range(9):
            for j in range(7):
                win = [(a, b) for a in range(i - radius, i + radius + 1) for b in range(j - radius, j + radius + 1)
                       if 0 <= a < 9 and 0 <= b < 7]
                for a, b in win:
                    ref[a, b] += data[i, j] / len(win)
        out = box_spread(data, radius)
        assert np.abs(out - ref).max() < 1e-12
        assert np.abs(out.sum(axis=(0, 1)) - data.sum(axis=(0, 1))).max() < 1e-9

    def test_spec_mismatch(self):
        with pytest.raises(ValueError):
            fuse_bev(zero_bev(SMALL, ("cam/occupancy",)), zero_bev(GridSpec(), LIDAR_CHANNELS))


@pytest.fixture(scope="module")
def sensors():
    s = generate_scene(SceneGenConfig(), 17)
    return s, render_cameras(s), render_lidar(s, 2)


class TestRunPipeline:
    def test_mode_l_empty_cloud(self, sensors):
        s, imgs, _ = sensors
        bev = run_pipeline(imgs, PointCloud.empty(), s.cameras, PipelineConfig(), "L")
        assert not bev.data.any()
        assert bev.channel_names == DEFAULT_CAMERA_CHANNELS + LIDAR_CHANNELS

    def test_branch_independence(self, sensors):
        s, imgs, cloud = sensors
        cfg = PipelineConfig()
        zero_imgs = [im.replace_grid(np.zeros_like(im.grid)) for im in imgs]
        cl = run_pipeline(zero_imgs, cloud, s.cameras, cfg, "C+L")
        lo = run_pipeline(imgs, cloud, s.cameras, cfg, "L")
        n = len(DEFAULT_CAMERA_CHANNELS)
        assert np.array_equal(cl.data[..., n:], lo.data[..., n:])
        dropped = lidar_dropout(cloud, LidarDegradeSpec(0.5, 1))
        a = run_pipeline(imgs, cloud, s.cameras, cfg, "C+L")
        b = run_pipeline(imgs, dropped, s.cameras, cfg, "C+L")
        assert np.array_equal(a.data[..., :n], b.data[..., :n])

    def test_compositional(self, sensors):
        s, imgs, cloud = sensors
        cfg = PipelineConfig(encoder=BEVEncoderSpec(radius=1))
        full = run_pipeline(imgs, cloud, s.cameras, cfg, "C+L")
        cam = bev_pool(VoxelGrid(cfg.grid, np.zeros((*cfg.grid.dims, 5)), DEFAULT_CAMERA_CHANNELS))
        for img, c in zip(imgs, s.cameras):
            dist = estimate_depth_distribution(img, cfg.depth.bins, cfg.depth.mode, cfg.depth.tau,
                                               cfg.depth.z_near, cfg.depth.z_far)
            cam = BEVGrid(cfg.grid, cam.data + bev_pool(lift_camera_features(img, dist, c, cfg.grid)).data,
                          cam.channel_names)
        sep = fuse_bev(cam, bev_pool(voxelize(cloud, cfg.grid)), cfg.encoder)
        assert np.abs(full.data - sep.data).max() < 1e-9

    def test_mode_c_has_zero_lidar(self, sensors):
        s, imgs, cloud = sensors
        bev = run_pipeline(imgs, cloud, s.cameras, PipelineConfig(), "C")
        assert not bev.data[..., len(DEFAULT_CAMERA_CHANNELS):].any()
        assert bev.channel("cam/occupancy").sum() > 0

    def test_bad_mode(self, sensors):
        s, imgs, cloud = sensors
        with pytest.raises(ValueError):
            run_pipeline(imgs, cloud, s.cameras, PipelineConfig(), "R")

    def test_config_round_trip(self, tmp_path):
        cfg = PipelineConfig(depth=DepthConfig(mode="uniform", bins=30), encoder=BEVEncoderSpec(2))
        (tmp_path / "p.json").write_text(json.dumps(cfg.to_dict()))
        assert PipelineConfig.load(tmp_path / "p.json") == cfg

    def test_dump(self, tmp_path, rng):
        bev = BEVGrid(SMALL, rng.random((16, 16, 2)), ("cam/occupancy", "x"))
        dump_bev(bev, tmp_path / "bev")
        assert np.array_equal(np.load(tmp_path / "bev.npy"), bev.data)
        meta = json.loads((tmp_path / "bev.json").read_text())
        assert meta["channel_names"] == ["cam/occupancy", "x"] and meta["shape"] == [16, 16, 2]
