import json
import shutil

import numpy as np
import pytest
from scipy import stats

from stereopose import scenegen as SG
from stereopose.rigid import Pose, is_rotation, rodrigues
from stereopose.stereo_geometry import backproject, desk_rig, disparity_to_depth


def point_triangle_distance(p, tris):
    """Distance from p to the nearest triangle whose interior contains its projection."""
    best = np.inf
    for a, b, c in tris:
        n = np.cross(b - a, c - a)
        n /= np.linalg.norm(n)
        dist = (p - a) @ n
        q = p - dist * n
        M = np.stack([b - a, c - a], axis=1)
        (s, t), *_ = np.linalg.lstsq(M, q - a, rcond=None)
        if s >= -1e-9 and t >= -1e-9 and s + t <= 1 + 1e-9:
            best = min(best, abs(dist))
    return best


def test_default_target_counts():
    model = SG.build_target()
    assert model.triangles.shape == (SG.N_TRIANGLES, 3, 3)
    assert len(model.points) == SG.TargetParams().n_points and len(model.keypoints) == 8
    areas = np.linalg.norm(np.cross(model.triangles[:, 1] - model.triangles[:, 0],
                                    model.triangles[:, 2] - model.triangles[:, 0]), axis=1)
    assert areas.min() > 0


def test_surface_points_on_their_triangles():
    model = SG.build_target()
    worst = 0.0
    for p, ti in zip(model.points, model.point_tris):
        a, b, c = model.triangles[ti]
        M = np.stack([b - a, c - a], axis=1)
        (s, t), *_ = np.linalg.lstsq(M, p - a, rcond=None)
        assert s >= -1e-12 and t >= -1e-12 and s + t <= 1 + 1e-12
        worst = max(worst, np.linalg.norm(a + s * (b - a) + t * (c - a) - p))
    assert worst < 1e-9


def test_scaling_all_dimensions_scales_bbox():
    base = SG.TargetParams()
    big = SG.TargetParams(body=tuple(2 * x for x in base.body), panel_length=2 * base.panel_length,
                          panel_width=2 * base.panel_width, panel_thickness=2 * base.panel_thickness,
                          panel_gap=2 * base.panel_gap)
    t0, t1 = SG.build_target(base).triangles, SG.build_target(big).triangles
    ext = lambda t: t.reshape(-1, 3).max(0) - t.reshape(-1, 3).min(0)
    assert np.allclose(ext(t1), 2 * ext(t0), rtol=1e-15)


def test_target_validation():
    with pytest.raises(ValueError):
        SG.TargetParams(body=(1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        SG.TargetParams(n_points=4, n_keypoints=8)


def test_pose_depth_distribution():
    rng = np.random.default_rng(0)
    zs = np.array([SG.sample_pose(rng).t[2] for _ in range(10_000)])
    assert zs.min() >= 10 and zs.max() <= 50
    assert stats.kstest(zs, "uniform", args=(10, 40)).statistic < 0.02


def test_pose_rotation_and_determinism():
    a = SG.sample_pose(np.random.default_rng(5))
    b = SG.sample_pose(np.random.default_rng(5))
    assert is_rotation(a.R, tol=1e-9)
    assert np.array_equal(a.R, b.R) and np.array_equal(a.t, b.t)
    with pytest.raises(ValueError):
        SG.sample_pose(np.random.default_rng(0), depth_range=(5.0, 5.0))


def test_pose_centre_projects_into_both_views():
    rig = desk_rig()
    K = rig.intrinsics
    rng = np.random.default_rng(1)
    for _ in range(500):
        t = SG.sample_pose(rng, rig).t
        u = K.fx * t[0] / t[2] + K.cx
        assert 0 <= u - K.fx * rig.baseline / t[2] and u <= K.width - 1


@pytest.fixture(scope="module")
def scene():
    model = SG.build_target()
    rig = desk_rig()
    pose = SG.sample_pose(np.random.default_rng(2), rig, depth_range=(10.0, 15.0))
    return model, rig, pose


def test_disparity_matches_rendered_depth(scene):
    model, rig, pose = scene
    s = SG.render_sample(model, pose, rig)
    assert s.mask.sum() > 200
    assert SG.consistency_residual(s, model) < 1e-6
    valid = s.mask
    assert np.max(np.abs(s.disparity.values[valid] - rig.intrinsics.fx * rig.baseline / s.depth[valid])) < 1e-6


def test_penumbra_is_dark(scene):
    model, rig, pose = scene
    sun = SG.render_sample(model, pose, rig, "direct_solar", seed=4)
    dark = SG.render_sample(model, pose, rig, "penumbra", seed=4)
    assert dark.left[dark.mask].mean() < 0.1 * sun.left[sun.mask].mean()


def test_render_bit_identical(scene):
    model, rig, pose = scene
    a = SG.render_sample(model, pose, rig, "mixed", "none", seed=9)
    b = SG.render_sample(model, pose, rig, "mixed", "none", seed=9)
    for x, y in [(a.left, b.left), (a.right, b.right), (a.disparity.values, b.disparity.values)]:
        assert x.tobytes() == y.tobytes()


def test_noise_never_touches_ground_truth(scene):
    model, rig, pose = scene
    ref = SG.render_sample(model, pose, rig, "direct_solar", "none", seed=3)
    for tag in SG.NOISE_TAGS[1:]:
        s = SG.render_sample(model, pose, rig, "direct_solar", tag, seed=3)
        assert s.disparity.values.tobytes() == ref.disparity.values.tobytes()
        assert s.mask.tobytes() == ref.mask.tobytes()
        assert not np.array_equal(s.left, ref.left)


def test_out_of_frame_raises(scene):
    model, rig, _ = scene
    with pytest.raises(ValueError):
        SG.render_sample(model, Pose(np.eye(3), [500.0, 0.0, 20.0]), rig)


def test_occlusion_mask_is_subset(scene):
    model, rig, pose = scene
    s = SG.render_sample(model, pose, rig)
    assert not np.any(s.noc_mask & ~s.mask)
    assert s.noc_mask.sum() > 0.5 * s.mask.sum()


def test_split_and_tags_pure_functions():
    counts = [sum(SG.split_of(i, seed) == "test" for i in range(100)) for seed in range(5)]
    assert counts == [10] * 5
    tags = [SG.tags_of(i) for i in range(100)]
    for pos, names in ((0, SG.ILLUMINATIONS), (1, SG.NOISE_TAGS)):
        hist = [sum(t[pos] == n for t in tags) for n in names]
        assert max(hist) - min(hist) <= 1
    # every illumination meets every noise tag
    assert len(set(tags[:16])) == 16


def test_generate_hundred(tmp_path):
    m = SG.generate_dataset(tmp_path / "a", n_samples=100, master_seed=7)
    assert m["split_counts"] == {"train": 90, "test": 10}
    for key in ("illumination_counts", "noise_counts"):
        assert max(m[key].values()) - min(m[key].values()) <= 1
    SG.generate_dataset(tmp_path / "b", n_samples=100, master_seed=7)
    assert SG.tree_digest(tmp_path / "a") == SG.tree_digest(tmp_path / "b")


def test_parallel_generation_identical(tmp_path):
    SG.generate_dataset(tmp_path / "s", n_samples=12, master_seed=1)
    SG.generate_dataset(tmp_path / "p", n_samples=12, master_seed=1, workers=2)
    assert SG.tree_digest(tmp_path / "s") == SG.tree_digest(tmp_path / "p")


def test_generate_requires_ten(tmp_path):
    with pytest.raises(ValueError):
        SG.generate_dataset(tmp_path, n_samples=5)


def test_layout_and_pose_json(small_dataset):
    m = SG.load_manifest(small_dataset)
    d = small_dataset / m["samples"][0]["id"]
    names = {p.name for p in d.iterdir()}
    assert {"left.ppm", "right.ppm", "disp.pfm", "mask.pgm", "pose.json", "meta.json"} <= names
    doc = json.loads((d / "pose.json").read_text())
    assert len(doc["R"]) == 9 and len(doc["quaternion_wxyz"]) == 4 and len(doc["t"]) == 3
    assert {"rig", "illumination", "noise"} <= doc.keys()


def test_write_read_round_trip(small_dataset):
    m = SG.load_manifest(small_dataset)
    model = SG.build_target(SG.TargetParams.from_dict(m["target"]))
    rig = SG.StereoRig.from_dict(m["rig"])
    entry = m["samples"][4]
    loaded = SG.load_sample(small_dataset, entry, rig)
    rng = np.random.default_rng(entry["seed"])
    src = SG.render_sample(model, SG.sample_pose(rng, rig, tuple(m["depth_range"])), rig,
                           entry["illumination"], entry["noise"], entry["seed"])
    assert np.array_equal(loaded.pose.R, src.pose.R) and np.array_equal(loaded.pose.t, src.pose.t)
    assert np.array_equal(loaded.mask, src.mask)
    assert np.array_equal(loaded.disparity.values[src.mask], src.disparity.values[src.mask])
    assert np.max(np.abs(loaded.left - src.left)) <= 0.5 / 255 + 1e-12
    pfm = SG.read_pfm(small_dataset / entry["id"] / "disp.pfm")
    assert np.max(np.abs(pfm[src.mask] - src.disparity.values[src.mask])) < 1e-5 * src.disparity.values.max()


def test_read_dataset_verify_and_split(small_dataset):
    all_ids = [s.sample_id for s in SG.read_dataset(small_dataset, verify=True)]
    test_ids = [s.sample_id for s in SG.read_dataset(small_dataset, split="test")]
    assert len(all_ids) == 20 and len(test_ids) == 2 and set(test_ids) < set(all_ids)


def test_truncated_file_names_sample(small_dataset, tmp_path):
    root = tmp_path / "ds"
    shutil.copytree(small_dataset, root)
    sid = SG.load_manifest(root)["samples"][3]["id"]
    f = root / sid / "left.ppm"
    f.write_bytes(f.read_bytes()[:100])
    with pytest.raises(SG.DatasetError, match=sid):
        list(SG.read_dataset(root))


def test_missing_manifest(tmp_path):
    with pytest.raises(SG.DatasetError):
        SG.load_manifest(tmp_path)


def test_verify_catches_perturbed_pose(small_dataset, tmp_path):
    root = tmp_path / "ds"
    shutil.copytree(small_dataset, root)
    sid = SG.load_manifest(root)["samples"][5]["id"]
    path = root / sid / "pose.json"
    doc = json.loads(path.read_text())
    R = np.array(doc["R"]).reshape(3, 3) @ rodrigues([0, 1, 0], 1e-3)
    doc["R"] = R.reshape(-1).tolist()
    path.write_text(json.dumps(doc))
    list(SG.read_dataset(root))              # loads fine without verification
    with pytest.raises(SG.DatasetError, match=sid):
        list(SG.read_dataset(root, verify=True))


def test_backprojection_lands_on_surface(small_dataset):
    m = SG.load_manifest(small_dataset)
    model = SG.build_target(SG.TargetParams.from_dict(m["target"]))
    rng = np.random.default_rng(0)
    for sample in list(SG.read_dataset(small_dataset))[:4]:
        depth, valid = disparity_to_depth(sample.disparity, sample.rig)
        cloud = backproject(depth, valid, sample.rig.intrinsics)
        pick = rng.choice(len(cloud), size=min(100, len(cloud)), replace=False)
        obj = sample.pose.inverse().apply(cloud.points[pick])
        worst = max(point_triangle_distance(p, model.triangles) for p in obj)
        assert worst < 1e-6
