from __future__ import annotations

import numpy as np
import pytest

from cousinforge.errors import MissingImage, UnknownFrame
from cousinforge.fusion import (
    DetectionRecord,
    FusionConfig,
    GroundMaskRecord,
    extract_sky,
    fuse_ground,
    fuse_objects,
    rle_decode,
    rle_encode,
)
from cousinforge.geometry import CameraFrame, wrap_angle

SIZE = 16
FOCAL = 40.0
PP = SIZE / 2 - 0.5
DEPTH = 2.0


def det_frame(frame_id: int, txy, depth_value: float = DEPTH) -> CameraFrame:
    """Camera at (txy, -2) looking along +z at a plane 2 m away."""
    depth = np.full((SIZE, SIZE), depth_value, dtype=np.float64)
    return CameraFrame(
        frame_id, SIZE, SIZE, FOCAL, FOCAL, PP, PP,
        np.eye(3), np.array([txy[0], txy[1], -2.0]), depth,
    )


def full_mask() -> np.ndarray:
    return np.ones((SIZE, SIZE), dtype=bool)


def small_mask() -> np.ndarray:
    mask = np.zeros((SIZE, SIZE), dtype=bool)
    mask[6:10, 6:10] = True
    return mask


def one_hot(i: int, dim: int = 64) -> np.ndarray:
    v = np.zeros(dim)
    v[i] = 1.0
    return v


def make_det(index: int, sem: np.ndarray, label: str = "amp", mask: np.ndarray | None = None) -> DetectionRecord:
    mask = full_mask() if mask is None else mask
    return DetectionRecord(
        frame_id=index,
        det_id=0,
        label=label,
        score=0.9,
        mask_counts=rle_encode(mask),
        semantic_embed=sem,
        appearance_embed=one_hot(index),
    )


class TestRle:
    def test_hand_case(self):
        mask = rle_decode([3, 2, 3], 4, 2)
        want = np.array([[0, 0, 0, 1], [1, 0, 0, 0]], dtype=bool)
        assert np.array_equal(mask, want)

    def test_leading_one_has_zero_first_count(self):
        mask = np.array([[1, 1, 0, 0]], dtype=bool)
        counts = rle_encode(mask)
        assert counts == [0, 2, 2]
        assert np.array_equal(rle_decode(counts, 4, 1), mask)

    def test_all_zero_and_all_one(self):
        zero = np.zeros((3, 5), dtype=bool)
        assert rle_encode(zero) == [15]
        one = np.ones((3, 5), dtype=bool)
        assert rle_encode(one) == [0, 15]
        assert np.array_equal(rle_decode([15], 5, 3), zero)
        assert np.array_equal(rle_decode([0, 15], 5, 3), one)

    def test_round_trip_random(self):
        rng = np.random.default_rng(17)
        for _ in range(50):
            h = int(rng.integers(1, 12))
            w = int(rng.integers(1, 12))
            mask = rng.random((h, w)) < rng.uniform(0.1, 0.9)
            counts = rle_decode(rle_encode(mask), w, h)
            assert np.array_equal(counts, mask)

    def test_sum_mismatch_raises(self):
        with pytest.raises(ValueError):
            rle_decode([3, 2], 4, 2)

    def test_negative_count_raises(self):
        with pytest.raises(ValueError):
            rle_decode([3, -1, 6], 4, 2)

    def test_non_integer_count_raises(self):
        with pytest.raises(ValueError):
            rle_decode([3.5, 4.5], 4, 2)


def oracle_partition(frames, dets, masks, cfg):
    """Exhaustive reachability-closure reference for detection grouping.

    Recomputes clouds, voxel sets, and the pairwise merge predicate from
    first principles, then closes it with boolean matrix reachability.
    Returns (partition, categories) where partition is a set of
    frozensets of detection indices and categories maps the smallest
    member index of each group to the modal label.
    """
    n = len(dets)
    vox_list: list[set | None] = []
    sizes: list[int] = []
    sems = []
    for frame, det, mask in zip(frames, dets, masks):
        d = float(frame.depth[0, 0])
        raw = np.asarray(det.semantic_embed, dtype=np.float64)
        sems.append(raw / np.linalg.norm(raw))
        if d <= 0:
            vox_list.append(None)
            sizes.append(0)
            continue
        vs, us = np.nonzero(mask)
        pts = np.stack(
            [
                frame.translation[0] + d * ((us - frame.cx) / frame.fx),
                frame.translation[1] + d * ((vs - frame.cy) / frame.fy),
                frame.translation[2] + d * np.ones(us.size),
            ],
            axis=1,
        )
        keys = np.floor(pts / cfg.voxel).astype(np.int64)
        vox_list.append({tuple(k) for k in keys})
        sizes.append(len(pts))

    adjacency = np.eye(n, dtype=bool)
    for i in range(n):
        if vox_list[i] is None:
            adjacency[i, i] = False
            continue
        for j in range(i + 1, n):
            if vox_list[j] is None:
                continue
            if float(np.dot(sems[i], sems[j])) < cfg.semantic_threshold:
                continue
            shared = len(vox_list[i] & vox_list[j])
            ratio = shared / min(len(vox_list[i]), len(vox_list[j]))
            if ratio >= cfg.overlap_threshold:
                adjacency[i, j] = adjacency[j, i] = True

    reach = adjacency.copy()
    for _ in range(n):
        grown = reach | (reach @ reach)
        if np.array_equal(grown, reach):
            break
        reach = grown

    partition = set()
    categories = {}
    seen: set[int] = set()
    for i in range(n):
        if vox_list[i] is None or i in seen:
            continue
        members = frozenset(int(j) for j in np.nonzero(reach[i])[0])
        seen.update(members)
        if sum(sizes[j] for j in members) < cfg.min_points:
            continue
        partition.add(members)
        labels = [dets[j].label for j in sorted(members)]
        counts: dict[str, int] = {}
        for label in labels:
            counts[label] = counts.get(label, 0) + 1
        best = max(counts.values())
        categories[min(members)] = min(k for k, v in counts.items() if v == best)
    return partition, categories


def random_instance(rng, n_dets: int):
    n_sem = int(rng.integers(1, 4))
    sem_dirs = np.eye(24)[:n_sem]
    n_clusters = int(rng.integers(1, 5))
    centers = rng.uniform(-4.0, 4.0, size=(n_clusters, 2))
    labels = ["amp", "bale", "crate"]
    frames, dets, masks = [], [], []
    for i in range(n_dets):
        cluster = int(rng.integers(0, n_clusters))
        angle = rng.uniform(0, 2 * np.pi)
        radius = rng.uniform(0, 0.55)
        txy = centers[cluster] + radius * np.array([np.cos(angle), np.sin(angle)])
        dead = rng.random() < 0.08
        mask = small_mask() if rng.random() < 0.18 else full_mask()
        sem = sem_dirs[int(rng.integers(0, n_sem))] + rng.uniform(0.0, 0.5) * rng.normal(size=24)
        frames.append(det_frame(i, txy, depth_value=0.0 if dead else DEPTH))
        dets.append(make_det(i, sem, label=str(rng.choice(labels)), mask=mask))
        masks.append(mask)
    return frames, dets, masks


def node_partition(nodes):
    return {frozenset(c.frame_id for c in node.crops) for node in nodes}


class TestFuseObjects:
    def test_empty_input(self):
        assert fuse_objects([det_frame(0, (0, 0))], [], FusionConfig()) == []

    def test_unknown_frame_raises(self):
        frames = [det_frame(0, (0, 0))]
        det = make_det(7, one_hot(0, 24))
        with pytest.raises(UnknownFrame):
            fuse_objects(frames, [det], FusionConfig())

    def test_unsorted_frames_rejected(self):
        frames = [det_frame(1, (0, 0)), det_frame(0, (1, 1))]
        with pytest.raises(ValueError):
            fuse_objects(frames, [], FusionConfig())

    def test_duplicate_detections_merge_to_one_node(self):
        sem = one_hot(0, 24)
        frames = [det_frame(0, (0, 0)), det_frame(1, (0, 0))]
        dets = [make_det(0, sem), make_det(1, sem)]
        nodes = fuse_objects(frames, dets, FusionConfig())
        assert len(nodes) == 1
        assert len(nodes[0].crops) == 2
        assert nodes[0].node_id == 0

    def test_semantic_mismatch_keeps_nodes_apart(self):
        frames = [det_frame(0, (0, 0)), det_frame(1, (0, 0))]
        dets = [make_det(0, one_hot(0, 24)), make_det(1, one_hot(1, 24))]
        nodes = fuse_objects(frames, dets, FusionConfig())
        assert len(nodes) == 2

    def test_disjoint_clouds_keep_nodes_apart(self):
        sem = one_hot(0, 24)
        frames = [det_frame(0, (0, 0)), det_frame(1, (5, 5))]
        dets = [make_det(0, sem), make_det(1, sem)]
        nodes = fuse_objects(frames, dets, FusionConfig())
        assert len(nodes) == 2

    def test_transitive_chain_hand_case(self):
        sem_a = one_hot(0, 24)
        sem_b = one_hot(1, 24)
        frames = [
            det_frame(0, (0.0, 0.0)),
            det_frame(1, (0.35, 0.0)),
            det_frame(2, (0.70, 0.0)),
            det_frame(3, (0.0, 0.0)),
            det_frame(4, (5.0, 5.0)),
        ]
        dets = [
            make_det(0, sem_a, label="amp"),
            make_det(1, sem_a, label="amp"),
            make_det(2, sem_a, label="bale"),
            make_det(3, sem_b, label="bale"),
            make_det(4, sem_a, label="crate"),
        ]
        nodes = fuse_objects(frames, dets, FusionConfig())
        assert node_partition(nodes) == {frozenset({0, 1, 2}), frozenset({3}), frozenset({4})}
        chain = next(n for n in nodes if len(n.crops) == 3)
        assert chain.category == "amp"
        assert nodes[0].node_id == 0 and nodes[-1].node_id == len(nodes) - 1

    def test_min_points_drops_isolated_small_group(self):
        sem = one_hot(0, 24)
        frames = [det_frame(0, (0, 0))]
        dets = [make_det(0, sem, mask=small_mask())]
        assert fuse_objects(frames, dets, FusionConfig()) == []
        frames = [det_frame(0, (0, 0)), det_frame(1, (0, 0))]
        dets = [make_det(0, sem, mask=small_mask()), make_det(1, sem, mask=small_mask())]
        nodes = fuse_objects(frames, dets, FusionConfig())
        assert len(nodes) == 1

    def test_zero_depth_detection_dropped(self):
        sem = one_hot(0, 24)
        frames = [det_frame(0, (0, 0)), det_frame(1, (0, 0), depth_value=0.0)]
        dets = [make_det(0, sem), make_det(1, sem)]
        nodes = fuse_objects(frames, dets, FusionConfig())
        assert len(nodes) == 1
        assert {c.frame_id for c in nodes[0].crops} == {0}

    def test_category_tie_breaks_lexicographically(self):
        sem = one_hot(0, 24)
        frames = [det_frame(0, (0, 0)), det_frame(1, (0, 0))]
        dets = [make_det(0, sem, label="zeta"), make_det(1, sem, label="alpha")]
        nodes = fuse_objects(frames, dets, FusionConfig())
        assert nodes[0].category == "alpha"

    def test_heading_faces_mean_camera_direction(self):
        sem = one_hot(0, 24)
        left_cols = np.zeros((SIZE, SIZE), dtype=bool)
        left_cols[:, :8] = True
        frames = [det_frame(0, (0.0, 0.0)), det_frame(1, (0.5, 0.0))]
        dets = [make_det(0, sem), make_det(1, sem, mask=left_cols)]
        nodes = fuse_objects(frames, dets, FusionConfig())
        assert len(nodes) == 1
        assert abs(nodes[0].box.yaw) < 1e-9
        assert np.cos(nodes[0].heading) > 0.99

        right_cols = np.zeros((SIZE, SIZE), dtype=bool)
        right_cols[:, 8:] = True
        frames = [det_frame(0, (0.0, 0.0)), det_frame(1, (-0.5, 0.0))]
        dets = [make_det(0, sem), make_det(1, sem, mask=right_cols)]
        nodes = fuse_objects(frames, dets, FusionConfig())
        assert len(nodes) == 1
        assert np.cos(nodes[0].heading) < -0.99
        assert abs(wrap_angle(nodes[0].heading - nodes[0].box.yaw - np.pi)) < 1e-9

    def test_matches_exhaustive_closure_oracle(self):
        rng = np.random.default_rng(71)
        for _ in range(30):
            n_dets = int(rng.integers(2, 18))
            frames, dets, masks = random_instance(rng, n_dets)
            cfg = FusionConfig()
            nodes = fuse_objects(frames, dets, cfg)
            want_partition, want_categories = oracle_partition(frames, dets, masks, cfg)
            assert node_partition(nodes) == want_partition
            for node in nodes:
                root = min(c.frame_id for c in node.crops)
                assert node.category == want_categories[root]

    def test_detection_order_invariance(self):
        rng = np.random.default_rng(72)
        frames, dets, _ = random_instance(rng, 14)
        baseline = fuse_objects(frames, dets, FusionConfig())
        for _ in range(10):
            shuffled = [dets[i] for i in rng.permutation(len(dets))]
            assert fuse_objects(frames, shuffled, FusionConfig()) == baseline

    def test_semantic_threshold_monotonicity(self):
        rng = np.random.default_rng(73)
        frames, dets, _ = random_instance(rng, 15)
        counts = []
        for threshold in (0.0, 0.4, 0.8, 0.95, 1.0):
            cfg = FusionConfig(semantic_threshold=threshold, min_points=1)
            counts.append(len(fuse_objects(frames, dets, cfg)))
        assert counts == sorted(counts)

    def test_overlap_threshold_monotonicity(self):
        rng = np.random.default_rng(74)
        frames, dets, _ = random_instance(rng, 15)
        counts = []
        for threshold in (0.01, 0.3, 0.7, 1.01):
            cfg = FusionConfig(overlap_threshold=threshold, min_points=1)
            counts.append(len(fuse_objects(frames, dets, cfg)))
        assert counts == sorted(counts)

    def test_crop_conservation(self):
        rng = np.random.default_rng(75)
        frames, dets, masks = random_instance(rng, 16)
        cfg = FusionConfig(min_points=1)
        nodes = fuse_objects(frames, dets, cfg)
        alive = [i for i, f in enumerate(frames) if f.depth[0, 0] > 0]
        total = sum(len(n.crops) for n in nodes)
        assert total == len(alive)
        seen = [c.frame_id for n in nodes for c in n.crops]
        assert sorted(seen) == alive


def gray_patch(value: int = 120) -> np.ndarray:
    return np.full((64, 64, 3), value, dtype=np.uint8)


class TestFuseGround:
    def test_road_plane_merged_and_downsampled(self):
        frames = [det_frame(0, (0, 0)), det_frame(1, (0.4, 0))]
        records = [
            GroundMaskRecord(0, "road", rle_encode(full_mask()), gray_patch()),
            GroundMaskRecord(1, "road", rle_encode(full_mask()), gray_patch(80)),
        ]
        nodes = fuse_ground(frames, records, FusionConfig())
        assert len(nodes) == 1
        node = nodes[0]
        assert node.kind == "road"
        assert len(node.crops) == 2
        assert np.allclose(node.cloud.points[:, 2], 0.0, atol=1e-9)
        from cousinforge.geometry import voxel_keys
        assert len(voxel_keys(node.cloud, 0.1)) == len(node.cloud)

    def test_kinds_sorted_road_first(self):
        walk_mask = np.zeros((SIZE, SIZE), dtype=bool)
        walk_mask[:, 8:] = True
        road_mask = ~walk_mask
        frames = [det_frame(0, (0, 0))]
        records = [
            GroundMaskRecord(0, "sidewalk", rle_encode(walk_mask), gray_patch(150)),
            GroundMaskRecord(0, "road", rle_encode(road_mask), gray_patch()),
        ]
        nodes = fuse_ground(frames, records, FusionConfig())
        assert [n.kind for n in nodes] == ["road", "sidewalk"]

    def test_empty_lift_mask_skipped(self):
        frames = [det_frame(0, (0, 0)), det_frame(1, (0, 0), depth_value=0.0)]
        records = [
            GroundMaskRecord(0, "road", rle_encode(full_mask()), gray_patch()),
            GroundMaskRecord(1, "road", rle_encode(full_mask()), gray_patch()),
        ]
        nodes = fuse_ground(frames, records, FusionConfig())
        assert len(nodes) == 1
        assert len(nodes[0].crops) == 1

    def test_unknown_frame_raises(self):
        with pytest.raises(UnknownFrame):
            fuse_ground(
                [det_frame(0, (0, 0))],
                [GroundMaskRecord(3, "road", rle_encode(full_mask()), gray_patch())],
                FusionConfig(),
            )

    def test_no_records_gives_no_nodes(self):
        assert fuse_ground([det_frame(0, (0, 0))], [], FusionConfig()) == []


class TestExtractSky:
    def test_upper_half_histogram(self):
        frames = [det_frame(0, (0, 0))]
        image = np.zeros((SIZE, SIZE, 3), dtype=np.uint8)
        image[:8, :, 0] = 255
        image[8:, :, 1] = 255
        sky = extract_sky(frames, {0: image})
        assert len(sky.crops) == 1
        hist = sky.crops[0].hsv_hist
        assert hist[0 * 64 + 7 * 8 + 7] == 1.0

    def test_one_crop_per_frame_in_order(self):
        frames = [det_frame(0, (0, 0)), det_frame(4, (1, 1))]
        image = np.full((SIZE, SIZE, 3), 200, dtype=np.uint8)
        sky = extract_sky(frames, {0: image, 4: image})
        assert [c.frame_id for c in sky.crops] == [0, 4]

    def test_missing_image_raises(self):
        frames = [det_frame(0, (0, 0)), det_frame(1, (1, 1))]
        image = np.zeros((SIZE, SIZE, 3), dtype=np.uint8)
        with pytest.raises(MissingImage):
            extract_sky(frames, {0: image})

    def test_shape_mismatch_raises(self):
        frames = [det_frame(0, (0, 0))]
        with pytest.raises(MissingImage):
            extract_sky(frames, {0: np.zeros((4, 4, 3), dtype=np.uint8)})
